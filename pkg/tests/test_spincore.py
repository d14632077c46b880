"""Spin Hamiltonian construction, diagonalization, labeling, and tensor
principal-form conversions."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from endorlab import (
    FieldVector,
    PrincipalForm,
    SpinSystem,
    build_hamiltonian,
    eigenlevels,
    label_levels,
    principal_from_tensor,
    tensor_from_principal,
)
from endorlab.constants import BETA_OVER_H_MHZ_PER_MT
from endorlab.spincore import product_basis, rotation_zyz, spin_matrices

from conftest import A_MATRIX_MHZ, G_MATRIX, G_PRINCIPAL
from oracles import jacobi_eigvalsh


class TestSpinMatrices:
    @pytest.mark.parametrize("s", [0.5, 1.0, 1.5, 3.5])
    def test_commutators(self, s):
        sx, sy, sz = spin_matrices(s)
        assert np.allclose(sx @ sy - sy @ sx, 1j * sz, atol=1e-12)
        casimir = sx @ sx + sy @ sy + sz @ sz
        assert np.allclose(casimir, s * (s + 1) * np.eye(round(2 * s) + 1), atol=1e-12)

    def test_traceless(self):
        for op in spin_matrices(3.5):
            assert abs(np.trace(op)) < 1e-12

    def test_bad_spin_rejected(self):
        with pytest.raises(ValueError):
            spin_matrices(0.7)


class TestPrincipalForm:
    def test_isotropic_is_rotation_invariant(self):
        p = PrincipalForm(values=[1.0, 1.0, 1.0], euler_zyz_deg=[33.0, 71.0, -12.0])
        assert np.allclose(tensor_from_principal(p), np.eye(3), atol=1e-12)

    def test_paper_g_matrix_principal_values(self):
        p = principal_from_tensor(G_MATRIX)
        assert np.allclose(sorted(p.values), sorted(G_PRINCIPAL), atol=0.02)
        assert p.values[0] == pytest.approx(-4.16, abs=0.02)  # largest magnitude first
        assert np.trace(G_MATRIX) == pytest.approx(sum(G_PRINCIPAL), abs=0.02)
        assert p.asymmetry_norm == pytest.approx(0.00707, abs=1e-4)

    def test_paper_angles_rebuild_the_g_matrix(self):
        # the published principal values and ZYZ angles must reproduce the
        # printed matrix to print precision
        p = PrincipalForm(values=list(G_PRINCIPAL), euler_zyz_deg=[87.0, 149.0, 36.0])
        rebuilt = tensor_from_principal(p)
        assert np.abs(rebuilt - (G_MATRIX + G_MATRIX.T) / 2).max() < 0.02

    def test_identity_degenerate(self):
        p = principal_from_tensor(np.eye(3))
        assert p.degenerate
        assert np.allclose(p.values, 1.0)
        assert np.allclose(tensor_from_principal(p), np.eye(3), atol=1e-12)

    def test_a_matrix_trace_inconsistency_detected(self):
        # the printed hyperfine matrix cannot have the published principal
        # values: the traces disagree by ~243 MHz
        p = principal_from_tensor(A_MATRIX_MHZ)
        stated = (1323.0, -520.0, -137.0)
        assert abs(np.trace(A_MATRIX_MHZ) - sum(stated)) > 100.0
        assert p.values.sum() == pytest.approx(np.trace(A_MATRIX_MHZ), abs=1e-6)
        # the two largest-magnitude values nevertheless agree
        assert p.values[0] == pytest.approx(1323.0, abs=1.0)
        assert p.values[1] == pytest.approx(-520.0, abs=1.0)

    def test_derived_eigenvalues_oracle(self):
        p = principal_from_tensor(A_MATRIX_MHZ)
        oracle = jacobi_eigvalsh((A_MATRIX_MHZ + A_MATRIX_MHZ.T) / 2)
        assert np.allclose(sorted(p.values), oracle, atol=1e-8)

    def test_known_eigenvalues_round_trip(self):
        p = PrincipalForm(values=[2.0, 3.0, 5.0], euler_zyz_deg=[10.0, 20.0, 30.0])
        m = tensor_from_principal(p)
        assert np.allclose(jacobi_eigvalsh(m), [2.0, 3.0, 5.0], atol=1e-10)
        back = principal_from_tensor(m)
        assert np.allclose(sorted(back.values), [2.0, 3.0, 5.0], atol=1e-10)

    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_random(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(3, 3))
        sym = (m + m.T) / 2
        p = principal_from_tensor(sym)
        assert np.abs(tensor_from_principal(p) - sym).max() < 1e-10

    def test_rotation_zyz_orthogonal(self):
        r = rotation_zyz(87.0, 149.0, 36.0)
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)


class TestHamiltonian:
    def test_i0_zeeman_splitting(self):
        sys = SpinSystem(g_tensor=2.0 * np.eye(3), nuclear_spin=0.0)
        h = build_hamiltonian(sys, FieldVector(100.0, 0.0, 0.0))
        levels = eigenlevels(h)
        split = levels.energies_mhz[1] - levels.energies_mhz[0]
        assert split == pytest.approx(2 * BETA_OVER_H_MHZ_PER_MT * 100.0, rel=1e-12)
        assert split == pytest.approx(2799.24898, abs=1e-4)

    def test_zero_field_hyperfine_traceless(self, nd_system):
        h = build_hamiltonian(nd_system, FieldVector(0.0))
        assert abs(np.trace(h)) < 1e-9
        assert h.shape == (16, 16)

    def test_paper_field_point(self, nd_system, b_hyperfine):
        h = build_hamiltonian(nd_system, b_hyperfine)
        assert h.shape == (16, 16)
        assert np.abs(h - h.conj().T).max() < 1e-12 * np.linalg.norm(h)
        levels = eigenlevels(h)
        # two electron manifolds of 8, separated by the microwave quantum
        assert levels.energies_mhz[8] - levels.energies_mhz[7] > 5000.0

    def test_hermiticity_rejection(self):
        bad = np.diag([1.0, 2.0]) + 0j
        bad[0, 1] = 0.5
        with pytest.raises(ValueError):
            eigenlevels(bad)

    def test_trace_identity(self, nd_system, b_hyperfine):
        h = build_hamiltonian(nd_system, b_hyperfine)
        levels = eigenlevels(h)
        assert levels.energies_mhz.sum() == pytest.approx(
            float(np.trace(h).real), abs=1e-6 * max(abs(np.trace(h).real), 1.0))

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_rotation_covariance(self, seed):
        rng = np.random.default_rng(seed)
        g = rng.normal(size=(3, 3))
        a = rng.normal(size=(3, 3)) * 300
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        b = FieldVector(300.0, 40.0, 25.0)
        b_rot = q @ b.vector_mT()

        class _V:
            def unit(self):
                return b_rot / np.linalg.norm(b_rot)

        sys1 = SpinSystem(g, a, 1.5)
        sys2 = SpinSystem(q @ g @ q.T, q @ a @ q.T, 1.5)
        h1 = build_hamiltonian(sys1, b)
        from endorlab.spincore import hyperfine_hamiltonian, zeeman_unit_hamiltonian
        h2 = np.linalg.norm(b_rot) * zeeman_unit_hamiltonian(sys2, _V().unit()) \
            + hyperfine_hamiltonian(sys2)
        e1 = np.linalg.eigvalsh(h1)
        e2 = np.linalg.eigvalsh(h2)
        assert np.abs(e1 - e2).max() < 1e-8 * max(np.abs(e1).max(), 1.0)

    def test_eigensolver_matches_jacobi_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            m = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
            h = (m + m.conj().T) / 2
            levels = eigenlevels(h)
            oracle = jacobi_eigvalsh(h)
            assert np.abs(levels.energies_mhz - oracle).max() < 1e-9 * np.abs(oracle).max()
            # eigenvector orthonormality and residual
            v = levels.eigenvectors
            assert np.abs(v.conj().T @ v - np.eye(16)).max() < 1e-10
            res = h @ v - v * levels.energies_mhz[None, :]
            assert np.abs(res).max() < 1e-8 * np.linalg.norm(h)


class TestLabeling:
    def test_i0_labels(self):
        sys = SpinSystem(g_tensor=2.0 * np.eye(3), nuclear_spin=0.0)
        b = FieldVector(350.0, 0.0, 0.0)
        levels = label_levels(eigenlevels(build_hamiltonian(sys, b)), sys, b)
        assert levels.labels[0] == (-0.5, 0.0)  # lower level anti-aligned
        assert levels.labels[1] == (+0.5, 0.0)
        assert levels.labeling_reliable

    def test_paper_two_manifolds(self, nd_system, b_hyperfine):
        levels = label_levels(eigenlevels(build_hamiltonian(nd_system, b_hyperfine)),
                              nd_system, b_hyperfine)
        assert levels.labeling_reliable
        low = [lab for lab in levels.labels[:8]]
        high = [lab for lab in levels.labels[8:]]
        assert all(s == -0.5 for s, _ in low)
        assert all(s == +0.5 for s, _ in high)
        assert sorted(m for _, m in low) == [x / 2 for x in range(-7, 8, 2)]
        assert sorted(m for _, m in high) == [x / 2 for x in range(-7, 8, 2)]

    def test_high_field_labels_match_product_overlap(self, nd_system, b_hyperfine):
        b = b_hyperfine.scaled(100.0)
        levels = label_levels(eigenlevels(build_hamiltonian(nd_system, b)),
                              nd_system, b)
        cols, labels = product_basis(nd_system, b.unit())
        ov = np.abs(cols.conj().T @ levels.eigenvectors) ** 2
        for k in range(16):
            assert levels.labels[k] == labels[int(np.argmax(ov[:, k]))]

    def test_requires_field(self, nd_system):
        levels = eigenlevels(build_hamiltonian(nd_system, FieldVector(402.7, -2.24, -66.35)))
        with pytest.raises(ValueError):
            label_levels(levels, nd_system, FieldVector(0.0))
