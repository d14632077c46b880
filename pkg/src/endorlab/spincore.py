"""Coupled electron-nuclear spin Hamiltonian in the crystal frame.

Builds H = (beta/h) B0.g.S + I.A.S on the product basis |mS> x |mI>,
diagonalizes it, assigns (mS, mI) labels by adiabatic continuation from
the high-field limit, and converts 3x3 interaction tensors between matrix
form and principal-value / ZYZ-Euler-angle form.

Frame convention: crystal axes (x, y, z) = (D2, b, D1). Energies in MHz,
fields in mT.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .constants import BETA_OVER_H_MHZ_PER_MT

__all__ = [
    "SpinSystem",
    "FieldVector",
    "PrincipalForm",
    "EnergyLevels",
    "spin_matrices",
    "rotation_zyz",
    "tensor_from_principal",
    "principal_from_tensor",
    "build_hamiltonian",
    "zeeman_unit_hamiltonian",
    "hyperfine_hamiltonian",
    "eigenlevels",
    "label_levels",
    "product_basis",
]


def spin_matrices(s: float) -> np.ndarray:
    """Angular momentum matrices (Sx, Sy, Sz) for spin quantum number s.

    Basis states ordered by descending projection m = s, s-1, ..., -s.
    Returns a complex array of shape (3, 2s+1, 2s+1).
    """
    n = round(2 * s) + 1
    if abs((n - 1) / 2 - s) > 1e-12 or s < 0:
        raise ValueError(f"spin must be a non-negative half-integer, got {s}")
    m = s - np.arange(n)
    sz = np.diag(m).astype(complex)
    # <m+1|S+|m> = sqrt(s(s+1) - m(m+1)); raising connects index k+1 -> k.
    cp = np.sqrt(s * (s + 1) - m[1:] * (m[1:] + 1))
    sp = np.zeros((n, n), dtype=complex)
    sp[np.arange(n - 1), np.arange(1, n)] = cp
    sm = sp.conj().T
    sx = (sp + sm) / 2
    sy = (sp - sm) / 2j
    return np.array([sx, sy, sz])


def _as_tensor(t, name: str) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.shape == (9,):
        t = t.reshape(3, 3)
    if t.shape != (3, 3):
        raise ValueError(f"{name} must be a 3x3 matrix, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError(f"{name} has non-finite entries")
    return t


@dataclass(frozen=True)
class SpinSystem:
    """Electron spin 1/2 coupled to a nuclear spin I.

    g_tensor is dimensionless, a_tensor_mhz in MHz, both 3x3 in the crystal
    frame (D2, b, D1). For nuclear_spin = 0 the hyperfine tensor is ignored.
    """

    g_tensor: np.ndarray
    a_tensor_mhz: np.ndarray | None = None
    nuclear_spin: float = 0.0
    label: str = ""

    electron_spin: float = 0.5  # fixed; kept explicit for clarity

    def __post_init__(self):
        g = _as_tensor(self.g_tensor, "g_tensor")
        object.__setattr__(self, "g_tensor", g)
        if self.electron_spin != 0.5:
            raise ValueError("only electron spin 1/2 is supported")
        i2 = round(2 * self.nuclear_spin)
        if i2 < 0 or abs(i2 / 2 - self.nuclear_spin) > 1e-12:
            raise ValueError(f"nuclear_spin must be a non-negative half-integer, got {self.nuclear_spin}")
        if self.a_tensor_mhz is None:
            if self.nuclear_spin != 0:
                raise ValueError("a_tensor_mhz required when nuclear_spin > 0")
            object.__setattr__(self, "a_tensor_mhz", np.zeros((3, 3)))
        else:
            object.__setattr__(self, "a_tensor_mhz", _as_tensor(self.a_tensor_mhz, "a_tensor_mhz"))

    @property
    def dim(self) -> int:
        """Hilbert space dimension 2(2I+1)."""
        return 2 * (round(2 * self.nuclear_spin) + 1)

    def with_nuclear_spin_zero(self) -> "SpinSystem":
        """Even-isotope variant: same g tensor, I = 0."""
        return SpinSystem(g_tensor=self.g_tensor, a_tensor_mhz=None,
                          nuclear_spin=0.0, label=self.label + " (I=0)")


@dataclass(frozen=True)
class FieldVector:
    """Static field B0: magnitude in mT, spherical orientation in degrees
    with respect to (D2, b, D1): x = sin(theta)cos(phi), y = sin(theta)sin(phi),
    z = cos(theta)."""

    magnitude_mT: float
    theta_deg: float = 0.0
    phi_deg: float = 0.0

    def __post_init__(self):
        if self.magnitude_mT < 0:
            raise ValueError("field magnitude must be >= 0")

    def unit(self) -> np.ndarray:
        th = np.radians(self.theta_deg)
        ph = np.radians(self.phi_deg)
        return np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])

    def vector_mT(self) -> np.ndarray:
        return self.magnitude_mT * self.unit()

    def scaled(self, factor: float) -> "FieldVector":
        return replace(self, magnitude_mT=self.magnitude_mT * factor)


@dataclass
class PrincipalForm:
    """Principal values plus ZYZ Euler angles (alpha, beta, theta) in degrees
    describing the rotation of the principal frame into the crystal frame."""

    values: np.ndarray
    euler_zyz_deg: np.ndarray
    degenerate: bool = False
    asymmetry_norm: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.euler_zyz_deg = np.asarray(self.euler_zyz_deg, dtype=float)


@dataclass
class EnergyLevels:
    """Eigenlevels of the spin Hamiltonian: ascending energies (MHz),
    orthonormal eigenvector columns, optional (mS, mI) labels."""

    energies_mhz: np.ndarray
    eigenvectors: np.ndarray
    labels: list[tuple[float, float]] | None = None
    labeling_reliable: bool = True

    @property
    def n(self) -> int:
        return len(self.energies_mhz)

    def index_of(self, ms: float, mi: float) -> int:
        """Level index carrying label (mS, mI). Requires labels."""
        if self.labels is None:
            raise ValueError("levels are unlabeled; run label_levels first")
        for k, (s, m) in enumerate(self.labels):
            if abs(s - ms) < 1e-9 and abs(m - mi) < 1e-9:
                return k
        raise KeyError(f"no level labeled (mS={ms}, mI={mi})")


# ---------------------------------------------------------------------------
# Euler / principal-axis conversions
# ---------------------------------------------------------------------------

def rotation_zyz(alpha_deg: float, beta_deg: float, theta_deg: float) -> np.ndarray:
    """Active ZYZ rotation R = Rz(alpha) Ry(beta) Rz(theta)."""
    a, b, t = np.radians([alpha_deg, beta_deg, theta_deg])

    def rz(x):
        c, s = np.cos(x), np.sin(x)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def ry(x):
        c, s = np.cos(x), np.sin(x)
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])

    return rz(a) @ ry(b) @ rz(t)


def tensor_from_principal(p: PrincipalForm) -> np.ndarray:
    """Rebuild the crystal-frame tensor R^T diag(values) R from principal form.

    R = Rz(alpha) Ry(beta) Rz(theta) rotates crystal-frame vectors into the
    principal frame (the convention EasySpin uses); the crystal-frame tensor
    is therefore R^T D R. Rebuilding the published Nd:YSO site-I g matrix
    from its principal values and angles reproduces it to print precision
    under this convention.
    """
    r = rotation_zyz(*p.euler_zyz_deg)
    return r.T @ np.diag(p.values) @ r


def principal_from_tensor(t, degeneracy_rtol: float = 1e-6) -> PrincipalForm:
    """Decompose a (nearly) symmetric tensor into principal values and ZYZ angles.

    The tensor is symmetrized as (t + t^T)/2 first; the dropped asymmetric
    part's Frobenius norm is reported. Principal values are sorted by
    descending absolute value. Degenerate eigenvalues leave the angles
    non-unique; the result is then flagged.
    """
    t = _as_tensor(t, "tensor")
    sym = (t + t.T) / 2
    asym = float(np.linalg.norm(t - sym))
    vals, vecs = np.linalg.eigh(sym)
    order = np.argsort(-np.abs(vals), kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]
    if np.linalg.det(vecs) < 0:
        vecs[:, 2] = -vecs[:, 2]
    # sym = V D V^T and tensor = R^T D R, so R = V^T.
    r = vecs.T

    scale = max(np.max(np.abs(vals)), 1e-300)
    gaps = np.abs(np.subtract.outer(vals, vals))[np.triu_indices(3, 1)]
    degenerate = bool(np.any(gaps < degeneracy_rtol * scale))

    # R = Rz(a) Ry(b) Rz(t): beta from R[2,2]; gimbal-locked when sin(beta)=0.
    beta = np.arctan2(np.hypot(r[2, 0], r[2, 1]), r[2, 2])
    if np.sin(beta) > 1e-12:
        alpha = np.arctan2(r[1, 2], r[0, 2])
        theta = np.arctan2(r[2, 1], -r[2, 0])
    elif r[2, 2] > 0:
        alpha = np.arctan2(r[1, 0], r[0, 0])
        theta = 0.0
    else:
        alpha = np.arctan2(-r[1, 0], -r[0, 0])
        theta = 0.0
    angles = np.degrees([alpha, beta, theta])
    return PrincipalForm(values=vals, euler_zyz_deg=angles,
                         degenerate=degenerate, asymmetry_norm=asym)


# ---------------------------------------------------------------------------
# Hamiltonian construction and diagonalization
# ---------------------------------------------------------------------------

def _product_operators(sys: SpinSystem) -> tuple[np.ndarray, np.ndarray]:
    """Electron and nuclear spin operators on the product space.

    Returns (S, I), each of shape (3, dim, dim); I is zero-dimensional
    identity padding when nuclear_spin = 0 (I operators are all-zero 2x2).
    """
    s_ops = spin_matrices(sys.electron_spin)
    ni = round(2 * sys.nuclear_spin) + 1
    eye_n = np.eye(ni)
    s_full = np.stack([np.kron(op, eye_n) for op in s_ops])
    if sys.nuclear_spin == 0:
        i_full = np.zeros_like(s_full)
    else:
        i_ops = spin_matrices(sys.nuclear_spin)
        eye_e = np.eye(2)
        i_full = np.stack([np.kron(eye_e, op) for op in i_ops])
    return s_full, i_full


def zeeman_unit_hamiltonian(sys: SpinSystem, b_unit: np.ndarray) -> np.ndarray:
    """dH/d|B|: electron Zeeman matrix per mT of field along b_unit (MHz/mT)."""
    s_full, _ = _product_operators(sys)
    w = sys.g_tensor.T @ b_unit
    return BETA_OVER_H_MHZ_PER_MT * np.einsum("k,kij->ij", w, s_full)


def hyperfine_hamiltonian(sys: SpinSystem) -> np.ndarray:
    """Field-independent hyperfine term sum_jk I_j A_jk S_k (MHz)."""
    s_full, i_full = _product_operators(sys)
    h = np.zeros((sys.dim, sys.dim), dtype=complex)
    for j in range(3):
        for k in range(3):
            a = sys.a_tensor_mhz[j, k]
            if a != 0.0:
                h += a * (i_full[j] @ s_full[k])
    return h


def build_hamiltonian(sys: SpinSystem, b: FieldVector) -> np.ndarray:
    """Full spin Hamiltonian (MHz) at static field b: Zeeman plus hyperfine."""
    return b.magnitude_mT * zeeman_unit_hamiltonian(sys, b.unit()) + hyperfine_hamiltonian(sys)


def eigenlevels(h: np.ndarray, hermiticity_rtol: float = 1e-9) -> EnergyLevels:
    """Diagonalize a Hermitian matrix into ascending EnergyLevels.

    Rejects input whose anti-Hermitian part exceeds hermiticity_rtol
    relative to the matrix norm.
    """
    h = np.asarray(h, dtype=complex)
    scale = max(np.linalg.norm(h), 1e-300)
    if np.linalg.norm(h - h.conj().T) > hermiticity_rtol * scale:
        raise ValueError("matrix is not Hermitian within tolerance")
    energies, vectors = np.linalg.eigh(h)
    return EnergyLevels(energies_mhz=energies, eigenvectors=vectors)


# ---------------------------------------------------------------------------
# Level labeling by adiabatic continuation
# ---------------------------------------------------------------------------

def _electron_axis(sys: SpinSystem, b_unit: np.ndarray) -> np.ndarray:
    """Effective electron quantization axis: direction of g^T B-hat."""
    w = sys.g_tensor.T @ b_unit
    norm = np.linalg.norm(w)
    if norm < 1e-12:
        raise ValueError("effective g is zero along this orientation")
    return w / norm


def product_basis(sys: SpinSystem, b_unit: np.ndarray):
    """High-field product states and their (mS, mI) labels.

    Electron states quantize along g^T B-hat, with mS = +1/2 the higher
    Zeeman energy. Nuclear states quantize along the common axis A.(g^T B-hat),
    so EPR transitions preserve the mI label between manifolds. Returns
    (columns, labels) with columns of shape (dim, dim).
    """
    w_hat = _electron_axis(sys, b_unit)
    s_ops = spin_matrices(sys.electron_spin)
    ze = np.einsum("k,kij->ij", w_hat, s_ops)
    ev, evec = np.linalg.eigh(ze)  # ascending: index 1 has eigenvalue +1/2
    chi = {-0.5: evec[:, 0], +0.5: evec[:, 1]}

    if sys.nuclear_spin == 0:
        cols = np.stack([chi[-0.5], chi[+0.5]], axis=1)
        return cols, [(-0.5, 0.0), (+0.5, 0.0)]

    d = sys.a_tensor_mhz @ w_hat
    if np.linalg.norm(d) < 1e-9:
        d = np.array([0.0, 0.0, 1.0])  # degenerate ladder; any axis works
    d_hat = d / np.linalg.norm(d)
    i_ops = spin_matrices(sys.nuclear_spin)
    zn = np.einsum("k,kij->ij", d_hat, i_ops)
    nv, nvec = np.linalg.eigh(zn)  # ascending eigenvalues = mI from -I to +I
    mi_values = nv  # equal to -I..+I up to rounding

    cols = []
    labels = []
    for ms in (-0.5, +0.5):
        for mi_idx in range(len(mi_values)):
            cols.append(np.kron(chi[ms], nvec[:, mi_idx]))
            labels.append((ms, float(round(2 * mi_values[mi_idx]) / 2)))
    return np.stack(cols, axis=1), labels


def _match_columns(v_from: np.ndarray, v_to: np.ndarray) -> tuple[np.ndarray, float]:
    """Assign columns of v_to to columns of v_from by maximal overlap.

    Global assignment on the |<from_i|to_j>|^2 matrix; returns (perm, worst)
    where perm[i] is the v_to column matched to v_from column i and worst is
    the smallest matched overlap (probability).
    """
    ov = np.abs(v_from.conj().T @ v_to) ** 2
    row, col = linear_sum_assignment(-ov)
    perm = np.empty(len(row), dtype=int)
    perm[row] = col
    worst = float(ov[row, col].min())
    return perm, worst


def label_levels(levels: EnergyLevels, sys: SpinSystem, b: FieldVector,
                 ramp_factor: float = 1.25, overlap_goal: float = 0.9,
                 max_steps: int = 60, reliable_min: float = 0.5) -> EnergyLevels:
    """Assign (mS, mI) labels by adiabatic continuation from high field.

    The field is scaled up geometrically until every eigenvector has dominant
    overlap > overlap_goal with a high-field product state; labels are
    assigned there and tracked back down by maximal successive overlap.
    If any tracking step's worst overlap drops below reliable_min the
    labeling is flagged unreliable.
    """
    if b.magnitude_mT <= 0:
        raise ValueError("labeling requires |B| > 0")
    b_unit = b.unit()
    prod_cols, prod_labels = product_basis(sys, b_unit)

    h_zee = zeeman_unit_hamiltonian(sys, b_unit)
    h_hf = hyperfine_hamiltonian(sys)

    # Ramp up until the spectrum factorizes onto the product basis.
    fields = [b.magnitude_mT]
    vecs = [levels.eigenvectors]
    reliable = True
    for _ in range(max_steps):
        ov = np.abs(prod_cols.conj().T @ vecs[-1]) ** 2
        if ov.max(axis=0).min() > overlap_goal:
            break
        fields.append(fields[-1] * ramp_factor)
        _, v = np.linalg.eigh(fields[-1] * h_zee + h_hf)
        vecs.append(v)
    top_perm, worst = _match_columns(prod_cols, vecs[-1])
    if worst < reliable_min:
        reliable = False

    # labels_at[k] = label of eigenvector column k at the topmost field
    labels_at = [None] * levels.n
    for prod_idx, col_idx in enumerate(top_perm):
        labels_at[col_idx] = prod_labels[prod_idx]

    # Walk back down, carrying labels by successive overlap.
    for step in range(len(vecs) - 1, 0, -1):
        perm, worst = _match_columns(vecs[step], vecs[step - 1])
        if worst < reliable_min:
            reliable = False
        new_labels = [None] * levels.n
        for hi_idx, lo_idx in enumerate(perm):
            new_labels[lo_idx] = labels_at[hi_idx]
        labels_at = new_labels

    return EnergyLevels(energies_mhz=levels.energies_mhz,
                        eigenvectors=levels.eigenvectors,
                        labels=labels_at, labeling_reliable=reliable)
