"""Reconstruction of g and hyperfine tensors from angular-variation EPR data.

The objective is assignment-free: for each crystal orientation the
resonance fields of both magnetic classes are merged and sorted, paired
with the sorted experimental fields by index, and the mean squared field
deviation is minimized. No line-to-transition assignment is ever made, so
the two C2-related classes (and the overall sign of g, which leaves the
spectrum invariant) are gauge freedoms of the fit; see gauge_equivalents.

The fit itself is a two-stage search: seeded multi-start sampling of
symmetric tensor candidates, then damped least-squares refinement of the
best starts with an analytic Jacobian obtained from the Hellmann-Feynman
derivatives of each resonance field.
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass

import numpy as np

from .constants import BETA_OVER_H_MHZ_PER_MT
from .spincore import SpinSystem, spin_matrices
from .spectra import c2_partner, resonance_fields

__all__ = [
    "PLANES",
    "plane_orientation",
    "RoadmapRecord",
    "Roadmap",
    "FitParams",
    "FitResult",
    "sym_from_six",
    "six_from_sym",
    "gauge_equivalents",
    "gauge_distance",
    "objective",
    "residual_vector",
    "fit",
    "residual_report",
    "synthesize_roadmap",
]

PLANES = ("bD1", "D1D2", "bD2")

MT_TO_GAUSS = 10.0


def plane_orientation(plane: str, angle_deg: float) -> np.ndarray:
    """Unit field direction at a rotation angle within a crystal plane.

    Angles run from the first named axis toward the second:
    bD1 from b to D1, D1D2 from D1 to D2, bD2 from b to D2, in the
    (D2, b, D1) frame.
    """
    a = np.radians(angle_deg)
    c, s = np.cos(a), np.sin(a)
    if plane == "bD1":
        return np.array([0.0, c, s])
    if plane == "D1D2":
        return np.array([s, 0.0, c])
    if plane == "bD2":
        return np.array([s, c, 0.0])
    raise ValueError(f"unknown plane {plane!r}; expected one of {PLANES}")


@dataclass
class RoadmapRecord:
    plane: str
    angle_deg: float
    fields_mT: np.ndarray

    def __post_init__(self):
        self.fields_mT = np.asarray(self.fields_mT, dtype=float)
        if np.any(np.diff(self.fields_mT) <= 0):
            raise ValueError("fields_mT must be strictly ascending")
        if not 0.0 <= self.angle_deg < 180.0:
            raise ValueError("angle_deg must lie in [0, 180)")
        if self.plane not in PLANES:
            raise ValueError(f"unknown plane {self.plane!r}")


@dataclass
class Roadmap:
    """Angular-variation peak dataset for tensor fitting."""

    records: list
    f_mw_GHz: float
    window_mT: tuple[float, float]
    nuclear_spin: float = 3.5

    @property
    def n_points(self) -> int:
        return sum(len(r.fields_mT) for r in self.records)


@dataclass
class FitParams:
    """Symmetric-tensor parameterization: upper triangles in the order
    (xx, xy, xz, yy, yz, zz), plus optional per-plane angle offsets."""

    g_sym: np.ndarray
    a_sym_mhz: np.ndarray
    plane_offsets_deg: dict | None = None

    def __post_init__(self):
        self.g_sym = np.asarray(self.g_sym, dtype=float)
        self.a_sym_mhz = np.asarray(self.a_sym_mhz, dtype=float)
        if self.g_sym.shape != (6,) or self.a_sym_mhz.shape != (6,):
            raise ValueError("g_sym and a_sym_mhz must be length-6 vectors")
        if self.plane_offsets_deg:
            for p, off in self.plane_offsets_deg.items():
                if abs(off) > 5.0:
                    raise ValueError(f"plane offset {p}={off} exceeds +-5 degrees")

    @property
    def g_tensor(self) -> np.ndarray:
        return sym_from_six(self.g_sym)

    @property
    def a_tensor_mhz(self) -> np.ndarray:
        return sym_from_six(self.a_sym_mhz)

    def offset(self, plane: str) -> float:
        return (self.plane_offsets_deg or {}).get(plane, 0.0)


def sym_from_six(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.array([[v[0], v[1], v[2]],
                     [v[1], v[3], v[4]],
                     [v[2], v[4], v[5]]])


def six_from_sym(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    m = (m + m.T) / 2
    return np.array([m[0, 0], m[0, 1], m[0, 2], m[1, 1], m[1, 2], m[2, 2]])


def gauge_equivalents(g: np.ndarray, a: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tensor pairs producing identical spectra at every field.

    Three exact invariances: the C2 class swap (joint conjugation by
    diag(-1, 1, -1)), the overall sign of g (time reversal flips both spin
    operators), and even sign flips of the hyperfine principal values
    (pi rotations of the nuclear frame). Field-swept data cannot
    distinguish members of this 16-element family.
    """
    c = np.diag([-1.0, 1.0, -1.0])
    lam, v = np.linalg.eigh((a + a.T) / 2)
    a_variants = [v @ np.diag(np.array(s) * lam) @ v.T
                  for s in ((1, 1, 1), (-1, -1, 1), (-1, 1, -1), (1, -1, -1))]
    out = []
    for gg in (g, -g):
        for aa in a_variants:
            out.append((gg, aa))
            out.append((c @ gg @ c, c @ aa @ c))
    return out


def gauge_distance(g1, a1, g2, a2) -> float:
    """Smallest max-entry relative deviation between (g1, a1) and any gauge
    equivalent of (g2, a2); scales g by max |g| and A by max |A|."""
    gs = max(np.max(np.abs(g2)), 1e-300)
    as_ = max(np.max(np.abs(a2)), 1e-300)
    best = np.inf
    for gg, aa in gauge_equivalents(g2, a2):
        d = max(np.max(np.abs(g1 - gg)) / gs, np.max(np.abs(a1 - aa)) / as_)
        best = min(best, d)
    return best


# ---------------------------------------------------------------------------
# Fast per-class resonance solver (rank-pair selection)
# ---------------------------------------------------------------------------

@dataclass
class _ScanConfig:
    grid_mT: float = 1.5
    bisect_iters: int = 6
    margin_mhz: float = 350.0
    gap_mT: float = 25.0  # unmatched-point cost of the aligned pairing mode


def _operator_stacks(nuclear_spin: float):
    """Spin-operator blocks for the Hamiltonian and its parameter derivatives."""
    s_ops = spin_matrices(0.5)
    ni = round(2 * nuclear_spin) + 1
    eye_n = np.eye(ni)
    s_full = np.stack([np.kron(op, eye_n) for op in s_ops])
    if nuclear_spin == 0:
        i_full = np.zeros_like(s_full)
    else:
        i_ops = spin_matrices(nuclear_spin)
        i_full = np.stack([np.kron(np.eye(2), op) for op in i_ops])
    # d H_hf / d a_sym[k]: I_a S_b + I_b S_a off-diagonal, I_a S_a diagonal
    pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
    da = []
    for (a_, b_) in pairs:
        op = i_full[a_] @ s_full[b_]
        if a_ != b_:
            op = op + i_full[b_] @ s_full[a_]
        da.append(op)
    return s_full, i_full, np.stack(da), pairs


class _ClassSolver:
    """Resonance fields of one magnetic class for the sorted-field objective.

    Same physics as spectra.resonance_fields with rank pairing: sign-change
    scan over all level pairs, vectorized bisection, transition moments at
    the roots, and the relative moment threshold. The eigenvectors computed
    for the moments also provide the Hellmann-Feynman derivatives of each
    resonance field used by the fit Jacobian.
    """

    def __init__(self, nuclear_spin: float, moment_threshold: float = 0.02):
        self.nuclear_spin = nuclear_spin
        self.moment_threshold = moment_threshold
        self.s_full, self.i_full, self.da_stack, self.pairs = _operator_stacks(nuclear_spin)
        self.n = self.s_full.shape[1]
        n = self.n
        self.iu, self.ju = np.triu_indices(n, 1)

    def hamiltonian_parts(self, g, a, b_unit):
        w = g.T @ b_unit
        h1 = BETA_OVER_H_MHZ_PER_MT * np.einsum("k,kij->ij", w, self.s_full)
        h0 = np.einsum("jk,jab,kbc->ac", a, self.i_full, self.s_full) \
            if self.nuclear_spin else np.zeros_like(h1)
        return h0, h1

    def band(self, g, a, b_unit, f_mw_mhz, window, margin_mhz):
        g_eff = float(np.linalg.norm(g.T @ b_unit))
        if g_eff < 1e-9:
            return None
        denom = BETA_OVER_H_MHZ_PER_MT * g_eff
        center = f_mw_mhz / denom
        spread = self.nuclear_spin * float(np.linalg.norm(a @ (g.T @ b_unit))) / g_eff
        half = (1.6 * spread + margin_mhz) / denom
        lo, hi = max(window[0], center - half), min(window[1], center + half)
        return (lo, hi) if lo < hi else None

    def _drive_operator(self, g, b_unit):
        b1 = np.array([0.0, 1.0, 0.0])
        perp = b1 - (b1 @ b_unit) * b_unit
        if np.linalg.norm(perp) < 1e-8:
            b1 = np.array([0.0, 0.0, 1.0])
            perp = b1 - (b1 @ b_unit) * b_unit
        perp = perp / np.linalg.norm(perp)
        return np.einsum("j,jk,kab->ab", perp, g, self.s_full)

    def resonances(self, g, a, b_unit, f_mw_mhz, window, scan: _ScanConfig):
        """Moment-thresholded resonance fields, sorted ascending.

        Returns (fields, lo_rank, hi_rank, eigvecs) with eigvecs[k] the full
        eigenvector frame at the k-th root field.
        """
        empty = (np.empty(0), np.empty(0, dtype=int), np.empty(0, dtype=int), None)
        seg = self.band(g, a, b_unit, f_mw_mhz, window, scan.margin_mhz)
        if seg is None:
            return empty
        h0, h1 = self.hamiltonian_parts(g, a, b_unit)
        grid = np.arange(seg[0], seg[1] + scan.grid_mT, scan.grid_mT)
        grid[-1] = min(grid[-1], window[1])
        if len(grid) < 2:
            return empty

        evals = np.linalg.eigvalsh(h0[None] + grid[:, None, None] * h1[None])
        gaps = evals[:, self.ju] - evals[:, self.iu] - f_mw_mhz  # (nB, npairs)
        sgn = np.sign(gaps)
        flip_rows, flip_pairs = np.nonzero((sgn[:-1] * sgn[1:]) < 0)
        if len(flip_rows) == 0:
            return empty
        lo = grid[flip_rows]
        hi = grid[flip_rows + 1]
        flo = gaps[flip_rows, flip_pairs]
        ilo = self.iu[flip_pairs]
        ihi = self.ju[flip_pairs]

        rng_idx = np.arange(len(lo))
        for _ in range(scan.bisect_iters):
            mid = 0.5 * (lo + hi)
            ev = np.linalg.eigvalsh(h0[None] + mid[:, None, None] * h1[None])
            fm = ev[rng_idx, ihi] - ev[rng_idx, ilo] - f_mw_mhz
            take_hi = flo * fm <= 0
            hi = np.where(take_hi, mid, hi)
            lo = np.where(take_hi, lo, mid)
            flo = np.where(take_hi, flo, fm)
        roots = 0.5 * (lo + hi)

        ev, vecs = np.linalg.eigh(h0[None] + roots[:, None, None] * h1[None])
        v_lo = np.take_along_axis(vecs, ilo[:, None, None], axis=2)[:, :, 0]
        v_hi = np.take_along_axis(vecs, ihi[:, None, None], axis=2)[:, :, 0]

        # one Newton correction from the Hellmann-Feynman slope removes the
        # residual bisection quantization (second-order small afterwards)
        f_here = ev[rng_idx, ihi] - ev[rng_idx, ilo] - f_mw_mhz
        t_lo = np.einsum("ab,rb->ra", h1, v_lo)
        t_hi = np.einsum("ab,rb->ra", h1, v_hi)
        slope = np.real(np.einsum("ra,ra->r", v_hi.conj(), t_hi)
                        - np.einsum("ra,ra->r", v_lo.conj(), t_lo))
        slope = np.where(np.abs(slope) < 1e-12, 1e-12, slope)
        roots = np.clip(roots - f_here / slope, lo - scan.grid_mT, hi + scan.grid_mT)

        drive = self._drive_operator(g, b_unit)
        amp = np.einsum("ra,ab,rb->r", v_lo.conj(), drive, v_hi)
        moments = np.abs(amp) ** 2
        keep = moments >= self.moment_threshold * max(moments.max(), 1e-300)

        roots, ilo, ihi, vecs = roots[keep], ilo[keep], ihi[keep], vecs[keep]
        order = np.argsort(roots)
        return roots[order], ilo[order], ihi[order], vecs[order]

    def field_derivatives(self, g, a, b_unit, roots, ilo, ihi, vecs):
        """d(B_root)/d(theta) for theta = 6 g entries then 6 A entries.

        Implicit differentiation of f_ij(B, theta) = f_mw using
        Hellmann-Feynman derivatives of the two level energies.
        """
        if len(roots) == 0:
            return np.empty((0, 12))
        v_lo = np.take_along_axis(vecs, ilo[:, None, None], axis=2)[:, :, 0]
        v_hi = np.take_along_axis(vecs, ihi[:, None, None], axis=2)[:, :, 0]

        # operator stack: d H / d g_sym[k] (per unit field; multiply by B later)
        dg_ops = []
        for (a_, b_) in self.pairs:
            op = b_unit[a_] * self.s_full[b_]
            if a_ != b_:
                op = op + b_unit[b_] * self.s_full[a_]
            dg_ops.append(BETA_OVER_H_MHZ_PER_MT * op)
        ops = np.concatenate([np.stack(dg_ops), self.da_stack], axis=0)  # (12, n, n)

        def expect(v):
            t = np.einsum("oab,rb->roa", ops, v)
            return np.real(np.einsum("ra,roa->ro", v.conj(), t))

        df_dtheta = expect(v_hi) - expect(v_lo)  # (nroots, 12)
        df_dtheta[:, :6] *= roots[:, None]  # Zeeman derivative scales with B

        w = g.T @ b_unit
        h1 = BETA_OVER_H_MHZ_PER_MT * np.einsum("k,kij->ij", w, self.s_full)
        t_lo = np.einsum("ab,rb->ra", h1, v_lo)
        t_hi = np.einsum("ab,rb->ra", h1, v_hi)
        df_db = np.real(np.einsum("ra,ra->r", v_hi.conj(), t_hi)
                        - np.einsum("ra,ra->r", v_lo.conj(), t_lo))
        df_db = np.where(np.abs(df_db) < 1e-12, 1e-12, df_db)
        return -df_dtheta / df_db[:, None]


# ---------------------------------------------------------------------------
# Objective and residuals
# ---------------------------------------------------------------------------

def _record_orientation(rec: RoadmapRecord, params: FitParams) -> np.ndarray:
    return plane_orientation(rec.plane, rec.angle_deg + params.offset(rec.plane))


def _merged_resonances(params: FitParams, rec: RoadmapRecord, roadmap: Roadmap,
                       solver: _ClassSolver, scan: _ScanConfig):
    """Both-class resonance solution for one record.

    Returns list of (class_tag, roots, lo_rank, hi_rank, vecs), class_tag 0/1.
    """
    g, a = params.g_tensor, params.a_tensor_mhz
    c = np.diag([-1.0, 1.0, -1.0])
    b_unit = _record_orientation(rec, params)
    f_mw = roadmap.f_mw_GHz * 1000.0
    out = []
    for tag, (gg, aa) in enumerate([(g, a), (c @ g @ c, c @ a @ c)]):
        roots, ilo, ihi, vecs = solver.resonances(gg, aa, b_unit, f_mw,
                                                  roadmap.window_mT, scan)
        out.append((tag, roots, ilo, ihi, vecs))
    return out


def _align_sequences(exp: np.ndarray, sim: np.ndarray, gap: float):
    """Minimal-cost order-preserving alignment of two ascending sequences.

    Skipping a point on either side costs gap^2. Returns (match, n_free_sim)
    where match[i] is the sim index paired with exp point i (-1 for a gap).
    When both sequences have equal length and all deviations are below the
    gap cost this reduces to plain index pairing.
    """
    m, n = len(exp), len(sim)
    g2 = gap * gap
    d = np.full((m + 1, n + 1), np.inf)
    d[0, :] = np.arange(n + 1) * g2
    d[:, 0] = np.arange(m + 1) * g2
    choice = np.zeros((m + 1, n + 1), dtype=np.int8)
    for i in range(1, m + 1):
        cost_row = (exp[i - 1] - sim) ** 2
        drow = d[i]
        dprev = d[i - 1]
        for j in range(1, n + 1):
            best = dprev[j - 1] + cost_row[j - 1]
            ch = 0
            alt = dprev[j] + g2
            if alt < best:
                best, ch = alt, 1  # leave the experimental point unmatched
            alt = drow[j - 1] + g2
            if alt < best:
                best, ch = alt, 2  # leave the simulated point unmatched
            drow[j] = best
            choice[i, j] = ch
    match = np.full(m, -1, dtype=int)
    i, j = m, n
    while i > 0 and j > 0:
        ch = choice[i, j]
        if ch == 0:
            match[i - 1] = j - 1
            i -= 1
            j -= 1
        elif ch == 1:
            i -= 1
        else:
            j -= 1
    n_matched = int(np.count_nonzero(match >= 0))
    return match, n - n_matched


def residual_vector(params: FitParams, roadmap: Roadmap,
                    scan: _ScanConfig | None = None, solver: _ClassSolver | None = None,
                    with_jacobian: bool = False, record_indices=None,
                    mode: str = "sorted"):
    """Per-point field residuals (mT) for the roadmap.

    mode='sorted' is the assignment-free objective: per record the merged
    simulated fields are sorted and paired with the experimental fields by
    index; each unpaired point on either side contributes a penalty residual
    of twice the window width. mode='nearest' replaces index pairing with
    nearest-peak pairing (each experimental point against the closest
    simulated one, plus one excess slot collecting the distances of
    simulated peaks to their closest experimental point); it has no count
    cliffs and pre-aligns candidates from arbitrary starts. mode='aligned'
    pairs by a minimal-cost order-preserving alignment with a moderate gap
    cost (scan.gap_mT), which equals index pairing once counts match but
    stays traversable when borderline lines cross the moment threshold.
    mode='mean' compares each record's mean simulated field with the mean
    experimental field (one residual per record): multiplet centers depend
    almost exclusively on g, so this mode steers the g components from far
    away. All modes except 'mean' emit a fixed vector layout (n_exp entries
    plus one slot per record); 'mean' emits two entries per record. With
    with_jacobian=True the analytic Jacobian is returned alongside.
    """
    if mode not in ("sorted", "nearest", "aligned", "mean"):
        raise ValueError("mode must be 'sorted', 'nearest', 'aligned' or 'mean'")
    scan = scan or _ScanConfig()
    solver = solver or _ClassSolver(roadmap.nuclear_spin)
    penalty = 2.0 * (roadmap.window_mT[1] - roadmap.window_mT[0])
    records = roadmap.records if record_indices is None else [roadmap.records[k] for k in record_indices]

    res_blocks, jac_blocks = [], []
    n_failed = 0
    for rec in records:
        n_exp = len(rec.fields_mT) if mode != "mean" else 1
        exp = rec.fields_mT
        try:
            per_class = _merged_resonances(params, rec, roadmap, solver, scan)
        except np.linalg.LinAlgError:
            n_failed += 1
            res_blocks.append(np.full(n_exp + 1, penalty))
            if with_jacobian:
                jac_blocks.append(np.zeros((n_exp + 1, 12)))
            continue

        fields = np.concatenate([roots for (_, roots, _, _, _) in per_class])
        order = np.argsort(fields)
        fields = fields[order]
        n_sim = len(fields)

        r = np.zeros(n_exp + 1)
        jb = np.zeros((n_exp + 1, 12)) if with_jacobian else None

        if with_jacobian:
            g, a = params.g_tensor, params.a_tensor_mhz
            c = np.diag([-1.0, 1.0, -1.0])
            b_unit = _record_orientation(rec, params)
            derivs = []
            for tag, roots, ilo, ihi, vecs in per_class:
                gg, aa = (g, a) if tag == 0 else (c @ g @ c, c @ a @ c)
                d = solver.field_derivatives(gg, aa, b_unit, roots, ilo, ihi, vecs)
                if tag == 1 and len(d):
                    # chain rule through the C2 conjugation: off-diagonal xy
                    # and yz entries flip sign, the rest are unchanged
                    flip = np.array([1, -1, 1, 1, -1, 1], dtype=float)
                    d = d * np.concatenate([flip, flip])[None, :]
                derivs.append(d)
            dmat = np.concatenate(derivs, axis=0) if derivs else np.empty((0, 12))
            dmat = dmat[order]

        if n_sim == 0:
            r[:n_exp] = penalty
            res_blocks.append(r)
            if with_jacobian:
                jac_blocks.append(jb)
            continue

        if mode == "sorted":
            n_pair = min(n_sim, n_exp)
            r[:n_pair] = fields[:n_pair] - exp[:n_pair]
            if n_sim < n_exp:
                r[n_pair:n_exp] = penalty
            r[n_exp] = penalty * np.sqrt(max(n_sim - n_exp, 0))
            if with_jacobian:
                jb[:n_pair] = dmat[:n_pair]
        elif mode == "aligned":
            match, n_free_sim = _align_sequences(exp, fields, scan.gap_mT)
            hit = match >= 0
            r[:n_exp][hit] = fields[match[hit]] - exp[hit]
            r[:n_exp][~hit] = scan.gap_mT
            r[n_exp] = scan.gap_mT * np.sqrt(n_free_sim)
            if with_jacobian:
                jb[:n_exp][hit] = dmat[match[hit]]
        elif mode == "mean":
            r[0] = fields.mean() - exp.mean()
            if with_jacobian:
                jb[0] = dmat.mean(axis=0)
        else:
            nearest = np.abs(exp[:, None] - fields[None, :]).argmin(axis=1)
            r[:n_exp] = fields[nearest] - exp
            back = np.abs(fields[:, None] - exp[None, :]).argmin(axis=1)
            d_extra = fields - exp[back]
            s_extra = float(np.sum(d_extra ** 2))
            r[n_exp] = np.sqrt(s_extra)
            if with_jacobian:
                jb[:n_exp] = dmat[nearest]
                if s_extra > 1e-30:
                    jb[n_exp] = (d_extra @ dmat) / np.sqrt(s_extra)

        res_blocks.append(r)
        if with_jacobian:
            jac_blocks.append(jb)

    r = np.concatenate(res_blocks) if res_blocks else np.empty(0)
    info = {"n_failed_records": n_failed, "n_records": len(records)}
    if with_jacobian:
        return r, np.concatenate(jac_blocks, axis=0), info
    return r, info


def objective(params: FitParams, roadmap: Roadmap, scan: _ScanConfig | None = None,
              solver: _ClassSolver | None = None, record_indices=None,
              mode: str = "sorted") -> float:
    """Mean squared sorted-field deviation (mT^2) including penalties."""
    r, _ = residual_vector(params, roadmap, scan, solver, record_indices=record_indices,
                           mode=mode)
    n_points = sum(len(roadmap.records[k].fields_mT) for k in
                   (record_indices if record_indices is not None else range(len(roadmap.records))))
    return float(np.sum(r ** 2) / max(n_points, 1))


# ---------------------------------------------------------------------------
# Damped least-squares refinement
# ---------------------------------------------------------------------------

def _levenberg_marquardt(x0, fun, jac, max_iterations=200, step_tol=1e-6):
    """Classic damped least squares with Marquardt diagonal scaling.

    fun(x) -> residuals, jac(x) -> jacobian; rejected trial steps only cost
    a residual evaluation. Stops when the step norm (relative to the
    parameter scale) falls below step_tol or on the iteration cap.
    """
    x = x0.copy()
    r = fun(x)
    j = jac(x)
    cost = 0.5 * float(r @ r)
    lam = 1e-3
    n_iter = 0
    for n_iter in range(1, max_iterations + 1):
        jtj = j.T @ j
        g_vec = j.T @ r
        d = np.sqrt(np.clip(np.diag(jtj), 1e-12, None))
        accepted = False
        for _ in range(16):
            try:
                step = np.linalg.solve(jtj + lam * np.diag(d ** 2), -g_vec)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            x_new = x + step
            r_new = fun(x_new)
            cost_new = 0.5 * float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                x, r, cost = x_new, r_new, cost_new
                j = jac(x)
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 10
        if not accepted:
            return x, cost, n_iter, True
        rel_step = np.linalg.norm(step / np.maximum(np.abs(x), 1.0))
        if rel_step < step_tol:
            return x, cost, n_iter, True
    return x, cost, n_iter, False


# ---------------------------------------------------------------------------
# Multi-start fit
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    params: FitParams
    objective_mT2: float
    residual_gauss: float
    n_points: int
    iterations: int
    converged: bool
    n_starts: int = 1
    n_unmatched: int = 0
    start_objectives: np.ndarray | None = None
    failed_record_fraction: float = 0.0

    @property
    def g_tensor(self):
        return self.params.g_tensor

    @property
    def a_tensor_mhz(self):
        return self.params.a_tensor_mhz


def _random_symmetric(rng, value_range, n=3):
    """Random symmetric 3x3 with principal magnitudes in value_range and a
    Haar-random principal frame."""
    vals = rng.uniform(value_range[0], value_range[1], size=n) * rng.choice([-1.0, 1.0], size=n)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q @ np.diag(vals) @ q.T


def _sample_start(rng, g_range, a_range) -> FitParams:
    return FitParams(g_sym=six_from_sym(_random_symmetric(rng, g_range)),
                     a_sym_mhz=six_from_sym(_random_symmetric(rng, a_range)))


_POOL_CTX = {}


def _pool_init(roadmap, scan):
    _POOL_CTX["roadmap"] = roadmap
    _POOL_CTX["scan"] = scan
    _POOL_CTX["solver"] = _ClassSolver(roadmap.nuclear_spin)


def _pool_objective(x):
    params = FitParams(g_sym=x[:6], a_sym_mhz=x[6:12])
    return objective(params, _POOL_CTX["roadmap"], _POOL_CTX["scan"], _POOL_CTX["solver"],
                     mode="nearest")


def _pool_refine(args):
    x0, max_iterations = args
    return _refine(x0, _POOL_CTX["roadmap"], _POOL_CTX["scan"], _POOL_CTX["solver"],
                   max_iterations)


def _refine(x0, roadmap, scan, solver, max_iterations):
    """Two-phase local refinement: nearest-peak pre-alignment, then the
    sorted-index objective polish."""
    def make_pair(mode):
        def fun(x):
            params = FitParams(g_sym=x[:6], a_sym_mhz=x[6:12])
            r, _ = residual_vector(params, roadmap, scan, solver, mode=mode)
            return r

        def jac(x):
            params = FitParams(g_sym=x[:6], a_sym_mhz=x[6:12])
            _, j, _ = residual_vector(params, roadmap, scan, solver,
                                      with_jacobian=True, mode=mode)
            return j
        return fun, jac

    x0 = np.asarray(x0, dtype=float)
    fun_a, jac_a = make_pair("nearest")
    xa, _, n_a, _ = _levenberg_marquardt(x0, fun_a, jac_a,
                                         max_iterations=max_iterations)
    fun_b, jac_b = make_pair("aligned")
    xb, cost, n_b, conv = _levenberg_marquardt(xa, fun_b, jac_b,
                                               max_iterations=max_iterations)
    return xb, cost, n_a + n_b, conv


def fit(roadmap: Roadmap, init: FitParams | None = None, n_starts: int = 64,
        seed: int = 0, refine_top: int = 4, threads: int = 1,
        g_range=(0.3, 5.0), a_range=(50.0, 1500.0), max_iterations: int = 200,
        scan: _ScanConfig | None = None) -> FitResult:
    """Fit (g, A) to a roadmap by multi-start damped least squares.

    With an explicit init the two sampling stages are skipped and the init
    is refined directly. Otherwise n_starts random symmetric tensor pairs
    (principal magnitudes within g_range / a_range, Haar-random frames) are
    ranked by objective and the refine_top best are polished; the lowest
    final objective wins. Deterministic for a fixed seed and independent of
    the thread count.
    """
    if len(roadmap.records) < 12:
        raise ValueError("need at least 12 roadmap records to constrain 12 parameters")
    scan = scan or _ScanConfig()
    solver = _ClassSolver(roadmap.nuclear_spin)

    if init is not None:
        starts = [np.concatenate([init.g_sym, init.a_sym_mhz])]
        start_objs = np.array([objective(FitParams(s[:6], s[6:12]), roadmap, scan,
                                         solver, mode="nearest") for s in starts])
        top = [0]
    else:
        rng = np.random.default_rng(seed)
        samples = [_sample_start(rng, g_range, a_range) for _ in range(n_starts)]
        starts = [np.concatenate([p.g_sym, p.a_sym_mhz]) for p in samples]
        if threads > 1:
            with multiprocessing.get_context("fork").Pool(
                    threads, initializer=_pool_init, initargs=(roadmap, scan)) as pool:
                start_objs = np.array(pool.map(_pool_objective, starts))
        else:
            start_objs = np.array([objective(FitParams(s[:6], s[6:12]), roadmap, scan,
                                             solver, mode="nearest") for s in starts])
        top = list(np.argsort(start_objs, kind="stable")[:max(refine_top, 1)])

    jobs = [(starts[k], max_iterations) for k in top]
    if threads > 1 and len(jobs) > 1:
        with multiprocessing.get_context("fork").Pool(
                min(threads, len(jobs)), initializer=_pool_init,
                initargs=(roadmap, scan)) as pool:
            refined = pool.map(_pool_refine, jobs)
    else:
        refined = [_refine(x0, roadmap, scan, solver, mi) for (x0, mi) in jobs]

    best_idx = int(np.argmin([c for (_, c, _, _) in refined]))
    x_best, _, n_iter, converged = refined[best_idx]
    best_params = FitParams(g_sym=x_best[:6], a_sym_mhz=x_best[6:12])

    x_start_best = starts[top[best_idx]]
    obj_coarse = objective(best_params, roadmap, scan, solver)
    obj_at_start = objective(FitParams(x_start_best[:6], x_start_best[6:12]),
                             roadmap, scan, solver)
    improved = obj_coarse <= obj_at_start + 1e-12

    # Final evaluation at reference accuracy for the reported residual.
    fine = _ScanConfig(grid_mT=min(scan.grid_mT, 1.0), bisect_iters=20,
                       margin_mhz=scan.margin_mhz)
    devs, n_unmatched, failed_fraction = _matched_deviations(best_params, roadmap, fine, solver)
    residual_gauss = float(np.mean(np.abs(devs)) * MT_TO_GAUSS) if len(devs) else np.inf

    return FitResult(params=best_params,
                     objective_mT2=objective(best_params, roadmap, fine, solver),
                     residual_gauss=residual_gauss,
                     n_points=roadmap.n_points,
                     n_unmatched=n_unmatched,
                     iterations=n_iter,
                     converged=bool(converged and improved),
                     n_starts=len(starts),
                     start_objectives=start_objs,
                     failed_record_fraction=failed_fraction)


def _matched_deviations(params: FitParams, roadmap: Roadmap,
                        scan: _ScanConfig, solver: _ClassSolver):
    """Per-point simulated-minus-experimental deviations over matched points."""
    devs = []
    n_unmatched = 0
    n_failed = 0
    for rec in roadmap.records:
        try:
            per_class = _merged_resonances(params, rec, roadmap, solver, scan)
        except np.linalg.LinAlgError:
            n_failed += 1
            n_unmatched += len(rec.fields_mT)
            continue
        sim = np.sort(np.concatenate([roots for (_, roots, _, _, _) in per_class]))
        n_pair = min(len(sim), len(rec.fields_mT))
        devs.append(sim[:n_pair] - rec.fields_mT[:n_pair])
        n_unmatched += abs(len(sim) - len(rec.fields_mT))
    out = np.concatenate(devs) if devs else np.empty(0)
    return out, n_unmatched, n_failed / max(len(roadmap.records), 1)


# ---------------------------------------------------------------------------
# Reporting and synthesis
# ---------------------------------------------------------------------------

def residual_report(result: FitResult, roadmap: Roadmap,
                    scan: _ScanConfig | None = None) -> list[dict]:
    """Per-record table of simulated vs experimental sorted fields."""
    scan = scan or _ScanConfig(grid_mT=1.0, bisect_iters=20)
    solver = _ClassSolver(roadmap.nuclear_spin)
    rows = []
    for rec in roadmap.records:
        per_class = _merged_resonances(result.params, rec, roadmap, solver, scan)
        sim = np.sort(np.concatenate([roots for (_, roots, _, _, _) in per_class]))
        n_pair = min(len(sim), len(rec.fields_mT))
        dev = sim[:n_pair] - rec.fields_mT[:n_pair]
        rows.append({
            "plane": rec.plane,
            "angle_deg": rec.angle_deg,
            "fields_exp_mT": rec.fields_mT.copy(),
            "fields_sim_mT": sim,
            "deviation_gauss": dev * MT_TO_GAUSS,
            "n_unmatched": abs(len(sim) - len(rec.fields_mT)),
        })
    return rows


def synthesize_roadmap(g_tensor, a_tensor_mhz, f_mw_GHz: float,
                       window_mT: tuple[float, float],
                       planes=PLANES, angles_deg=None,
                       noise_mT: float = 0.0, seed: int = 0,
                       nuclear_spin: float = 3.5) -> Roadmap:
    """Generate a synthetic roadmap from reference tensors.

    Uses the reference resonance solver (moment-thresholded, tracked) for
    both C2 classes, merges and sorts each record, and optionally adds
    i.i.d. gaussian field noise; re-sorts after adding noise so records stay
    valid. Duplicate-free angles on three planes make the 12 tensor
    parameters overdetermined.
    """
    if angles_deg is None:
        angles_deg = np.arange(0.0, 180.0, 5.0)
    rng = np.random.default_rng(seed)
    sys1 = SpinSystem(g_tensor, a_tensor_mhz if nuclear_spin else None,
                      nuclear_spin, "synthetic")
    sys2 = c2_partner(sys1)
    records = []
    for plane in planes:
        for ang in angles_deg:
            b_unit = plane_orientation(plane, float(ang))
            fields = []
            for s in (sys1, sys2):
                pks = resonance_fields(s, _UnitOrientation(b_unit), f_mw_GHz, window_mT)
                fields.extend(pk.field_mT for pk in pks)
            if not fields:
                continue
            fields = np.sort(np.asarray(fields))
            if noise_mT > 0:
                fields = np.sort(fields + rng.normal(0.0, noise_mT, size=len(fields)))
            # strictly ascending for the record contract
            eps = 1e-9 * np.arange(len(fields))
            records.append(RoadmapRecord(plane=plane, angle_deg=float(ang),
                                         fields_mT=fields + eps))
    return Roadmap(records=records, f_mw_GHz=f_mw_GHz, window_mT=window_mT,
                   nuclear_spin=nuclear_spin)


class _UnitOrientation:
    """Adapter passing a raw unit vector through the orientation argument."""

    def __init__(self, b_unit):
        self._u = np.asarray(b_unit, dtype=float)

    def unit(self):
        return self._u
