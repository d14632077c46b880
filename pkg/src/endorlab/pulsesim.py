"""Population-level simulation of pulsed ENDOR protocols.

Pulses act as two-level population rotations (transfer sin^2(angle/2) scaled
by an efficiency), waits evolve the populations under a rate-equation
generator obeying detailed balance, and the echo observable is the
population difference across an EPR transition. Coherence decay during the
short echo delays is absorbed into constants, so every simulated signal is
a population functional.

Protocols implemented: Davies ENDOR, the mS-assignment sequence (prepare
nuclear polarization, wait for electron relaxation, read out), generalized
multi-step Davies ENDOR with preparation chains, RF Rabi nutation, the
saturating Tidy reset comb, nuclear-T1 measurement by varying the waiting
time, and assembly of the full hyperfine level diagram from measured
transition frequencies.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .constants import HF_OVER_KB_K_PER_MHZ
from .relaxation import DecayCurve, fit_exponential
from .spincore import EnergyLevels, FieldVector, SpinSystem, build_hamiltonian, eigenlevels, label_levels

__all__ = [
    "PulseOp",
    "Wait",
    "Readout",
    "Sequence",
    "TransitionTable",
    "labeled_levels",
    "thermal_populations",
    "build_rate_matrix",
    "evolve",
    "echo_amplitude",
    "apply_pulse",
    "run_sequence",
    "run_davies_endor",
    "run_ms_assignment",
    "generalized_davies_chain",
    "run_generalized_davies",
    "run_rabi",
    "tidy_reset",
    "simulate_t1n_measurement",
    "assemble_level_diagram",
    "AssembledDiagram",
]

POPULATION_ATOL = 1e-9
DEFAULT_RF_BANDWIDTH_MHZ = 5.0
DEFAULT_MW_BANDWIDTH_MHZ = 20.0


def labeled_levels(sys: SpinSystem, b: FieldVector) -> EnergyLevels:
    """Diagonalize and label the system at field b."""
    return label_levels(eigenlevels(build_hamiltonian(sys, b)), sys, b)


class TransitionTable:
    """Allowed MW (electron-flip) and RF (adjacent nuclear-flip) transitions
    of a labeled level set, resolvable by frequency within a bandwidth."""

    def __init__(self, levels: EnergyLevels):
        if levels.labels is None:
            raise ValueError("levels must be labeled")
        self.levels = levels
        self.entries = []  # (channel, i, j, freq_MHz) with E_i < E_j
        n = levels.n
        for i in range(n):
            for j in range(i + 1, n):
                si, mi = levels.labels[i]
                sj, mj = levels.labels[j]
                freq = float(levels.energies_mhz[j] - levels.energies_mhz[i])
                if si != sj and mi == mj:
                    self.entries.append(("MW", i, j, freq))
                elif si == sj and abs(mi - mj) == 1:
                    self.entries.append(("RF", i, j, freq))

    def resolve(self, channel: str, freq_MHz: float, bandwidth_MHz: float) -> tuple[int, int]:
        """Unique transition of the channel within bandwidth/2 of freq."""
        hits = [(i, j, f) for (ch, i, j, f) in self.entries
                if ch == channel and abs(f - freq_MHz) <= bandwidth_MHz / 2]
        if len(hits) == 1:
            return hits[0][0], hits[0][1]
        if not hits:
            raise LookupError(f"no {channel} transition within {bandwidth_MHz/2} MHz of {freq_MHz} MHz")
        raise LookupError(f"ambiguous {channel} target at {freq_MHz} MHz: candidates {hits}")

    def nearest(self, channel: str, freq_MHz: float, bandwidth_MHz: float) -> tuple[int, int] | None:
        """Closest transition within bandwidth/2, or None (no-op)."""
        hits = [(abs(f - freq_MHz), i, j) for (ch, i, j, f) in self.entries
                if ch == channel and abs(f - freq_MHz) <= bandwidth_MHz / 2]
        if not hits:
            return None
        _, i, j = min(hits)
        return i, j

    def by_labels(self, lab_a: tuple[float, float], lab_b: tuple[float, float]) -> tuple[int, int]:
        i = self.levels.index_of(*lab_a)
        j = self.levels.index_of(*lab_b)
        return (i, j) if i < j else (j, i)

    def frequency(self, i: int, j: int) -> float:
        return abs(float(self.levels.energies_mhz[j] - self.levels.energies_mhz[i]))


@dataclass
class PulseOp:
    """A selective pulse on one transition.

    Target either by explicit level pair or by frequency resolved against
    the transition table within the channel bandwidth. The population
    transfer is efficiency * sin^2(angle/2).
    """

    channel: str = "RF"
    levels: tuple[int, int] | None = None
    freq_MHz: float | None = None
    bandwidth_MHz: float | None = None
    angle_rad: float = np.pi
    efficiency: float = 1.0

    def __post_init__(self):
        if self.channel not in ("MW", "RF"):
            raise ValueError("channel must be 'MW' or 'RF'")
        if (self.levels is None) == (self.freq_MHz is None):
            raise ValueError("specify exactly one of levels or freq_MHz")
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must lie in [0, 1]")

    def resolve(self, table: TransitionTable) -> tuple[int, int]:
        if self.levels is not None:
            return self.levels
        bw = self.bandwidth_MHz
        if bw is None:
            bw = DEFAULT_MW_BANDWIDTH_MHZ if self.channel == "MW" else DEFAULT_RF_BANDWIDTH_MHZ
        return table.resolve(self.channel, self.freq_MHz, bw)


@dataclass
class Wait:
    duration_s: float

    def __post_init__(self):
        if self.duration_s < 0:
            raise ValueError("wait duration must be >= 0")


@dataclass
class Readout:
    """Echo detection on an EPR transition, by level pair or frequency."""

    levels: tuple[int, int] | None = None
    freq_MHz: float | None = None
    bandwidth_MHz: float = DEFAULT_MW_BANDWIDTH_MHZ

    def resolve(self, table: TransitionTable) -> tuple[int, int]:
        if self.levels is not None:
            return self.levels
        return table.resolve("MW", self.freq_MHz, self.bandwidth_MHz)


@dataclass
class Sequence:
    """Ordered pulse-program elements with a relaxation environment."""

    elements: list
    temperature_K: float
    t1e_s: float | None = None
    t1n_s: float | None = None

    def __post_init__(self):
        n_read = sum(isinstance(e, Readout) for e in self.elements)
        if n_read != 1:
            raise ValueError(f"sequence must contain exactly one readout, found {n_read}")


def thermal_populations(levels: EnergyLevels, temperature_K: float) -> np.ndarray:
    """Boltzmann populations over the level energies (MHz)."""
    if temperature_K <= 0:
        raise ValueError("temperature must be positive")
    x = -HF_OVER_KB_K_PER_MHZ * levels.energies_mhz / temperature_K
    x = x - x.max()
    p = np.exp(x)
    return p / p.sum()


def build_rate_matrix(levels: EnergyLevels, temperature_K: float,
                      t1e_s: float | None = None, t1n_s: float | None = None,
                      cross_relaxation_s: float | None = None) -> np.ndarray:
    """Rate-equation generator G with dp/dt = G p.

    Electron flips connect equal-mI pairs at total pair rate 1/t1e_s;
    nuclear flips connect adjacent-mI, equal-mS pairs at 1/t1n_s. Each
    pair's up/down rates are split as W exp(-+x)/(2 cosh x) with
    x = h dE / 2 kB T, so the pair relaxes at the supplied total rate and
    detailed balance holds. Cross relaxation (flip-flop pairs with
    dmS = +-1, dmI = -+1) is off unless a time constant is given.
    Columns of G sum to zero.
    """
    if levels.labels is None:
        raise ValueError("levels must be labeled")
    n = levels.n
    g = np.zeros((n, n))

    def connect(i, j, total_rate):
        de = float(levels.energies_mhz[j] - levels.energies_mhz[i])
        if de < 0:
            i, j, de = j, i, -de
        x = HF_OVER_KB_K_PER_MHZ * de / (2.0 * temperature_K)
        # suppressions beyond ~200 decades are physically meaningless noise;
        # zeroing them keeps the generator's rate spectrum interpretable
        if x > 230.0:
            w_down, w_up = total_rate, 0.0
        else:
            w_down = total_rate * np.exp(x) / (2.0 * np.cosh(x))
            w_up = total_rate * np.exp(-x) / (2.0 * np.cosh(x))
        g[i, j] += w_down
        g[j, j] -= w_down
        g[j, i] += w_up
        g[i, i] -= w_up

    for i in range(n):
        si, mi = levels.labels[i]
        for j in range(i + 1, n):
            sj, mj = levels.labels[j]
            if si != sj and mi == mj and t1e_s:
                connect(i, j, 1.0 / t1e_s)
            elif si == sj and abs(mi - mj) == 1 and t1n_s:
                connect(i, j, 1.0 / t1n_s)
            elif si != sj and abs(mi - mj) == 1 and cross_relaxation_s:
                connect(i, j, 1.0 / cross_relaxation_s)
    return g


def _component_equilibrium(populations: np.ndarray, generator: np.ndarray) -> np.ndarray:
    """Exact long-time limit: per connected component, the detailed-balance
    stationary weights carrying that component's share of the population.

    Works in log space from the rate ratios, so states whose uphill rates
    underflowed to zero end at exactly zero population.
    """
    n = len(populations)
    w = generator.copy()
    np.fill_diagonal(w, 0.0)
    seen = np.full(n, False)
    out = np.zeros(n)
    for root in range(n):
        if seen[root]:
            continue
        comp = [root]
        logpi = {root: 0.0}
        seen[root] = True
        queue = [root]
        while queue:
            j = queue.pop()
            for i in range(n):
                if not seen[i] and (w[i, j] > 0 or w[j, i] > 0):
                    if w[i, j] > 0 and w[j, i] > 0:
                        ratio = np.clip(np.log(w[i, j]) - np.log(w[j, i]), -745.0, 745.0)
                    else:
                        ratio = 745.0 if w[i, j] > 0 else -745.0
                    logpi[i] = logpi[j] + ratio
                    seen[i] = True
                    comp.append(i)
                    queue.append(i)
        idx = np.array(comp)
        lp = np.array([logpi[i] for i in comp])
        pi = np.exp(lp - lp.max())
        out[idx] = pi / pi.sum() * populations[idx].sum()
    return out


def evolve(populations: np.ndarray, duration_s: float, generator: np.ndarray) -> np.ndarray:
    """Propagate dp/dt = G p for duration_s via the matrix exponential.

    Durations that exceed every relaxation scale by many hundreds of decay
    constants return the exact stationary (detailed-balance) distribution
    of each connected component instead, which is also where the matrix
    exponential would land but without its roundoff floor.
    """
    if duration_s < 0:
        raise ValueError("duration must be >= 0")
    if duration_s == 0:
        return populations.copy()
    off = generator - np.diag(np.diag(generator))
    nz = off[off > 0]
    if len(nz) == 0:
        return populations.copy()
    if duration_s * nz.min() > 1e4:
        return _component_equilibrium(populations, generator)
    return expm(generator * duration_s) @ populations


def echo_amplitude(populations: np.ndarray, transition: tuple[int, int]) -> float:
    """Electron-spin-echo amplitude: population of the lower level minus the
    upper level of the transition (i, j) with i the lower index."""
    i, j = transition
    return float(populations[i] - populations[j])


def apply_pulse(populations: np.ndarray, op: PulseOp, table: TransitionTable) -> np.ndarray:
    """Two-level population rotation on the resolved target."""
    i, j = op.resolve(table)
    s = op.efficiency * np.sin(op.angle_rad / 2.0) ** 2
    p = populations.copy()
    p[i] = (1 - s) * populations[i] + s * populations[j]
    p[j] = s * populations[i] + (1 - s) * populations[j]
    return p


def _mix(populations: np.ndarray, i: int, j: int, s: float) -> np.ndarray:
    p = populations.copy()
    p[i] = (1 - s) * populations[i] + s * populations[j]
    p[j] = s * populations[i] + (1 - s) * populations[j]
    return p


def run_sequence(sys: SpinSystem, b: FieldVector, seq: Sequence,
                 initial: np.ndarray | None = None):
    """Execute a sequence from thermal equilibrium; returns (echo, final populations)."""
    levels = labeled_levels(sys, b)
    table = TransitionTable(levels)
    needs_rates = any(isinstance(e, Wait) and e.duration_s > 0 for e in seq.elements)
    gen = build_rate_matrix(levels, seq.temperature_K, seq.t1e_s, seq.t1n_s) if needs_rates else None
    p = thermal_populations(levels, seq.temperature_K) if initial is None else initial.copy()
    echo = None
    for el in seq.elements:
        if isinstance(el, PulseOp):
            p = apply_pulse(p, el, table)
        elif isinstance(el, Wait):
            if el.duration_s > 0:
                p = evolve(p, el.duration_s, gen)
        elif isinstance(el, Readout):
            echo = echo_amplitude(p, el.resolve(table))
        else:
            raise TypeError(f"unknown sequence element {el!r}")
    return echo, p


# ---------------------------------------------------------------------------
# Named protocols
# ---------------------------------------------------------------------------

def run_davies_endor(sys: SpinSystem, b: FieldVector, temperature_K: float,
                     rf_grid_MHz, epr_mi: float, mixing_angle: float = np.pi,
                     rf_bandwidth_MHz: float = DEFAULT_RF_BANDWIDTH_MHZ,
                     efficiency: float = 1.0):
    """Davies ENDOR: MW inversion, swept RF mixing pulse, echo detection.

    The EPR transition (-1/2, epr_mi) -> (+1/2, epr_mi) is inverted; at each
    RF frequency the mixing pulse drives the closest nuclear transition
    within the bandwidth (or none); the echo is read on the same EPR
    transition. Returns (rf_grid, echo array). Nuclear transitions sharing a
    level with the inverted pair recover part of the inverted echo.
    """
    levels = labeled_levels(sys, b)
    table = TransitionTable(levels)
    epr = table.by_labels((-0.5, epr_mi), (+0.5, epr_mi))
    p0 = thermal_populations(levels, temperature_K)
    p0 = _mix(p0, *epr, 1.0)  # MW pi inversion
    s = efficiency * np.sin(mixing_angle / 2.0) ** 2
    echoes = np.empty(len(rf_grid_MHz))
    for k, f in enumerate(np.asarray(rf_grid_MHz, dtype=float)):
        hit = table.nearest("RF", f, rf_bandwidth_MHz)
        p = _mix(p0, hit[0], hit[1], s) if hit is not None else p0
        echoes[k] = echo_amplitude(p, epr)
    return np.asarray(rf_grid_MHz, dtype=float), echoes


def run_ms_assignment(sys: SpinSystem, b: FieldVector, temperature_K: float,
                      rf_freq_MHz: float, t_w_s: float, t1e_s: float, t1n_s: float,
                      epr_mi: float, with_initial_polarization: bool = True,
                      rf_bandwidth_MHz: float = DEFAULT_RF_BANDWIDTH_MHZ,
                      initial_populations: np.ndarray | None = None) -> float:
    """Electron-manifold assignment of an NMR line (MW pi + RF pi + wait,
    then nuclear-polarization readout).

    During the wait (t1e << t_w << t1n, warned otherwise) electron
    relaxation refills the lower manifold while the prepared nuclear
    polarization survives. The readout converts the population difference
    across the RF transition into an echo; a transition in the emptied
    manifold yields no signal. With with_initial_polarization=False the
    preparation block is skipped (subtraction reference). An explicit
    initial_populations vector overrides the thermal starting state (e.g. a
    fully polarized electron with unpolarized nuclei).
    """
    if not (3 * t1e_s <= t_w_s <= t1n_s / 3):
        warnings.warn("waiting time does not satisfy t1e << t_w << t1n; "
                      "the manifold contrast will be degraded", stacklevel=2)
    levels = labeled_levels(sys, b)
    table = TransitionTable(levels)
    epr = table.by_labels((-0.5, epr_mi), (+0.5, epr_mi))
    rf = table.resolve("RF", rf_freq_MHz, rf_bandwidth_MHz)
    if initial_populations is not None:
        p = np.asarray(initial_populations, dtype=float).copy()
    else:
        p = thermal_populations(levels, temperature_K)
    if with_initial_polarization:
        p = _mix(p, *epr, 1.0)   # MW pi
        p = _mix(p, *rf, 1.0)    # RF pi
    gen = build_rate_matrix(levels, temperature_K, t1e_s, t1n_s)
    p = evolve(p, t_w_s, gen)
    # RF pi/2 creates nuclear coherence proportional to the population
    # difference, which the transfer block converts into the detected echo.
    return echo_amplitude(p, rf)


def generalized_davies_chain(levels: EnergyLevels, epr_mi: float,
                             target_ms: float, target_mi_from: float) -> list[tuple[int, int]]:
    """Preparation chain reaching the nuclear transition
    (target_ms, target_mi_from -> target_mi_from + 1) from the EPR anchor.

    Walks the nuclear ladder rung by rung from the anchor mI toward the
    target: in the upper manifold the pumped excess population is carried
    along; in the lower manifold the hole left by the MW inversion is
    carried. Returns the RF level pairs to pulse, in order (the initial MW
    inversion on the anchor is not included).
    """
    table = TransitionTable(levels)
    chain = []
    mi_hi, mi_lo = target_mi_from + 1, target_mi_from
    if mi_hi <= epr_mi:
        pos = epr_mi
        while pos > mi_hi:
            chain.append(table.by_labels((target_ms, pos - 1), (target_ms, pos)))
            pos -= 1
    elif mi_lo >= epr_mi:
        pos = epr_mi
        while pos < mi_lo:
            chain.append(table.by_labels((target_ms, pos), (target_ms, pos + 1)))
            pos += 1
    else:
        chain = []  # target adjacent to the anchor: plain Davies reaches it
    return chain


def _check_chain(chain, anchor: tuple[int, int]):
    touched = set(anchor)
    for k, (i, j) in enumerate(chain):
        if i not in touched and j not in touched:
            raise ValueError(f"broken preparation chain at step {k}: "
                             f"transition ({i}, {j}) shares no level with {sorted(touched)}")
        touched.update((i, j))


def run_generalized_davies(sys: SpinSystem, b: FieldVector, temperature_K: float,
                           prep_chain: list[tuple[int, int]], rf_grid_MHz,
                           epr_mi: float, mixing_angle: float = np.pi,
                           rf_bandwidth_MHz: float = DEFAULT_RF_BANDWIDTH_MHZ,
                           chain_efficiency: float = 1.0,
                           initial_populations: np.ndarray | None = None):
    """Generalized Davies ENDOR with a multi-step preparation chain.

    MW inversion on the anchor EPR transition, pi pulses along prep_chain
    (level pairs, each sharing a level with the already-pumped set), the
    swept mixing pulse, then the chain reversed to carry the mixing outcome
    back to the anchor levels, where the echo is read. On resonance with the
    chain-adjacent target the anchor repolarizes (the inverted echo is
    destroyed); elsewhere the echo stays inverted. An empty chain reduces to
    plain Davies ENDOR. Returns (rf_grid, echo array).
    """
    levels = labeled_levels(sys, b)
    table = TransitionTable(levels)
    epr = table.by_labels((-0.5, epr_mi), (+0.5, epr_mi))
    _check_chain(prep_chain, epr)

    if initial_populations is not None:
        p0 = np.asarray(initial_populations, dtype=float).copy()
    else:
        p0 = thermal_populations(levels, temperature_K)
    p0 = _mix(p0, *epr, 1.0)
    for (i, j) in prep_chain:
        p0 = _mix(p0, i, j, chain_efficiency)
    s = np.sin(mixing_angle / 2.0) ** 2
    echoes = np.empty(len(rf_grid_MHz))
    for k, f in enumerate(np.asarray(rf_grid_MHz, dtype=float)):
        hit = table.nearest("RF", f, rf_bandwidth_MHz)
        p = _mix(p0, hit[0], hit[1], s) if hit is not None else p0.copy()
        for (i, j) in reversed(prep_chain):
            p = _mix(p, i, j, chain_efficiency)
        echoes[k] = echo_amplitude(p, epr)
    return np.asarray(rf_grid_MHz, dtype=float), echoes


def run_rabi(sys: SpinSystem, b: FieldVector, temperature_K: float,
             prep_chain: list[tuple[int, int]], target: tuple[int, int],
             durations_s, rabi_freq_Hz: float, epr_mi: float,
             chain_efficiency: float = 1.0,
             initial_populations: np.ndarray | None = None):
    """Rabi nutation of a chain-prepared nuclear transition.

    The target pulse of duration t transfers sin^2(pi f_rabi t); the chain
    is reversed before echo detection, so the echo oscillates at the Rabi
    frequency with contrast set by the cumulative chain efficiency.
    Returns (durations, echo array).
    """
    levels = labeled_levels(sys, b)
    table = TransitionTable(levels)
    epr = table.by_labels((-0.5, epr_mi), (+0.5, epr_mi))
    _check_chain(prep_chain, epr)

    if initial_populations is not None:
        p0 = np.asarray(initial_populations, dtype=float).copy()
    else:
        p0 = thermal_populations(levels, temperature_K)
    p0 = _mix(p0, *epr, 1.0)
    for (i, j) in prep_chain:
        p0 = _mix(p0, i, j, chain_efficiency)
    durations = np.asarray(durations_s, dtype=float)
    echoes = np.empty(len(durations))
    for k, t in enumerate(durations):
        s = np.sin(np.pi * rabi_freq_Hz * t) ** 2
        p = _mix(p0, target[0], target[1], s)
        for (i, j) in reversed(prep_chain):
            p = _mix(p, i, j, chain_efficiency)
        echoes[k] = echo_amplitude(p, epr)
    return durations, echoes


def tidy_reset(populations: np.ndarray, comb: list[tuple[int, int]],
               repetitions: int = 64) -> np.ndarray:
    """Saturating reset comb: repeated pair averaging over the comb.

    Each pass applies a saturating (half-transfer) pulse to every comb
    transition; many passes equalize the populations across each
    comb-connected component, reinitializing the hyperfine populations
    between experiment repetitions.
    """
    p = populations.copy()
    for _ in range(repetitions):
        for (i, j) in comb:
            m = 0.5 * (p[i] + p[j])
            p[i] = m
            p[j] = m
    return p


def simulate_t1n_measurement(sys: SpinSystem, b: FieldVector, temperature_K: float,
                             t_w_grid_s, rf_freq_MHz: float, t1e_s: float, t1n_s: float,
                             epr_mi: float) -> dict:
    """Nuclear-T1 measurement: the mS-assignment sequence swept over t_w.

    Returns the recovery curve and a single-exponential fit of the echo
    decay toward its thermal value. The fitted constant reflects the
    relaxation of the stored nuclear polarization through the full
    16-level network.
    """
    grid = np.asarray(t_w_grid_s, dtype=float)
    echoes = np.array([
        run_ms_assignment(sys, b, temperature_K, rf_freq_MHz, tw, t1e_s, t1n_s, epr_mi)
        for tw in grid
    ])
    span = float(np.ptp(echoes))
    result = {"t_w_s": grid, "echo": echoes, "tau_s": None, "fit": None,
              "no_decay": False}
    if span < 1e-6 * max(np.max(np.abs(echoes)), 1e-300):
        result["no_decay"] = True
        return result
    fit = fit_exponential(DecayCurve(grid, echoes), kind="single")
    result["tau_s"] = fit.tau_s
    result["fit"] = fit
    return result


# ---------------------------------------------------------------------------
# Level-diagram assembly
# ---------------------------------------------------------------------------

@dataclass
class AssembledDiagram:
    """Hyperfine level energies assembled from measured transition steps."""

    nuclear_spin: float
    energies_mhz: dict = field(default_factory=dict)  # (ms, mi) -> energy or None
    missing_steps: list = field(default_factory=list)
    complete: bool = True

    def as_array(self) -> np.ndarray:
        """(2, 2I+1) array over (mS in [-1/2, +1/2], mI ascending); NaN = gap."""
        ni = round(2 * self.nuclear_spin) + 1
        out = np.full((2, ni), np.nan)
        for (ms, mi), e in self.energies_mhz.items():
            if e is not None:
                row = 0 if ms < 0 else 1
                col = round(mi + self.nuclear_spin)
                out[row, col] = e
        return out


def assemble_level_diagram(anchor_freq_GHz: float, anchor_mi: float,
                           steps, nuclear_spin: float = 3.5,
                           conflict_tol_MHz: float = 0.5) -> AssembledDiagram:
    """Build the 2(2I+1)-level diagram from ladder steps and one EPR anchor.

    The anchor fixes E(-1/2, anchor_mi) = 0 and E(+1/2, anchor_mi) =
    anchor_freq_GHz * 1000. Each step (ms, mi_from, freq_MHz, sign) states
    E(ms, mi_from + 1) - E(ms, mi_from) = sign * freq_MHz. Duplicate steps
    disagreeing by more than conflict_tol_MHz are rejected; missing steps
    leave explicit gaps.
    """
    ii = round(2 * nuclear_spin)
    mi_values = [(-nuclear_spin + k) for k in range(ii + 1)]
    by_key: dict[tuple[float, float], list[float]] = {}
    for (ms, mi_from, freq, sign) in steps:
        if sign not in (-1, 1, -1.0, 1.0):
            raise ValueError(f"step sign must be +-1, got {sign}")
        if freq < 0:
            raise ValueError("step frequencies are magnitudes, must be >= 0")
        by_key.setdefault((ms, mi_from), []).append(sign * freq)

    signed: dict[tuple[float, float], float] = {}
    for key, vals in by_key.items():
        if max(vals) - min(vals) > conflict_tol_MHz:
            raise ValueError(f"conflicting duplicate steps at {key}: {vals}")
        signed[key] = float(np.mean(vals))

    energies: dict[tuple[float, float], float | None] = {
        (ms, mi): None for ms in (-0.5, +0.5) for mi in mi_values}
    energies[(-0.5, anchor_mi)] = 0.0
    energies[(+0.5, anchor_mi)] = anchor_freq_GHz * 1000.0

    missing = []
    for ms in (-0.5, +0.5):
        mi = anchor_mi
        while mi < nuclear_spin - 1e-9:  # walk up
            key = (ms, mi)
            if key in signed and energies[(ms, mi)] is not None:
                energies[(ms, mi + 1)] = energies[(ms, mi)] + signed[key]
            elif key not in signed:
                missing.append(key)
            mi += 1
        mi = anchor_mi
        while mi > -nuclear_spin + 1e-9:  # walk down
            key = (ms, mi - 1)
            if key in signed and energies[(ms, mi)] is not None:
                energies[(ms, mi - 1)] = energies[(ms, mi)] - signed[key]
            elif key not in signed:
                missing.append(key)
            mi -= 1

    return AssembledDiagram(nuclear_spin=nuclear_spin, energies_mhz=energies,
                            missing_steps=sorted(set(missing)),
                            complete=not missing and all(
                                v is not None for v in energies.values()))
