"""Temperature-dependent polarization and relaxation models, echo-decay
fitting, and instantaneous-diffusion analysis.

Electron spin-lattice relaxation is modeled as the sum of direct
(one-phonon, coth), Raman (T^9) and Orbach (activated) channels. Nuclear
relaxation adds an electron-driven term proportional to (1 - Pe^2)/T1e.
Echo decays follow the stretched-exponential (Mims) law exp[-(2 tau/T2)^m].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.optimize import least_squares

from .constants import HF_OVER_KB_K_PER_GHZ, HF_OVER_KB_K_PER_MHZ

__all__ = [
    "T1eParams",
    "RelaxParams",
    "DecayCurve",
    "MimsFit",
    "ExponentialFit",
    "RateModelFit",
    "LineShape",
    "polarization",
    "t1e_rate",
    "t1e_terms",
    "t1n_rate",
    "fit_rate_model",
    "fit_exponential",
    "mims_fit",
    "id_flip_probability",
    "id_line_fit",
]


def _coth(x):
    return 1.0 / np.tanh(x)


def polarization(temperature_K, frequency_GHz):
    """Electron spin polarization tanh(h f / 2 kB T), in (0, 1)."""
    t = np.asarray(temperature_K, dtype=float)
    if np.any(t <= 0):
        raise ValueError("temperature must be positive")
    x = HF_OVER_KB_K_PER_GHZ * frequency_GHz / (2.0 * t)
    out = np.tanh(x)
    return float(out) if np.isscalar(temperature_K) else out


@dataclass
class T1eParams:
    """Electron spin-lattice relaxation constants.

    a_d: direct-process prefactor (1/s), the T -> 0 rate floor set by
    spontaneous phonon emission. a_r: Raman coefficient (1/s/K^9).
    a_o: Orbach prefactor (1/s) with activation gap delta_o_K (K).
    f_r_GHz: the EPR transition frequency entering the coth argument.
    """

    a_d: float = 0.0
    a_r: float = 0.0
    a_o: float = 0.0
    delta_o_K: float = 1.0
    f_r_GHz: float = 9.56

    def __post_init__(self):
        if min(self.a_d, self.a_r, self.a_o) < 0:
            raise ValueError("rate prefactors must be non-negative")
        if self.delta_o_K <= 0:
            raise ValueError("Orbach gap must be positive")


def t1e_terms(temperature_K, p: T1eParams) -> dict:
    """Per-process contributions to the electron relaxation rate (1/s)."""
    t = np.asarray(temperature_K, dtype=float)
    if np.any(t <= 0):
        raise ValueError("temperature must be positive")
    x = HF_OVER_KB_K_PER_GHZ * p.f_r_GHz / (2.0 * t)
    return {
        "direct": p.a_d * _coth(x),
        "raman": p.a_r * t ** 9,
        "orbach": p.a_o * np.exp(-p.delta_o_K / t),
    }


def t1e_rate(temperature_K, p: T1eParams):
    """Electron spin-lattice relaxation rate 1/T1e (1/s)."""
    terms = t1e_terms(temperature_K, p)
    out = terms["direct"] + terms["raman"] + terms["orbach"]
    return float(out) if np.isscalar(temperature_K) else out


@dataclass
class RelaxParams:
    """Nuclear relaxation constants.

    sigma: dimensionless ratio tying the electron-driven nuclear rate to
    1/T1e. gamma_d (1/s): direct-process coupling at the NMR frequency
    f_n_MHz. gamma_r (1/s/K^9): Raman. gamma_o (1/s/Hz^3): Orbach-type
    coupling, stored so that gamma_o * (f_r in Hz)^3 is a rate.
    """

    sigma: float = 0.0
    gamma_d: float = 0.0
    gamma_r: float = 0.0
    gamma_o: float = 0.0
    f_n_MHz: float = 212.4
    f_r_GHz: float = 9.56

    def __post_init__(self):
        if min(self.sigma, self.gamma_d, self.gamma_r, self.gamma_o) < 0:
            raise ValueError("relaxation constants must be non-negative")


def t1n_rate(temperature_K, rp: RelaxParams, t1e_rate_at_T):
    """Nuclear relaxation rate 1/T1n (1/s) and its term breakdown.

    The total is the exact sum of the returned terms: the electron-driven
    channel sigma (1 - Pe^2) / T1e plus direct, Raman and Orbach processes
    evaluated at the nuclear and electron frequencies.
    """
    t = np.asarray(temperature_K, dtype=float)
    if np.any(t <= 0):
        raise ValueError("temperature must be positive")
    pe = np.tanh(HF_OVER_KB_K_PER_GHZ * rp.f_r_GHz / (2.0 * t))
    xn = HF_OVER_KB_K_PER_MHZ * rp.f_n_MHz / (2.0 * t)
    terms = {
        "electron_driven": rp.sigma * (1.0 - pe ** 2) * np.asarray(t1e_rate_at_T, dtype=float),
        "direct": rp.gamma_d * _coth(xn),
        "raman": rp.gamma_r * t ** 9,
        "orbach": rp.gamma_o * (rp.f_r_GHz * 1e9) ** 3
                  * np.exp(-HF_OVER_KB_K_PER_GHZ * rp.f_r_GHz / t),
    }
    total = terms["electron_driven"] + terms["direct"] + terms["raman"] + terms["orbach"]
    if np.isscalar(temperature_K):
        return float(total), {k: float(v) for k, v in terms.items()}
    return total, terms


# ---------------------------------------------------------------------------
# Rate-model fitting
# ---------------------------------------------------------------------------

_T1E_NAMES = ("a_d", "a_r", "a_o", "delta_o_K")
_T1N_NAMES = ("sigma", "gamma_d", "gamma_r", "gamma_o")


@dataclass
class RateModelFit:
    """Result of fitting a relaxation-rate model to (T, rate) data."""

    model: str
    params: object
    free_names: tuple
    converged: bool
    residual_log: np.ndarray
    cost: float

    def rate(self, temperature_K, t1e_rate_at_T=None):
        if self.model == "t1e":
            return t1e_rate(temperature_K, self.params)
        return t1n_rate(temperature_K, self.params, t1e_rate_at_T)[0]


def fit_rate_model(temperatures_K, rates_per_s, model: str, init=None,
                   bounds=None, fixed: dict | None = None,
                   t1e_of_T=None) -> RateModelFit:
    """Least-squares fit of the t1e or t1n rate model in log-rate space.

    Rates span several decades over the usual 0.1-6.5 K range, so residuals
    are log(model) - log(data), which weights decades evenly. Free
    parameters are bounded below by zero (a parameter ending at the bound is
    effectively pinned off). `fixed` maps parameter names to frozen values;
    for model='t1n' a callable t1e_of_T(T) must supply the electron rate.
    """
    t = np.asarray(temperatures_K, dtype=float)
    y = np.asarray(rates_per_s, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError("temperatures and rates must be 1-d arrays of equal length")
    if np.any(y <= 0) or np.any(t <= 0):
        raise ValueError("temperatures and rates must be positive")
    if model not in ("t1e", "t1n"):
        raise ValueError("model must be 't1e' or 't1n'")
    if model == "t1n" and t1e_of_T is None:
        raise ValueError("model='t1n' requires t1e_of_T")

    fixed = dict(fixed or {})
    names = _T1E_NAMES if model == "t1e" else _T1N_NAMES
    free = tuple(n for n in names if n not in fixed)
    if len(y) < 2 * max(len(free), 1):
        raise ValueError(f"need at least {2 * len(free)} points for {len(free)} free parameters")

    if model == "t1n":
        t1e_vals = np.asarray([t1e_of_T(ti) for ti in t], dtype=float)

    if init is None:
        t_lo, t_hi = float(np.min(t)), float(np.max(t))
        y_lo, y_hi = float(y[np.argmin(t)]), float(y[np.argmax(t)])
        f_r = fixed.get("f_r_GHz", 9.56)
        if model == "t1e":
            init = {"a_d": y_lo, "a_r": 0.5 * y_hi / t_hi ** 9,
                    "a_o": y_hi * np.e ** 5, "delta_o_K": 5 * t_hi}
        else:
            f_n = fixed.get("f_n_MHz", 212.4)
            xn = HF_OVER_KB_K_PER_MHZ * f_n / (2 * t_lo)
            hi = t > 0.7 * t_hi
            sigma0 = float(np.median(y[hi] / np.asarray(t1e_vals)[hi]))
            orb = np.exp(-HF_OVER_KB_K_PER_GHZ * f_r / t_hi)
            init = {"sigma": max(sigma0, 1e-12),
                    "gamma_d": y_lo * np.tanh(xn),
                    "gamma_r": 0.1 * y_hi / t_hi ** 9,
                    "gamma_o": 0.1 * y_hi / ((f_r * 1e9) ** 3 * orb)}
    x0 = np.array([init[n] if isinstance(init, dict) else getattr(init, n) for n in free])

    def make_params(x):
        kw = dict(fixed)
        kw.update({n: v for n, v in zip(free, x)})
        if model == "t1e":
            kw.setdefault("f_r_GHz", 9.56)
            return T1eParams(**kw)
        kw.setdefault("f_n_MHz", 212.4)
        kw.setdefault("f_r_GHz", 9.56)
        return RelaxParams(**kw)

    def resid(x):
        p = make_params(np.maximum(x, 0.0))
        if model == "t1e":
            r = t1e_rate(t, p)
        else:
            r = t1n_rate(t, p, t1e_vals)[0]
        return np.log(np.maximum(r, 1e-300)) - np.log(y)

    lo = np.zeros(len(free))
    hi = np.full(len(free), np.inf)
    if "delta_o_K" in free:
        lo[free.index("delta_o_K")] = 1e-6
    if bounds is not None:
        for n, (a, b) in bounds.items():
            if n in free:
                k = free.index(n)
                lo[k], hi[k] = a, b
    x0 = np.clip(x0, lo + 1e-300, hi)

    # The activated (Orbach) channel creates well-separated local minima in
    # the gap parameter; restart the local solver over a gap grid and keep
    # the best fit. Each restart re-seeds the prefactor so the activated
    # term starts at the scale of the top-temperature data.
    starts = [x0]
    gap_name = "delta_o_K"
    if gap_name in free:
        k_gap = free.index(gap_name)
        t_top, y_top = float(np.max(t)), float(y[np.argmax(t)])
        for gap in np.geomspace(1.5 * np.max(t), 40 * np.max(t), 6):
            xg = x0.copy()
            xg[k_gap] = gap
            for pref in ("a_o",):
                if pref in free:
                    xg[free.index(pref)] = y_top * np.exp(gap / t_top)
            starts.append(np.clip(xg, lo + 1e-300, hi))

    best = None
    for xs in starts:
        res = least_squares(resid, xs, bounds=(lo, hi), method="trf",
                            x_scale="jac", max_nfev=2000)
        if best is None or res.cost < best.cost:
            best = res
    params = make_params(best.x)
    return RateModelFit(model=model, params=params, free_names=free,
                        converged=bool(best.status > 0), residual_log=best.fun,
                        cost=float(best.cost))


# ---------------------------------------------------------------------------
# Echo decay fitting
# ---------------------------------------------------------------------------

@dataclass
class DecayCurve:
    """Echo decay samples: two_tau_s strictly increasing, >= 6 points for
    stretched-exponential fitting."""

    two_tau_s: np.ndarray
    amplitude: np.ndarray
    temperature_K: float | None = None
    field_mT: float | None = None

    def __post_init__(self):
        self.two_tau_s = np.asarray(self.two_tau_s, dtype=float)
        self.amplitude = np.asarray(self.amplitude, dtype=float)
        if self.two_tau_s.shape != self.amplitude.shape or self.two_tau_s.ndim != 1:
            raise ValueError("two_tau_s and amplitude must be 1-d arrays of equal length")
        if np.any(np.diff(self.two_tau_s) <= 0):
            raise ValueError("two_tau_s must be strictly increasing")


@dataclass
class ExponentialFit:
    amplitude: float
    tau_s: float
    offset: float
    reduced_chi2: float
    kind: str

    @property
    def rate_per_s(self) -> float:
        return 1.0 / self.tau_s


def fit_exponential(data: DecayCurve, kind: str = "single",
                    noise_sigma: float | None = None) -> ExponentialFit:
    """Fit a (1 - 2 exp) inversion-recovery or plain exponential decay.

    Returns amplitude, time constant and offset together with the reduced
    chi-square, which flags curves that a single exponential cannot
    describe (the noise scale is estimated from successive differences when
    not supplied). A non-positive optimal time constant is rejected.
    """
    t, y = data.two_tau_s, data.amplitude
    if len(t) < 5:
        raise ValueError("need at least 5 samples")
    if kind not in ("single", "inversion_recovery"):
        raise ValueError("kind must be 'single' or 'inversion_recovery'")

    span = t[-1] - t[0]
    if kind == "single":
        c0, a0 = y[-1], y[0] - y[-1]
        model = lambda t_, a, tau, c: a * np.exp(-t_ / tau) + c
    else:
        a0 = (y[-1] - y[0]) / 2.0
        c0 = y[-1] - a0
        model = lambda t_, a, tau, c: a * (1.0 - 2.0 * np.exp(-t_ / tau)) + c
    tau0 = span / 3.0 if span > 0 else 1.0

    def resid(x):
        return model(t, x[0], x[1], x[2]) - y

    res = least_squares(resid, np.array([a0, tau0, c0]),
                        bounds=([-np.inf, 1e-300, -np.inf], [np.inf, np.inf, np.inf]),
                        method="trf", x_scale="jac", max_nfev=5000)
    a, tau, c = res.x
    if not np.isfinite(tau) or tau <= 0:
        raise ValueError("fit rejected: non-positive time constant")

    r = resid(res.x)
    if noise_sigma is None:
        d = np.diff(y)
        noise_sigma = float(np.median(np.abs(d - np.median(d)))) / 0.6745 / np.sqrt(2)
        noise_sigma = max(noise_sigma, 1e-12 * max(np.max(np.abs(y)), 1e-300))
    dof = max(len(t) - 3, 1)
    chi2 = float(np.sum((r / noise_sigma) ** 2) / dof)
    return ExponentialFit(amplitude=float(a), tau_s=float(tau), offset=float(c),
                          reduced_chi2=chi2, kind=kind)


@dataclass
class MimsFit:
    """Stretched-exponential fit E0 exp[-(2 tau / T2)^m]."""

    e0: float
    t2_s: float
    m: float
    e0_err: float
    t2_err: float
    m_err: float


def mims_fit(data: DecayCurve, residual_space: str = "log") -> MimsFit:
    """Fit the Mims decay law to positive-amplitude echo data.

    Initialization by log-log regression of -ln(E/E0) against 2 tau, then
    nonlinear refinement; one-sigma uncertainties from the Jacobian at the
    optimum. The default refines log-amplitude residuals, the efficient
    choice for the usual relative echo noise (amplitudes are positive by
    precondition); residual_space='amplitude' refines plain differences
    instead.
    """
    if residual_space not in ("log", "amplitude"):
        raise ValueError("residual_space must be 'log' or 'amplitude'")
    mask = data.amplitude > 0
    t, y = data.two_tau_s[mask], data.amplitude[mask]
    if len(t) < 6:
        raise ValueError("need at least 6 positive samples")

    e0_0 = float(np.max(y)) * 1.05
    u = -np.log(np.clip(y / e0_0, 1e-12, 1 - 1e-12))
    slope, intercept = np.polyfit(np.log(t), np.log(u), 1)
    m0 = float(np.clip(slope, 0.2, 5.0))
    t2_0 = float(np.exp(-intercept / m0))

    if residual_space == "log":
        log_y = np.log(y)

        def resid(x):
            e0, t2, m = x
            return np.log(e0) - (t / t2) ** m - log_y
    else:
        def resid(x):
            e0, t2, m = x
            return e0 * np.exp(-((t / t2) ** m)) - y

    res = least_squares(resid, np.array([e0_0, t2_0, m0]),
                        bounds=([1e-300, 1e-300, 0.05], [np.inf, np.inf, 10.0]),
                        method="trf", x_scale="jac", max_nfev=5000)
    e0, t2, m = res.x
    if t2 <= 0 or m <= 0:
        raise ValueError("fit rejected: non-positive T2 or stretch factor")

    jac = res.jac
    dof = max(len(t) - 3, 1)
    s2 = 2.0 * res.cost / dof
    try:
        cov = np.linalg.inv(jac.T @ jac) * s2
        errs = np.sqrt(np.clip(np.diag(cov), 0, None))
    except np.linalg.LinAlgError:
        errs = np.full(3, np.nan)
    return MimsFit(e0=float(e0), t2_s=float(t2), m=float(m),
                   e0_err=float(errs[0]), t2_err=float(errs[1]), m_err=float(errs[2]))


# ---------------------------------------------------------------------------
# Instantaneous diffusion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LineShape:
    """Excitation-line profile over cyclic detuning (Hz).

    kind 'delta' ignores width; 'gaussian' uses width_Hz as the standard
    deviation and 'lorentzian' as the HWHM. Non-delta profiles are truncated
    at +-8 widths and renormalized on that support.
    """

    kind: str = "delta"
    width_Hz: float = 0.0

    def __post_init__(self):
        if self.kind not in ("delta", "gaussian", "lorentzian"):
            raise ValueError(f"unknown lineshape kind {self.kind!r}")
        if self.kind != "delta" and self.width_Hz <= 0:
            raise ValueError("width_Hz must be positive for a broadened line")

    def density(self, detuning_Hz):
        d = np.asarray(detuning_Hz, dtype=float)
        w = self.width_Hz
        if self.kind == "gaussian":
            mass = 0.9999999999999999  # erf(8/sqrt(2)), indistinguishable from 1
            return np.exp(-0.5 * (d / w) ** 2) / (w * np.sqrt(2 * np.pi)) / mass
        if self.kind == "lorentzian":
            mass = 2.0 * np.arctan(8.0) / np.pi
            return (w / np.pi) / (d ** 2 + w ** 2) / mass
        raise ValueError("delta line has no density")

    @property
    def support_Hz(self) -> float:
        return 0.0 if self.kind == "delta" else 8.0 * self.width_Hz


def id_flip_probability(pulse_length_s: float, rabi_freq_Hz: float,
                        line: LineShape = LineShape("delta")) -> float:
    """Average refocusing-pulse flip probability <sin^2(theta/2)>.

    Off-resonance nutation averaged over the excitation line:
    integral of rho(d) * f1^2/(f1^2 + d^2) * sin^2(pi sqrt(f1^2 + d^2) t_p)
    over cyclic detuning d; for a delta line this is sin^2(pi f1 t_p),
    i.e. sin^2(omega_1 t_p / 2) with omega_1 = 2 pi f1.
    """
    if pulse_length_s <= 0 or rabi_freq_Hz <= 0:
        raise ValueError("pulse length and Rabi frequency must be positive")
    f1, tp = rabi_freq_Hz, pulse_length_s
    if line.kind == "delta":
        return float(np.sin(np.pi * f1 * tp) ** 2)

    def integrand(d):
        fe2 = f1 ** 2 + d ** 2
        return line.density(d) * (f1 ** 2 / fe2) * np.sin(np.pi * np.sqrt(fe2) * tp) ** 2

    lim = line.support_Hz
    val, _ = quad(integrand, -lim, lim, epsabs=0.0, epsrel=1e-6, limit=400,
                  points=[-f1, 0.0, f1] if lim > f1 else [0.0])
    return float(min(max(val, 0.0), 1.0))


def id_line_fit(flip_probabilities, rates_per_s) -> tuple[float, float, float]:
    """Ordinary least-squares line through (flip probability, 1/T2e) points.

    Returns (intercept, slope, r_squared): the intercept is the ID-free
    decoherence rate, the slope the concentration-dependent ID strength.
    """
    x = np.asarray(flip_probabilities, dtype=float)
    y = np.asarray(rates_per_s, dtype=float)
    if len(x) < 3:
        raise ValueError("need at least 3 points")
    if np.ptp(x) <= 1e-15 * max(np.max(np.abs(x)), 1.0):
        raise ValueError("degenerate abscissae: flip probabilities do not vary")
    slope, intercept = np.polyfit(x, y, 1)
    yhat = intercept + slope * x
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(intercept), float(slope), r2
