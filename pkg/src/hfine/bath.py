"""Nuclear bath level: configuration master equations, kinetic Monte Carlo and field narrowing.

Fields ``h`` are angular frequencies in rad/us. A uniform bath of ``N``
spin-1/2 nuclei with longitudinal coupling ``A_par`` carries the collective
field ``h_M = A_par * M`` for total projection ``M`` in ``-N/2 .. N/2``.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse
import scipy.sparse.linalg
from scipy.special import gammaln

from .adiabatic import generator_steady_state, relaxation_generator, relaxation_time
from .errors import GridResolutionError, NegativeRate, UseKMC

MAX_CONFIGS = 200_000


@dataclass(frozen=True)
class BathConfig:
    """Projections ``m_0`` (14N, or None when absent) and ``m_n`` (13C) with their field."""

    m0: float | None
    carbons: tuple
    h: float

    @classmethod
    def build(cls, m0, carbons, A_g=0.0, carbon_couplings=()):
        carbons = tuple(float(m) for m in carbons)
        if m0 is not None and m0 not in (-1, 0, 1):
            raise ValueError(f"14N projection {m0} not in -1, 0, 1")
        if any(abs(m) != 0.5 for m in carbons):
            raise ValueError("13C projections must be +-1/2")
        if len(carbon_couplings) != len(carbons):
            raise ValueError("one coupling per 13C projection is required")
        h = A_g * m0 if m0 is not None else 0.0
        if carbons:
            h += float(np.dot(carbon_couplings, carbons))
        return cls(m0, carbons, float(h))

    @property
    def projections(self):
        return ((float(self.m0),) if self.m0 is not None else ()) + self.carbons


def enumerate_configs(spins: Sequence[float]):
    """All product configurations for the given spin quantum numbers (first index slowest)."""
    levels = [np.arange(-s, s + 0.5, 1.0) for s in spins]
    count = int(np.prod([len(lv) for lv in levels])) if levels else 1
    if count > MAX_CONFIGS:
        raise UseKMC(f"{count} configurations exceed the enumeration limit {MAX_CONFIGS}")
    return [tuple(float(x) for x in c) for c in itertools.product(*levels)]


@dataclass(frozen=True)
class MasterEquationResult:
    configs: list
    populations: np.ndarray
    generator: object
    relaxation_time: float | None = None


def configuration_master_equation(rate: Callable, spins: Sequence[float], times=None,
                                  p0=None) -> MasterEquationResult:
    """Population dynamics over all nuclear configurations.

    ``rate(config, nucleus, direction)`` returns ``W`` (1/us) for moving
    ``nucleus`` by ``direction``. Without ``times`` the normalized steady
    state is returned; with ``times`` the populations at those times
    (``p0`` defaults to uniform) as an array of shape ``(len(times), n)``.
    """
    configs = enumerate_configs(spins)
    index = {c: i for i, c in enumerate(configs)}
    n = len(configs)
    rows, cols, vals = [], [], []
    for j, c in enumerate(configs):
        for k, s in enumerate(spins):
            for d in (+1, -1):
                new = c[k] + d
                if abs(new) > s + 1e-12:
                    continue
                w = float(rate(c, k, d))
                if w < 0:
                    raise NegativeRate(f"rate {w} for config {c}, nucleus {k}")
                target = c[:k] + (new,) + c[k + 1:]
                rows.append(index[target])
                cols.append(j)
                vals.append(w)
    W = scipy.sparse.csc_matrix((vals, (rows, cols)), shape=(n, n))
    out = np.asarray(W.sum(axis=0)).ravel()
    G = (W - scipy.sparse.diags(out)).tocsc()
    if times is None:
        if n <= 2000:
            Gd = relaxation_generator(W.toarray())
            p = generator_steady_state(Gd)
            return MasterEquationResult(configs, p, Gd, relaxation_time(Gd))
        A = G.tolil()
        A[0, :] = np.ones(n)
        b = np.zeros(n)
        b[0] = 1.0
        p = scipy.sparse.linalg.spsolve(A.tocsc(), b)
        p[np.abs(p) < 1e-15] = 0.0
        return MasterEquationResult(configs, p / p.sum(), G)
    t = np.asarray(times, dtype=float)
    p = np.full(n, 1.0 / n) if p0 is None else np.asarray(p0, dtype=float)
    traj = np.array([p if tk == 0 else scipy.sparse.linalg.expm_multiply(G * tk, p) for tk in t])
    return MasterEquationResult(configs, np.asarray(traj), G)


@dataclass(frozen=True)
class NarrowingParams:
    """Uniform-bath narrowing parameters, internal units.

    The per-spin, direction-unbiased flip rate is
    ``lambda(h) = R (h + offset)^2 / ((h + offset)^2 + delta_0^2) + Gamma_dep``;
    ``offset`` is the bare two-photon detuning (``omega_e``), zero in the
    symmetric case.
    """

    N: int
    A_par: float
    R: float
    Gamma_dep: float
    delta_0: float
    A_perp: float = 0.0
    gamma_C: float = 0.0
    P_0: float | None = None
    chi: float | None = None
    offset: float = 0.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        for name in ("A_par", "R", "Gamma_dep", "delta_0", "A_perp", "gamma_C"):
            if getattr(self, name) < 0 or not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite and >= 0")
        if self.A_par == 0:
            raise ValueError("A_par must be > 0")

    @property
    def sigma_eq(self):
        return math.sqrt(self.N) * self.A_par / 2.0

    @property
    def delta_s(self):
        total = self.R + self.Gamma_dep
        return math.sqrt(self.Gamma_dep / total) * self.delta_0 if total > 0 else self.delta_0

    def flip_rate(self, h):
        x = np.asarray(h, dtype=float) + self.offset
        if self.R == 0:
            return np.full_like(x, self.Gamma_dep) + 0.0
        den = x * x + self.delta_0 ** 2
        with np.errstate(invalid="ignore", divide="ignore"):
            dip = np.where(den > 0, x * x / np.where(den > 0, den, 1.0), 1.0)
        return self.R * dip + self.Gamma_dep

    def replace(self, **kw):
        from dataclasses import replace
        return replace(self, **kw)

    @classmethod
    def from_nv(cls, nv, N, A_par, A_perp, gamma_C=0.0, offset=0.0):
        """Couple ``R``, ``Gamma_dep``, ``delta_0`` and ``chi`` to the NV drive.

        ``R = (sum_f chi_f + chi_g) A_perp^2 P_0 (1 - 2 chi)`` and
        ``Gamma_dep = gamma_C + chi R``.
        """
        from .nv import analytic_steady_state, chi_factors

        an = analytic_steady_state(nv)
        c = chi_factors(nv)
        R = (c.chi_f_sum + c.chi_g) * A_perp ** 2 * an.P_0 * (1.0 - 2.0 * an.chi)
        if R < 0:
            raise NegativeRate(f"typical flip rate {R} < 0 (chi={an.chi} > 1/2)")
        return cls(N=int(N), A_par=A_par, R=R, Gamma_dep=gamma_C + an.chi * R,
                   delta_0=an.delta_0, A_perp=A_perp, gamma_C=gamma_C, P_0=an.P_0,
                   chi=an.chi, offset=offset)


@dataclass(frozen=True, eq=False)
class FieldDistribution:
    """Probabilities on a grid of field values (rad/us); ``kind`` records the source."""

    h: np.ndarray
    p: np.ndarray
    kind: str = ""

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if h.shape != p.shape or h.ndim != 1:
            raise ValueError("h and p must be 1-D arrays of equal length")
        if np.any(p < -1e-15):
            raise ValueError("negative probability")
        p = np.clip(p, 0.0, None)
        s = p.sum()
        if not s > 0:
            raise ValueError("distribution has zero mass")
        p = p / s
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "p", p)

    @property
    def mean(self):
        return float(np.dot(self.p, self.h))

    @property
    def sigma(self):
        mu = self.mean
        return float(math.sqrt(max(np.dot(self.p, (self.h - mu) ** 2), 0.0)))


def _log_binom(N, k):
    return gammaln(N + 1) - gammaln(k + 1) - gammaln(N - k + 1)


def birth_death_steady(params: NarrowingParams) -> FieldDistribution:
    """Detailed-balance steady state of the collective projection ``M``.

    With up and down flips of each spin at the same rate ``lambda(h_M)``, the
    solution is ``p(M) ~ binom(N, M + N/2) / lambda(h_M)``.
    """
    return birth_death_from_rates(params.N, params.A_par, params.flip_rate)


def birth_death_from_rates(N: int, A_par: float, flip_rate: Callable) -> FieldDistribution:
    """Birth-death steady state for any direction-unbiased per-spin rate ``flip_rate(h)``."""
    k = np.arange(N + 1)
    h = A_par * (k - N / 2.0)
    lam = np.asarray(flip_rate(h), dtype=float)
    if np.any(lam <= 0):
        raise GridResolutionError("flip rate vanishes on the field grid; add depolarization")
    logp = _log_binom(N, k) - np.log(lam)
    p = np.exp(logp - logp.max())
    return FieldDistribution(h, p, "birth_death")


def birth_death_generator(params: NarrowingParams) -> np.ndarray:
    """Generator on ``M``: up-flips at ``lambda(h_M) n_down(M)``, down-flips at ``lambda(h_M) n_up(M)``."""
    N = params.N
    k = np.arange(N + 1)
    lam = params.flip_rate(params.A_par * (k - N / 2.0))
    W = np.zeros((N + 1, N + 1))
    for i in range(N + 1):
        if i < N:
            W[i + 1, i] = lam[i] * (N - i)
        if i > 0:
            W[i - 1, i] = lam[i] * i
    return relaxation_generator(W)


def detailed_balance_residual(params: NarrowingParams, dist: FieldDistribution) -> float:
    """Largest relative flux mismatch ``|p_M W_{M->M+1} - p_{M+1} W_{M+1->M}|``."""
    N = params.N
    lam = params.flip_rate(dist.h)
    k = np.arange(N + 1)
    up = dist.p[:-1] * lam[:-1] * (N - k[:-1])
    down = dist.p[1:] * lam[1:] * k[1:]
    scale = np.maximum(np.abs(up), np.abs(down))
    scale[scale == 0] = 1.0
    return float(np.max(np.abs(up - down) / scale)) if N > 0 else 0.0


def continuum_density(params: NarrowingParams, h):
    """Unnormalized narrowed density ``(1 + R/(R+G) delta_0^2/((h+offset)^2 + delta_s^2)) exp(-h^2/2 sigma_eq^2)``."""
    h = np.asarray(h, dtype=float)
    x = h + params.offset
    total = params.R + params.Gamma_dep
    frac = params.R / total if total > 0 else 0.0
    ds2 = params.delta_s ** 2
    if frac > 0 and ds2 == 0:
        raise GridResolutionError("delta_s = 0 with R > 0: the central peak is a delta function")
    peak = frac * params.delta_0 ** 2 / (x * x + ds2) if frac > 0 else 0.0
    return (1.0 + peak) * np.exp(-h * h / (2.0 * params.sigma_eq ** 2))


def field_grid(params: NarrowingParams, points=4001, refine=40, span=6.0):
    """Grid over ``+-span*sigma_eq`` refined to ``delta_s/refine`` around the dip centre."""
    s = params.sigma_eq
    base = np.linspace(-span * s, span * s, points)
    ds = params.delta_s
    if params.R > 0 and ds == 0:
        raise GridResolutionError("delta_s = 0 with R > 0")
    pieces = [base]
    if params.R > 0 and ds < s:
        step = ds / refine
        centre = -params.offset
        for width in (20 * ds, 200 * ds):
            w = min(width, span * s)
            n = int(min(2 * w / step, 20000)) + 1
            pieces.append(np.linspace(centre - w, centre + w, n))
            step *= 10
    h = np.unique(np.concatenate(pieces))
    return h[(h >= -span * s) & (h <= span * s)]


def analytic_distribution(params: NarrowingParams, grid=None) -> FieldDistribution:
    """Narrowed continuum distribution as probability masses on an adaptive grid.

    Masses are density times the trapezoid cell width, so moments computed
    from the grid approximate the continuum integrals.
    """
    if params.sigma_eq <= 0:
        raise ValueError("sigma_eq must be > 0")
    h = field_grid(params) if grid is None else np.asarray(grid, dtype=float)
    dens = continuum_density(params, h)
    width = np.empty_like(h)
    width[1:-1] = 0.5 * (h[2:] - h[:-2])
    width[0] = 0.5 * (h[1] - h[0])
    width[-1] = 0.5 * (h[-1] - h[-2])
    return FieldDistribution(h, dens * width, "analytic")


@dataclass(frozen=True)
class NarrowingReport:
    sigma: float
    sigma_eq: float
    ratio: float
    delta_s: float
    narrowed: bool
    optimum_omega_A: float | None = None
    optimum_delta_0: float | None = None
    narrowing_time: float | None = None
    relaxation_time: float | None = None

    def as_text(self):
        items = [("sigma_rad_per_us", self.sigma), ("sigma_eq_rad_per_us", self.sigma_eq),
                 ("ratio", self.ratio), ("delta_s_rad_per_us", self.delta_s),
                 ("narrowed", self.narrowed), ("optimum_omega_A_rad_per_us", self.optimum_omega_A),
                 ("optimum_delta_0_rad_per_us", self.optimum_delta_0),
                 ("narrowing_time_us", self.narrowing_time),
                 ("relaxation_time_us", self.relaxation_time)]
        return "\n".join(f"{k}={_fmt(v)}" for k, v in items if v is not None)


def _fmt(v):
    if isinstance(v, bool):
        return str(v).lower()
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def narrowing_metrics(dist: FieldDistribution, params: NarrowingParams) -> NarrowingReport:
    ratio = dist.sigma / params.sigma_eq
    return NarrowingReport(dist.sigma, params.sigma_eq, ratio, params.delta_s, bool(ratio < 0.9))


@dataclass(frozen=True)
class OptimalNarrowing:
    omega_A: np.ndarray
    delta_0: np.ndarray
    ratio: np.ndarray
    index: int
    analytic_ratio: float
    analytic_delta_0: float

    @property
    def ratio_min(self):
        return float(self.ratio[self.index])

    @property
    def delta_0_opt(self):
        return float(self.delta_0[self.index])

    @property
    def omega_A_opt(self):
        return float(self.omega_A[self.index])

    @property
    def relative_deviation(self):
        return abs(self.ratio_min - self.analytic_ratio) / self.analytic_ratio

    def is_unimodal(self):
        d = np.sign(np.diff(self.ratio))
        d = d[d != 0]
        return bool(np.all(np.diff(d) >= 0))


def optimal_narrowing(nv, N, A_par, A_perp, gamma_C, omega_A_grid) -> OptimalNarrowing:
    """Scan ``sigma/sigma_eq`` of the continuum distribution over the drive ``Omega_A``.

    ``delta_0``, ``R``, ``chi`` and ``Gamma_dep`` all follow ``Omega_A``. The
    result also carries the closed-form estimate of the optimum,
    ``(4 eta_3/(pi eta_1^2))^(1/4) sqrt(sigma_eq/Delta)``, and the optimal
    ``delta_0 = sqrt2 sigma_eq (P_0 gamma_C/(2 R eta_3))^(1/4) (Delta eta_1/sigma_eq)^(1/2)``.
    """
    from .nv import analytic_steady_state

    if nv.xi_perp != 0:
        raise ValueError("the closed-form optimum assumes zero transverse strain")
    grid = np.asarray(omega_A_grid, dtype=float)
    d0, ratios = [], []
    for om in grid:
        params = NarrowingParams.from_nv(nv.replace(omega_A=om), N, A_par, A_perp, gamma_C)
        dist = analytic_distribution(params)
        d0.append(params.delta_0)
        ratios.append(dist.sigma / params.sigma_eq)
    ratios = np.array(ratios)
    i = int(np.argmin(ratios))
    an = analytic_steady_state(nv.replace(omega_A=grid[i]))
    params = NarrowingParams.from_nv(nv.replace(omega_A=grid[i]), N, A_par, A_perp, gamma_C)
    s = params.sigma_eq
    analytic_ratio = (4 * an.eta_3 / (math.pi * an.eta_1 ** 2)) ** 0.25 * math.sqrt(s / nv.Delta)
    analytic_d0 = (math.sqrt(2) * s * (an.P_0 * gamma_C / (2 * params.R * an.eta_3)) ** 0.25
                   * math.sqrt(nv.Delta * an.eta_1 / s)) if params.R > 0 else math.nan
    return OptimalNarrowing(grid, np.array(d0), ratios, i, analytic_ratio, analytic_d0)


# --- kinetic Monte Carlo ------------------------------------------------------


@dataclass(frozen=True)
class UniformBathRates:
    """Flip rates of a uniform spin-1/2 bath: every spin flips at ``lambda(h)``."""

    params: NarrowingParams

    @property
    def n_nuclei(self):
        return self.params.N

    def field(self, config):
        return self.params.A_par * float(np.sum(config))

    def draw(self, config, rng):
        """Total rate and one move chosen in proportion to its rate.

        Every spin flips at the same rate, so the move is a uniformly chosen spin.
        """
        p = self.params
        x = self.field(config) + p.offset
        den = x * x + p.delta_0 ** 2
        lam = (p.R * x * x / den if den > 0 else p.R) + p.Gamma_dep
        k = int(rng.integers(len(config)))
        return lam * len(config), k, (-1 if config[k] > 0 else +1)

    def rates(self, config):
        """Rates for ``(nucleus, direction)`` moves as an array of shape ``(n, 2)`` (lower, raise)."""
        lam = float(self.params.flip_rate(self.field(config)))
        up = config > 0
        out = np.empty((len(config), 2))
        out[:, 0] = np.where(up, lam, 0.0)
        out[:, 1] = np.where(up, 0.0, lam)
        return out


@dataclass(frozen=True)
class ChainRates:
    """Generic rates from a callable ``rate(config, nucleus, direction)`` and spin values."""

    rate: Callable
    spins: tuple
    couplings: tuple

    @property
    def n_nuclei(self):
        return len(self.spins)

    def field(self, config):
        return float(np.dot(self.couplings, config))

    def rates(self, config):
        out = np.zeros((len(config), 2))
        for k, s in enumerate(self.spins):
            for col, d in ((0, -1), (1, +1)):
                if abs(config[k] + d) <= s + 1e-12:
                    out[k, col] = self.rate(tuple(config), k, d)
        return out


@dataclass(frozen=True, eq=False)
class KMCResult:
    histogram: FieldDistribution | None
    final_configs: list
    events: np.ndarray
    times: np.ndarray
    absorbed: np.ndarray
    first_events: list = field(default_factory=list)


def _run_trajectory(provider, config0, horizon, max_events, burn_in, seed, traj, record):
    rng = np.random.default_rng([int(seed), int(traj)])
    if config0 is not None:
        config = np.array(config0, dtype=float)
    elif getattr(provider, "spins", None) is not None:
        config = np.array([rng.choice(np.arange(-s, s + 0.5, 1.0)) for s in provider.spins])
    else:
        config = rng.choice([-0.5, 0.5], size=provider.n_nuclei)
    t = 0.0
    events = 0
    hist = {}
    log = []
    absorbed = False
    quantum = getattr(getattr(provider, "params", None), "A_par", None)
    draw = getattr(provider, "draw", None)
    while events < max_events and t < horizon:
        h = provider.field(config)
        if draw is not None:
            total, k, direction = draw(config, rng)
        else:
            rates = provider.rates(config)
            total = rates.sum()
        if total <= 0:
            absorbed = True
            dwell = horizon - t if math.isfinite(horizon) else 0.0
            if events >= burn_in and dwell > 0:
                hist[h] = hist.get(h, 0.0) + dwell
            break
        dwell = rng.exponential(1.0 / total)
        if t + dwell > horizon:
            dwell = horizon - t
        if events >= burn_in:
            key = round(2 * h / quantum) * quantum / 2 if quantum else round(h, 9)
            hist[key] = hist.get(key, 0.0) + dwell
        t += dwell
        if t >= horizon:
            break
        if draw is None:
            flat = rates.ravel()
            idx = int(np.searchsorted(np.cumsum(flat), rng.random() * total, side="right"))
            k, col = divmod(min(idx, len(flat) - 1), 2)
            direction = +1 if col == 1 else -1
        config[k] += direction
        if len(log) < record:
            log.append((k, direction))
        events += 1
    return hist, config, events, t, absorbed, log


def kmc_sample(provider, n_traj, seed, horizon=math.inf, max_events=10_000, burn_in=0,
               initial=None, threads=1, record=0) -> KMCResult:
    """Residence-time kinetic Monte Carlo over spin configurations.

    Each trajectory draws from its own generator seeded by ``(seed, index)``,
    so results do not depend on scheduling. The field histogram is weighted
    by residence time and accumulated after ``burn_in`` events; it is summed
    over trajectories in index order.
    """
    if not math.isfinite(horizon) and max_events is None:
        raise ValueError("either a finite horizon or max_events is required")
    max_events = max_events if max_events is not None else 2 ** 62
    args = [(provider, initial, horizon, max_events, burn_in, seed, j, record) for j in range(n_traj)]
    if threads > 1 and n_traj > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_run_trajectory_args, args))
    else:
        results = [_run_trajectory(*a) for a in args]
    merged = {}
    for hist, *_ in results:
        for key, w in hist.items():
            merged[key] = merged.get(key, 0.0) + w
    keys = sorted(merged)
    histogram = FieldDistribution(np.array(keys), np.array([merged[k] for k in keys]), "kmc") \
        if keys and sum(merged.values()) > 0 else None
    return KMCResult(histogram, [r[1] for r in results], np.array([r[2] for r in results]),
                     np.array([r[3] for r in results]), np.array([r[4] for r in results]),
                     [r[5] for r in results])


def _run_trajectory_args(a):
    return _run_trajectory(*a)


def total_variation(d1: FieldDistribution, d2: FieldDistribution, decimals=9) -> float:
    """``0.5 * sum |p1 - p2|`` over the union of support points."""
    a = {round(h, decimals): p for h, p in zip(d1.h, d1.p)}
    b = {round(h, decimals): p for h, p in zip(d2.h, d2.p)}
    keys = set(a) | set(b)
    return 0.5 * sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)


def sup_norm_deviation(d1: FieldDistribution, d2: FieldDistribution) -> float:
    """``max |p1 - p2| / max p2`` on a shared grid."""
    if d1.h.shape != d2.h.shape or not np.allclose(d1.h, d2.h):
        raise ValueError("distributions must share a grid")
    return float(np.max(np.abs(d1.p - d2.p)) / np.max(d2.p))


def continuum_on_lattice(params: NarrowingParams) -> FieldDistribution:
    """Continuum narrowed form evaluated at the birth-death field points and normalized there."""
    N = params.N
    h = params.A_par * (np.arange(N + 1) - N / 2.0)
    return FieldDistribution(h, continuum_density(params, h), "continuum_lattice")


# --- 14N chain ---------------------------------------------------------------


@dataclass(frozen=True)
class NitrogenChainResult:
    populations: np.ndarray  # m0 = -1, 0, +1
    rates: np.ndarray
    narrowing_time: float
    relaxation_time: float


def nitrogen_chain(rates_by_m0) -> NitrogenChainResult:
    """Three-level 14N chain with ``W_{m0+-1 <- m0} = rates_by_m0[m0 + 1]`` (both directions equal).

    The narrowing time is ``1 / sum_m0 p(m0) * (total flip rate out of m0)``;
    the relaxation time is the slowest mode of the generator.
    """
    w = np.asarray(rates_by_m0, dtype=float)
    if w.shape != (3,):
        raise ValueError("need one rate per 14N projection")
    W = np.zeros((3, 3))
    for i in range(3):
        if i > 0:
            W[i - 1, i] = w[i]
        if i < 2:
            W[i + 1, i] = w[i]
    G = relaxation_generator(W)
    p = generator_steady_state(G)
    out = W.sum(axis=0)
    total = float(np.dot(p, out))
    return NitrogenChainResult(p, w, 1.0 / total if total > 0 else math.inf, relaxation_time(G))
