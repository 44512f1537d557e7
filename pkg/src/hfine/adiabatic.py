"""Adiabatic elimination of a fast, damped electron coupled to slow nuclei.

Nuclear configurations are tuples of spin projections, one entry per nucleus.
The longitudinal hyperfine coupling is ``K_m = O * h_m`` with ``O`` an
electron operator and ``h_m = sum_k a_k m_k`` the nuclear field. Transverse
couplings come as :class:`TransverseBlock` objects, one per nucleus, flip
direction and oscillation frequency; contributions of different blocks add.

For a block taking configuration ``m`` to ``p`` with electron operator ``V``
and frequency ``omega`` the exact rate is::

    W = 2 Re Tr[ V^+ int_0^inf exp(i omega t) exp(L_pm t) (V P_mm) dt ]

where ``L_pm`` carries the mean longitudinal field ``(K_p + K_m)/2`` and
``P_mm`` is the electron steady state at field ``h_m``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import NegativeRate, ProjectionError, SolverError
from .lindblad import (
    ElectronModel,
    anticommutator_super,
    build_liouvillian,
    commutator_super,
    is_hermitian,
    liouvillian_integral,
    projected_integral,
    resolvent_diag,
    split_diag_offdiag,
    steady_state,
    Superoperator,
)

FIELD_KEY_DECIMALS = 9
NEGATIVE_RATE_FLOOR = 1e-8
SEPARATION_LIMIT = 0.1


@dataclass(frozen=True, eq=False)
class LongitudinalHFI:
    """``K_m = electron_operator * sum_k field_coefficients[k] * m_k``.

    ``spins`` gives the spin quantum number of each nucleus (1 for 14N, 1/2
    for 13C) and bounds the allowed projections.
    """

    electron_operator: np.ndarray
    field_coefficients: tuple
    spins: tuple = None
    names: tuple = None

    def __post_init__(self):
        O = np.array(self.electron_operator, dtype=complex)
        if not is_hermitian(O):
            raise ValueError("longitudinal electron operator must be Hermitian")
        O.setflags(write=False)
        object.__setattr__(self, "electron_operator", O)
        coeffs = tuple(float(a) for a in self.field_coefficients)
        object.__setattr__(self, "field_coefficients", coeffs)
        spins = self.spins if self.spins is not None else (0.5,) * len(coeffs)
        if len(spins) != len(coeffs):
            raise ValueError("one spin value per nucleus is required")
        object.__setattr__(self, "spins", tuple(float(s) for s in spins))
        names = self.names if self.names is not None else tuple(f"n{k}" for k in range(len(coeffs)))
        object.__setattr__(self, "names", tuple(names))

    @property
    def n_nuclei(self):
        return len(self.field_coefficients)

    def check_config(self, config):
        config = tuple(float(x) for x in config)
        if len(config) != self.n_nuclei:
            raise ValueError(f"configuration {config} has wrong length, expected {self.n_nuclei}")
        for m, s in zip(config, self.spins):
            if abs(m) > s + 1e-12 or abs((m + s) - round(m + s)) > 1e-12:
                raise ValueError(f"projection {m} not allowed for spin {s}")
        return config

    def field(self, config):
        config = self.check_config(config)
        return float(np.dot(self.field_coefficients, config)) if config else 0.0

    def K(self, config_or_field):
        h = config_or_field if np.isscalar(config_or_field) else self.field(config_or_field)
        return self.electron_operator * h

    def flip(self, config, nucleus, direction):
        """Configuration after moving nucleus ``nucleus`` by ``direction`` (+1/-1), or None."""
        config = list(self.check_config(config))
        new = config[nucleus] + direction
        if abs(new) > self.spins[nucleus] + 1e-12:
            return None
        config[nucleus] = new
        return tuple(config)


@dataclass(frozen=True, eq=False)
class TransverseBlock:
    """One frequency component ``V^(p,m) exp(-i omega t)`` of a nuclear flip."""

    nucleus: int
    direction: int
    electron_operator: np.ndarray
    frequency: float
    label: str = ""

    def __post_init__(self):
        if self.direction not in (+1, -1):
            raise ValueError("direction must be +1 (raise) or -1 (lower)")
        V = np.array(self.electron_operator, dtype=complex)
        V.setflags(write=False)
        object.__setattr__(self, "electron_operator", V)

    def paired(self):
        """Reverse process: daggered operator, negated frequency, opposite direction."""
        return TransverseBlock(self.nucleus, -self.direction, self.electron_operator.conj().T,
                               -self.frequency, self.label + "^+")

    def single_transition(self):
        """``(f, i, lam)`` when the operator is ``lam |f><i|`` with ``f != i``, else None."""
        nz = np.argwhere(self.electron_operator != 0)
        if len(nz) != 1:
            return None
        f, i = (int(x) for x in nz[0])
        if f == i:
            return None
        return f, i, complex(self.electron_operator[f, i])


def _key(h):
    return round(float(h), FIELD_KEY_DECIMALS) + 0.0


class SteadyStateMap:
    """Electron steady states keyed by the (mean) longitudinal field.

    A pair ``(m, n)`` uses the mean field ``(h_m + h_n)/2``; since the
    Liouvillian depends on the configurations only through it, equal keys
    share one solve. Keys are rounded to 1e-9 rad/us.
    """

    def __init__(self, model: ElectronModel, hfi: LongitudinalHFI):
        self.model = model
        self.hfi = hfi
        self._states = {}
        self._liouvillians = {}

    def __len__(self):
        return len(self._states)

    def keys(self):
        return sorted(self._states)

    def liouvillian(self, h):
        k = _key(h)
        if k not in self._liouvillians:
            self._liouvillians[k] = build_liouvillian(self.model, self.hfi.K(k))
        return self._liouvillians[k]

    def at_field(self, h):
        k = _key(h)
        if k not in self._states:
            try:
                self._states[k] = steady_state(self.liouvillian(k))
            except SolverError as exc:
                raise type(exc)(f"{exc} (nuclear field h={k})") from exc
        return self._states[k]

    def diagonal(self, config):
        return self.at_field(self.hfi.field(config))

    def pair(self, m, n):
        return self.at_field(0.5 * (self.hfi.field(m) + self.hfi.field(n)))

    def expectation(self, op, h):
        return complex(np.trace(np.asarray(op) @ self.at_field(h)))


def _as_field(hfi, key):
    if np.isscalar(key):
        return float(key)
    key = tuple(key)
    if len(key) == 2 and not np.isscalar(key[0]):
        return 0.5 * (hfi.field(key[0]) + hfi.field(key[1]))
    return hfi.field(key)


def electron_steady_map(model: ElectronModel, hfi: LongitudinalHFI, keys: Iterable,
                        executor=None) -> SteadyStateMap:
    """Solve the steady state for every key.

    Keys may be field values, configurations or ``(m, n)`` configuration
    pairs. With ``executor`` (any ``concurrent.futures`` executor) the solves
    run in parallel; the merge is keyed, so the result does not depend on
    completion order.
    """
    smap = SteadyStateMap(model, hfi)
    fields = sorted({_key(_as_field(hfi, k)) for k in keys})
    if executor is None:
        for h in fields:
            smap.at_field(h)
    else:
        def solve(h):
            return h, steady_state(build_liouvillian(model, hfi.K(h)))
        for h, P in executor.map(solve, fields):
            smap._states[h] = P
    return smap


@dataclass(frozen=True)
class MeanField:
    """First-order nuclear dynamics: diagonal of ``H_eff = h <O>_h``."""

    smap: SteadyStateMap

    def expectation(self, h):
        return self.smap.expectation(self.smap.hfi.electron_operator, h).real

    def diagonal(self, config_or_field):
        h = config_or_field if np.isscalar(config_or_field) else self.smap.hfi.field(config_or_field)
        return float(h) * self.expectation(h)

    def coherence_rate(self, m, n):
        """``-i (h_m <O>_m - h_n <O>_n)``: first-order evolution rate of ``p^(m,n)``."""
        return -1j * (self.diagonal(m) - self.diagonal(n))

    def curve(self, fields):
        fields = np.asarray(fields, dtype=float)
        sz = np.array([self.expectation(h) for h in fields])
        return fields, sz, fields * sz


def mean_field_generator(smap: SteadyStateMap, hfi: LongitudinalHFI | None = None) -> MeanField:
    if hfi is not None and hfi is not smap.hfi:
        smap = SteadyStateMap(smap.model, hfi)
    return MeanField(smap)


@dataclass(frozen=True)
class RateResult:
    value: float
    method: str
    golden_part: float | None = None
    coherent_part: float | None = None
    nd_ratio: float | None = None

    def __float__(self):
        return float(self.value)


def _target(hfi, block, m):
    p = hfi.flip(m, block.nucleus, block.direction)
    if p is None:
        raise ValueError(f"block {block.label!r} cannot act on configuration {m}")
    return p


def _smap(model, hfi, smap):
    if smap is None:
        return SteadyStateMap(model, hfi)
    if smap.model is not model or smap.hfi is not hfi:
        raise ValueError("steady-state map was built for a different model")
    return smap


def _rate_from_kernel(L, block, P):
    V = block.electron_operator
    Y = liouvillian_integral(L, block.frequency, V @ P)
    return 2.0 * float(np.real(np.trace(V.conj().T @ Y)))


def transition_rate_exact(model, hfi, block, from_config, smap=None) -> RateResult:
    """Rate ``W_{p<-m}`` with the resolvent of ``L_pm`` solved densely."""
    smap = _smap(model, hfi, smap)
    m = hfi.check_config(from_config)
    p = _target(hfi, block, m)
    if not np.any(block.electron_operator):
        return RateResult(0.0, "exact")
    L = smap.liouvillian(0.5 * (hfi.field(p) + hfi.field(m)))
    P = smap.diagonal(m)
    value = _rate_from_kernel(L, block, P)
    return RateResult(value, "exact")


def transition_rate_exact_K(model, hfi, block, from_config, smap=None) -> RateResult:
    """As :func:`transition_rate_exact` with ``-i{., K_p - K_m}/2`` added to the kernel."""
    smap = _smap(model, hfi, smap)
    m = hfi.check_config(from_config)
    p = _target(hfi, block, m)
    if not np.any(block.electron_operator):
        return RateResult(0.0, "exact_K")
    L = smap.liouvillian(0.5 * (hfi.field(p) + hfi.field(m)))
    dK = hfi.K(p) - hfi.K(m)
    Ltot = Superoperator(L.matrix + anticommutator_super(dK), L.labels,
                         dissipative=True, trace_preserving=False)
    P = smap.diagonal(m)
    return RateResult(_rate_from_kernel(Ltot, block, P), "exact_K")


def _lorentzian(x, half_width):
    return (half_width / math.pi) / (x * x + half_width * half_width)


def transition_rate_perturbative(model, hfi, block, from_config, smap=None,
                                 warn_ratio=10.0) -> RateResult:
    """Rate from the first two Dyson terms around the superoperator-diagonal Liouvillian.

    ``W = -2 Re Tr V^+ (G_d - G_d L_nd G_d) V P`` with ``G_d = (L_d + i omega)^-1``.
    For a single-transition operator ``lam |f><i|`` the two terms are also
    returned separately: the golden-rule Lorentzian and the coherent part
    ``2 |lam|^2 Im sum_j P_ij H_nd,ji / (z_fi z_fj)``.
    """
    smap = _smap(model, hfi, smap)
    m = hfi.check_config(from_config)
    p = _target(hfi, block, m)
    V = block.electron_operator
    if not np.any(V):
        return RateResult(0.0, "perturbative", 0.0, 0.0)
    K_mean = hfi.K(0.5 * (hfi.field(p) + hfi.field(m)))
    Ld, Lnd = split_diag_offdiag(model, K_mean)
    G = resolvent_diag(Ld, block.frequency)
    P = smap.diagonal(m)
    H = model.hamiltonian + K_mean
    Hnd = H - np.diag(np.diag(H))
    # Jump refill terms in L_nd only move populations; the expansion is
    # controlled by the coherent couplings against the smallest |z|.
    nd_norm = np.linalg.norm(commutator_super(Hnd), 2)
    ratio = float(np.abs(G.z).min() / nd_norm) if nd_norm > 0 else math.inf
    if ratio < warn_ratio:
        warnings.warn(f"perturbative rate: min|z| / |[H_nd, .]| = {ratio:.3g} < {warn_ratio}",
                      RuntimeWarning, stacklevel=2)
    X = V @ P
    Y1 = G.apply(X)
    Y2 = G.apply(Lnd.apply(Y1))
    Vd = V.conj().T
    value = -2.0 * float(np.real(np.trace(Vd @ (Y1 - Y2))))
    golden = coherent = None
    single = block.single_transition()
    if single is not None:
        f, i, lam = single
        z = G.z
        lam2 = abs(lam) ** 2
        detuning, half_width = z[f, i].real, -z[f, i].imag
        golden = 2 * math.pi * lam2 * P[i, i].real * _lorentzian(detuning, half_width)
        acc = sum(P[i, j] * Hnd[j, i] / (z[f, i] * z[f, j]) for j in range(model.dim))
        coherent = 2 * lam2 * float(np.imag(acc))
    return RateResult(value, "perturbative", golden, coherent, ratio)


def golden_rule_rate(model, hfi, block, from_config, smap=None) -> RateResult:
    """Golden-rule term alone (single-transition operators only)."""
    r = transition_rate_perturbative(model, hfi, block, from_config, smap, warn_ratio=0.0)
    if r.golden_part is None:
        raise ValueError("golden-rule split needs a single-transition operator lam |f><i|")
    return RateResult(r.golden_part, "golden_rule_only", r.golden_part, 0.0, r.nd_ratio)


RATE_METHODS = {
    "exact": transition_rate_exact,
    "exact_K": transition_rate_exact_K,
    "perturbative": transition_rate_perturbative,
    "golden_rule_only": golden_rule_rate,
}


def total_rate(model, hfi, blocks, from_config, nucleus, direction, method="exact", smap=None):
    """Sum over all frequency blocks flipping ``nucleus`` in ``direction``."""
    fn = RATE_METHODS[method]
    smap = _smap(model, hfi, smap)
    total = 0.0
    for b in blocks:
        if b.nucleus == nucleus and b.direction == direction:
            total += fn(model, hfi, b, from_config, smap).value
    return total


def dephasing_rate(model, hfi, m, n, smap=None) -> float:
    """Pure dephasing of ``p^(m,n)`` from fluctuations of ``K_m - K_n``.

    ``Re int_0^inf Tr[Kt exp(L_mn t) Kt P_mn] dt`` with ``Kt`` the deviation of
    ``K_m - K_n`` from its mean. The steady component of ``Kt P_mn`` is
    projected out before the zero-frequency solve.
    """
    smap = _smap(model, hfi, smap)
    m, n = hfi.check_config(m), hfi.check_config(n)
    dK = hfi.K(m) - hfi.K(n)
    if not np.any(dK):
        return 0.0
    P = smap.pair(m, n)
    Kt = dK - np.trace(dK @ P) * np.eye(model.dim)
    if not np.any(np.abs(Kt) > 1e-14 * np.abs(dK).max()):
        return 0.0
    L = smap.liouvillian(0.5 * (hfi.field(m) + hfi.field(n)))
    X = Kt @ P
    overlap = abs(np.trace(X))
    if overlap > 1e-10 * max(np.abs(X).max(), 1e-300) * model.dim:
        raise ProjectionError(f"steady-state overlap {overlap:.3e} of the dephasing source")
    Y = projected_integral(L, P, X)
    return float(np.real(np.trace(Kt @ Y)))


def coherence_transition_rate(model, hfi, block, m, n, smap=None) -> float:
    """``W_{p<-m|n}`` for a coherence ``p^(m,n)`` and a flip ``m -> p``.

    ``2 Re Tr V^+ int exp(i omega t) exp(L_pn t) (V P_mn - <V>_mn P_pn) dt``.
    """
    smap = _smap(model, hfi, smap)
    m, n = hfi.check_config(m), hfi.check_config(n)
    p = _target(hfi, block, m)
    V = block.electron_operator
    if not np.any(V):
        return 0.0
    P_mn = smap.pair(m, n)
    P_pn = smap.pair(p, n)
    L = smap.liouvillian(0.5 * (hfi.field(p) + hfi.field(n)))
    X = V @ P_mn - np.trace(V @ P_mn) * P_pn
    Y = liouvillian_integral(L, block.frequency, X)
    return 2.0 * float(np.real(np.trace(V.conj().T @ Y)))


def coherence_decay_rate(model, hfi, blocks, m, n, smap=None) -> float:
    """Total second-order decay of ``p^(m,n)``: pure dephasing plus half the flip-out rates."""
    smap = _smap(model, hfi, smap)
    m, n = hfi.check_config(m), hfi.check_config(n)
    rate = dephasing_rate(model, hfi, m, n, smap)
    for b in blocks:
        if hfi.flip(m, b.nucleus, b.direction) is not None:
            rate += 0.5 * coherence_transition_rate(model, hfi, b, m, n, smap)
        if hfi.flip(n, b.nucleus, b.direction) is not None:
            rate += 0.5 * coherence_transition_rate(model, hfi, b, n, m, smap)
    return rate


def relaxation_generator(rates) -> np.ndarray:
    """Population generator from a rate matrix ``rates[p, m] = W_{p<-m}``.

    Columns of the result sum to zero. Negative rates down to
    ``-1e-8 * max|W|`` are clipped to zero; anything more negative raises
    :class:`NegativeRate`.
    """
    W = np.array(rates, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("rate matrix must be square")
    np.fill_diagonal(W, 0.0)
    scale = np.abs(W).max(initial=0.0)
    if np.any(W < -NEGATIVE_RATE_FLOOR * max(scale, 1e-300)):
        raise NegativeRate(f"rate {W.min():.3e} below the clipping floor")
    W = np.clip(W, 0.0, None)
    G = W.copy()
    G[np.diag_indices_from(G)] = -W.sum(axis=0)
    return G


def generator_steady_state(G) -> np.ndarray:
    """Normalized null vector of a population generator (dense solve with a normalization row)."""
    G = np.asarray(G, dtype=float)
    n = G.shape[0]
    A = G.copy()
    A[0, :] = 1.0
    b = np.zeros(n)
    b[0] = 1.0
    p = np.linalg.solve(A, b)
    p[np.abs(p) < 1e-15] = 0.0
    return p / p.sum()


def relaxation_time(G) -> float:
    """``1 / |Re lambda|`` of the slowest nonzero mode of a population generator."""
    ev = np.linalg.eigvals(np.asarray(G, dtype=float))
    scale = max(np.abs(ev).max(initial=0.0), 1e-300)
    nonzero = np.sort(np.abs(ev.real[np.abs(ev) > 1e-10 * scale]))
    if len(nonzero) == 0:
        return math.inf
    return 1.0 / nonzero[0]


@dataclass(frozen=True)
class ValidityReport:
    T_e: float
    T_coh: float
    T_2: float
    T_1: float
    separation_ratios: dict = field(default_factory=dict)
    violated: bool = False

    def as_text(self):
        lines = [f"T_e_us={self.T_e:.6g}", f"T_coh_us={self.T_coh:.6g}",
                 f"T_2_us={self.T_2:.6g}", f"T_1_us={self.T_1:.6g}"]
        lines += [f"ratio_{k}={v:.6g}" for k, v in self.separation_ratios.items()]
        lines.append(f"violated={self.violated}")
        return "\n".join(lines)


def electron_damping_time(L: Superoperator) -> float:
    ev = L.eigenvalues()
    re = np.abs(ev.real)
    re = re[re > 1e-9 * L.norm]
    return 1.0 / re.min() if len(re) else math.inf


def timescale_report(model, hfi, blocks, sample_configs, smap=None, method="exact") -> ValidityReport:
    """Electron, precession, dephasing and relaxation times over sample configurations."""
    smap = _smap(model, hfi, smap)
    T_e = 0.0
    max_K = max_phi = max_W = 0.0
    for m in sample_configs:
        m = hfi.check_config(m)
        T_e = max(T_e, electron_damping_time(smap.liouvillian(hfi.field(m))))
        for b in blocks:
            p = hfi.flip(m, b.nucleus, b.direction)
            if p is None:
                continue
            max_W = max(max_W, RATE_METHODS[method](model, hfi, b, m, smap).value)
            dK = hfi.K(m) - hfi.K(p)
            max_K = max(max_K, abs(np.trace(dK @ smap.pair(m, p))))
            max_phi = max(max_phi, dephasing_rate(model, hfi, m, p, smap))
    inv = lambda x: 1.0 / x if x > 0 else math.inf  # noqa: E731
    T_coh, T_2, T_1 = inv(max_K), inv(max_phi), inv(max_W)
    ratios = {"Te_over_Tcoh": T_e / T_coh, "Te_over_T2": T_e / T_2, "Te_over_T1": T_e / T_1}
    worst = T_e / min(T_coh, T_2, T_1)
    return ValidityReport(T_e, T_coh, T_2, T_1, ratios, bool(worst > SEPARATION_LIMIT))


RATE_COLUMNS = ("config_id", "nucleus", "direction", "method", "rate", "golden_part", "coherent_part")


def write_rate_table(path, rows: Sequence[dict], header_lines=()):
    """CSV export of rate results with the standard column set."""
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("# units: rate, golden_part, coherent_part in 1/us\n")
        w = csv.DictWriter(fh, fieldnames=RATE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in RATE_COLUMNS})
