"""Invariant and oracle checks run by ``hfine validate``.

Every check is evaluated on the electron, hyperfine and bath models built from
one scenario. A check that raises an :class:`~hfine.errors.HfineError` is
reported as failed with the exception class in its detail, so a corrupted
scenario (negative rate, degenerate model) shows up as a failed row rather
than a crash.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from .adiabatic import (
    LongitudinalHFI,
    TransverseBlock,
    relaxation_generator,
    transition_rate_exact,
    transition_rate_perturbative,
)
from .bath import (
    NarrowingParams,
    UniformBathRates,
    birth_death_generator,
    birth_death_steady,
    configuration_master_equation,
    detailed_balance_residual,
    kmc_sample,
)
from .commands import steady_scan
from .errors import HfineError
from .lindblad import (
    ElectronBasis,
    ElectronModel,
    JumpChannel,
    Superoperator,
    build_liouvillian,
    commutator_super,
    dissipator_super,
    evolve,
    split_diag_offdiag,
    steady_state,
)
from .nv import decompose_hfi, hyperfine_rates, nv_model, nv_steady_state, populations

INVARIANT_RTOL = 1e-12
BALANCE_RTOL = 1e-8
RATE_RTOL = 0.01
# the closed form keeps only the dominant terms of the generic rate
CLOSED_FORM_RTOL = 0.2
ORACLE_RTOL = 0.05
PERTURBATIVE_SCALE = 0.1


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


def _random_hermitian(rng, d):
    A = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return A + A.conj().T


def _check(name, fn):
    try:
        value, tol, detail = fn()
    except HfineError as exc:
        return CheckResult(name, False, math.nan, math.nan, f"{type(exc).__name__}: {exc}")
    return CheckResult(name, bool(value <= tol), float(value), float(tol), detail)


class ScenarioChecks:
    """Checks bound to one scenario; ``run()`` returns every :class:`CheckResult`."""

    def __init__(self, cfg, seed=None, threads=1):
        self.cfg = cfg
        self.seed = cfg.run.seed if seed is None else seed
        self.threads = threads

    def run(self):
        results = [_check("parameters", self._parameters)]
        if not results[0].passed:
            return results
        checks = [
            ("liouvillian_trace", self._trace),
            ("liouvillian_hermiticity", self._hermiticity),
            ("liouvillian_dissipative", self._dissipative),
            ("diag_offdiag_split", self._split),
            ("steady_state_positive", self._steady_positive),
            ("flux_balance_singlet", self._flux_balance),
            ("rate_generator", self._rate_generator),
            ("closed_form_rates", self._closed_form_rates),
            ("perturbative_consistency", self._perturbative),
            ("golden_coherent_split", self._golden_split),
            ("birth_death_detailed_balance", self._detailed_balance),
            ("birth_death_stationary", self._bd_stationary),
            ("master_equation_conservation", self._master_conservation),
            ("kmc_determinism", self._kmc_determinism),
            ("scan_determinism", self._scan_determinism),
        ]
        if self.cfg.run.validate_oracles:
            checks.append(("joint_system_oracle", self._joint_oracle))
        return results + [_check(name, fn) for name, fn in checks]

    # --- scenario -------------------------------------------------------------

    def _parameters(self):
        self.nv = cfgmod.nv_params(self.cfg)
        self.nitrogen = cfgmod.nitrogen_site(self.cfg)
        self.carbons = cfgmod.carbon_sites(self.cfg)
        self.gamma_N = cfgmod.gamma_N(self.cfg)
        self.bath = cfgmod.bath_settings(self.cfg)
        self.model = nv_model(self.nv)
        self.L = build_liouvillian(self.model)
        steady_state(self.L)
        return 0.0, 0.0, "scenario parameters build a model with a unique steady state"

    def _rng(self):
        return np.random.default_rng(self.seed)

    def _trace(self):
        rng = self._rng()
        worst = 0.0
        for _ in range(5):
            X = _random_hermitian(rng, self.L.dim)
            worst = max(worst, abs(np.trace(self.L.apply(X))) / (self.L.norm * np.linalg.norm(X)))
        return worst, INVARIANT_RTOL, "|Tr L(X)| / (|L| |X|)"

    def _hermiticity(self):
        rng = self._rng()
        worst = 0.0
        for _ in range(5):
            X = _random_hermitian(rng, self.L.dim)
            Y = self.L.apply(X)
            worst = max(worst, np.linalg.norm(Y - Y.conj().T) / (self.L.norm * np.linalg.norm(X)))
        return worst, INVARIANT_RTOL, "|L(X) - L(X)^+| / (|L| |X|)"

    def _dissipative(self):
        return max(self.L.eigenvalues().real.max(), 0.0) / self.L.norm, INVARIANT_RTOL, \
            "largest Re(eigenvalue) / |L|"

    def _split(self):
        Ld, Lnd = split_diag_offdiag(self.model)
        return np.abs(Ld.matrix + Lnd.matrix - self.L.matrix).max() / self.L.norm, INVARIANT_RTOL, \
            "|L_d + L_nd - L| / |L|"

    def _steady_positive(self):
        worst = 0.0
        for delta in (self.nv.omega_e, 0.0, -self.nv.omega_e):
            P = nv_steady_state(self.nv, delta)
            worst = max(worst, -np.linalg.eigvalsh(P).min(), abs(np.trace(P).real - 1.0))
        return worst, 1e-10, "max(-min eigenvalue, |Tr P - 1|) over three detunings"

    def _flux_balance(self):
        worst = 0.0
        for delta in (self.nv.omega_e, 0.5 * self.nv.omega_e):
            pops = populations(nv_steady_state(self.nv, delta))
            expected = 2 * self.nv.gamma_ce / self.nv.gamma_s * pops["Ey"]
            worst = max(worst, abs(pops["S"] - expected) / max(abs(expected), 1e-300))
        return worst, BALANCE_RTOL, "P_S vs (2 gamma_ce / gamma_s) P_Ey"

    # --- hyperfine rates --------------------------------------------------------

    def _sites(self):
        sites = []
        if self.nitrogen is not None:
            sites.append(("N14", self.nitrogen, None))
        for k, c in enumerate(self.carbons):
            sites.append((f"C13[{k}]", None, c))
        return sites

    def _site_rate(self, nitrogen, carbon, nv=None):
        """Generic exact rate of the first nucleus of a one-site decomposition, from m = 0 or -1/2."""
        nv = self.nv if nv is None else nv
        hfi, blocks = decompose_hfi(nv, nitrogen, () if carbon is None else (carbon,))
        model = nv_model(nv, nv.omega_e)
        start = (0.0,) if nitrogen is not None else (-0.5,)
        ups = [b for b in blocks if b.direction > 0]
        return model, hfi, ups, start

    def _rate_generator(self):
        if self.nitrogen is None:
            return 0.0, INVARIANT_RTOL, "no 14N: skipped"
        rates = []
        for m0 in (-1, 0, 1):
            p = populations(nv_steady_state(self.nv, self.nv.omega_e + self.nitrogen.A_g * m0))["Ey"]
            rates.append(hyperfine_rates(self.nv, self.nitrogen, p, self.gamma_N))
        W = np.zeros((3, 3))
        for i in range(3):
            if i > 0:
                W[i - 1, i] = rates[i]
            if i < 2:
                W[i + 1, i] = rates[i]
        G = relaxation_generator(W)
        off = G - np.diag(np.diag(G))
        worst = max(np.abs(G.sum(axis=0)).max() / max(np.abs(G).max(), 1e-300),
                    max(-off.min(), 0.0))
        return worst, INVARIANT_RTOL, "column sums and sign of the 14N generator"

    def _closed_form_rates(self):
        if self.nv.gamma_phi != 0 or self.nv.xi_perp != 0:
            return 0.0, CLOSED_FORM_RTOL, "not applicable: closed form assumes no dephasing and no strain"
        worst, names = 0.0, []
        for name, nitrogen, carbon in self._sites():
            model, hfi, ups, start = self._site_rate(nitrogen, carbon)
            generic = sum(transition_rate_exact(model, hfi, b, start).value for b in ups)
            site = nitrogen if nitrogen is not None else carbon
            p_ey = populations(nv_steady_state(self.nv, self.nv.omega_e + hfi.field(start)))["Ey"]
            closed = hyperfine_rates(self.nv, site, p_ey)
            worst = max(worst, abs(generic - closed) / closed)
            names.append(name)
        return worst, CLOSED_FORM_RTOL, "generic vs closed-form flip rate for " + (" ".join(names) or "no sites")

    def _weak_drive(self):
        s = PERTURBATIVE_SCALE
        return self.nv.replace(omega_A=s * self.nv.omega_A, omega_E=s * self.nv.omega_E)

    def _perturbative(self):
        worst = 0.0
        weak = self._weak_drive()
        for _, nitrogen, carbon in self._sites():
            model, hfi, ups, start = self._site_rate(nitrogen, carbon, weak)
            exact = sum(transition_rate_exact(model, hfi, b, start).value for b in ups)
            pert = sum(transition_rate_perturbative(model, hfi, b, start, warn_ratio=0.0).value for b in ups)
            worst = max(worst, abs(pert - exact) / abs(exact))
        return worst, RATE_RTOL, f"perturbative vs exact with drives scaled by {PERTURBATIVE_SCALE}"

    def _golden_split(self):
        worst = 0.0
        weak = self._weak_drive()
        for _, nitrogen, carbon in self._sites():
            model, hfi, ups, start = self._site_rate(nitrogen, carbon, weak)
            for b in ups:
                r = transition_rate_perturbative(model, hfi, b, start, warn_ratio=0.0)
                if r.golden_part is not None:
                    scale = max(abs(r.golden_part), abs(r.coherent_part), 1e-300)
                    worst = max(worst, abs(r.golden_part + r.coherent_part - r.value) / scale)
        return worst, INVARIANT_RTOL, "|golden + coherent - total| / max term"

    # --- bath --------------------------------------------------------------------

    def _narrowing_params(self):
        N, A_par, A_perp, gamma_C = self.bath
        return NarrowingParams.from_nv(self.nv, N, A_par, A_perp, gamma_C)

    def _detailed_balance(self):
        params = self._narrowing_params()
        return detailed_balance_residual(params, birth_death_steady(params)), 1e-10, \
            "largest relative flux mismatch between neighbouring M"

    def _bd_stationary(self):
        params = self._narrowing_params()
        G = birth_death_generator(params)
        p = birth_death_steady(params).p
        return np.abs(G @ p).max() / (np.abs(G).max() * p.max()), 1e-10, "|G p| / (|G| max p)"

    def _master_conservation(self):
        params = self._narrowing_params()
        n = min(params.N, 6)
        spins = [0.5] * n

        def rate(config, k, d):
            return float(params.flip_rate(params.A_par * sum(config)))

        fastest = params.R + params.Gamma_dep
        scale = 1.0 / max(fastest, 1e-300)
        res = configuration_master_equation(rate, spins, times=[0.0, scale, 10 * scale])
        drift = np.abs(res.populations.sum(axis=1) - 1.0).max()
        neg = max(-res.populations.min(), 0.0)
        return max(drift, neg), 1e-10, f"probability drift on {n} spins"

    def _kmc_determinism(self):
        provider = UniformBathRates(self._narrowing_params())
        a = kmc_sample(provider, 2, self.seed, max_events=2000, burn_in=100, threads=1)
        b = kmc_sample(provider, 2, self.seed, max_events=2000, burn_in=100, threads=self.threads)
        same = (a.histogram is not None and b.histogram is not None
                and np.array_equal(a.histogram.h, b.histogram.h)
                and np.array_equal(a.histogram.p, b.histogram.p)
                and all(np.array_equal(x, y) for x, y in zip(a.final_configs, b.final_configs)))
        return 0.0 if same else 1.0, 0.0, f"same seed, threads 1 vs {self.threads}"

    def _scan_determinism(self):
        small = self.cfg.model_copy(update={"run": self.cfg.run.model_copy(update={"steady_points": 7})})
        a = steady_scan(small, threads=1).tables[0].rows
        b = steady_scan(small, threads=max(self.threads, 2)).tables[0].rows
        return 0.0 if a == b else 1.0, 0.0, "steady-scan rows identical across thread counts"

    # --- joint-system oracle ------------------------------------------------------

    def _joint_oracle(self):
        k, w = joint_relaxation_check()
        return abs(k - w) / w, ORACLE_RTOL, f"fitted {k:.6g} vs adiabatic {w:.6g} 1/us"


def joint_relaxation_check(gamma=200.0, rabi=300.0, detuning=100.0, zeeman=50.0, coupling=1.5,
                           longitudinal=3.0, points=60):
    """Fitted nuclear relaxation rate of a joint electron-nucleus model vs the adiabatic rate.

    Electron: driven two-level system (``g``, ``e``) decaying ``e -> g``;
    nucleus: spin 1/2 with Zeeman splitting ``zeeman``, longitudinal coupling
    ``longitudinal S_z I_z`` and flip-flop ``coupling (|e><g| I_- + h.c.)``.
    Returns ``(fitted rate, W_up + W_down)``.
    """
    sz = np.diag([-0.5, 0.5]).astype(complex)
    He = np.array([[0, rabi / 2], [rabi / 2, detuning]], dtype=complex)
    electron = ElectronModel(ElectronBasis(("g", "e")), He, (JumpChannel(1, 0, gamma),))
    hfi = LongitudinalHFI(sz, (longitudinal,), (0.5,))
    raise_e = np.array([[0, 0], [1, 0]], dtype=complex)  # |e><g|
    up = TransverseBlock(0, +1, coupling * raise_e.conj().T, -zeeman, "up")
    down = TransverseBlock(0, -1, coupling * raise_e, zeeman, "down")
    w = transition_rate_exact(electron, hfi, up, (-0.5,)).value + \
        transition_rate_exact(electron, hfi, down, (0.5,)).value

    I2 = np.eye(2)
    Iz = np.diag([-0.5, 0.5])
    Iplus = np.array([[0, 0], [1, 0]])
    H = (np.kron(He, I2) + np.kron(I2, zeeman * Iz) + longitudinal * np.kron(sz, Iz)
         + coupling * (np.kron(raise_e, Iplus.T) + np.kron(raise_e.conj().T, Iplus)))
    L = Superoperator(commutator_super(H) + gamma * dissipator_super(np.kron(raise_e.conj().T, I2)),
                      ("g-", "g+", "e-", "e+"))
    p_inf = float((lambda P: (P[1, 1] + P[3, 3]).real)(steady_state(L)))
    P_e = steady_state(build_liouvillian(electron, sz * longitudinal * 0.5))
    rho0 = np.kron(P_e, np.diag([0.0, 1.0]))
    T1 = 1.0 / w
    ts = np.linspace(max(10.0 / gamma, T1 / 10), T1, points)
    p_up = np.array([(r[1, 1] + r[3, 3]).real for r in evolve(L, rho0, ts)])
    k = -np.polyfit(ts, np.log(np.abs(p_up - p_inf)), 1)[0]
    return float(k), float(w)


def validate_config(cfg, seed=None, threads=1):
    return ScenarioChecks(cfg, seed, threads).run()
