"""NV center under coherent population trapping.

The electron lives on the 9 states ``0, b, d, E_y, A_1, A_2, E_1, E_2, S`` in
the rotating frame of the two lasers. ``b`` and ``d`` are the bright and dark
combinations of ``|+1>`` and ``|-1>`` with the strain phase fixed so that
``|+1> = (b + d)/sqrt2`` and ``|-1> = (d - b)/sqrt2``. ``|E_x>`` is left out:
no drive or damping channel touches it.

All parameters are stored in internal units (rad/us for energies, 1/us for
rates). Use :func:`NVParams.from_units` to build them from MHz / 1/ns inputs.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .adiabatic import LongitudinalHFI, TransverseBlock
from .errors import DegenerateTensor, SingularDenominator
from .lindblad import (
    DephasingChannel,
    ElectronBasis,
    ElectronModel,
    JumpChannel,
    build_liouvillian,
    steady_state,
)
from .units import mhz, per_ns

NV_LABELS = ("0", "b", "d", "Ey", "A1", "A2", "E1", "E2", "S")
NV_BASIS = ElectronBasis(NV_LABELS)
IX = {label: i for i, label in enumerate(NV_LABELS)}
EXCITED = ("Ey", "A1", "A2", "E1", "E2")
FLIP_TARGETS = ("A1", "A2", "E1", "E2")

SQRT2 = math.sqrt(2.0)
GAMMA_DEFAULT = per_ns(1.0 / 12.0)


@dataclass(frozen=True)
class NVParams:
    """NV drive, level and damping parameters in internal units.

    ``eps_*`` are lab-frame excited-state energies (only differences matter);
    ``eps_A2`` is tied to ``eps_A1 + Delta`` and ``eps_E2 = eps_E1``.
    ``gamma_s`` (singlet lifetime) is not fixed by the literature values used
    here; its default of 1/(300 ns) is a modelling choice.
    """

    omega_A: float = mhz(2.0)
    omega_E: float = mhz(8.0)
    Delta: float = mhz(2000.0)
    omega_e: float = mhz(0.18)
    xi_perp: float = 0.0
    D_gs: float = mhz(2870.0)
    eps_Ey: float = 0.0
    eps_A1: float = mhz(-3600.0)
    eps_E1: float = mhz(-5200.0)
    gamma: float = GAMMA_DEFAULT
    gamma_s1: float = GAMMA_DEFAULT
    gamma_s2: float = GAMMA_DEFAULT / 120.0
    gamma_ce: float = GAMMA_DEFAULT / 800.0
    gamma_s: float = per_ns(1.0 / 300.0)
    gamma_phi: float = 0.0
    gamma_E12_s: float | None = None
    a2_path: bool = True

    def __post_init__(self):
        for name in ("gamma", "gamma_s1", "gamma_s2", "gamma_ce", "gamma_s", "gamma_phi"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.gamma_E12_s is not None and self.gamma_E12_s < 0:
            raise ValueError("gamma_E12_s must be >= 0")
        if self.Delta <= 0:
            raise ValueError("Delta must be > 0")

    @classmethod
    def from_units(cls, **kw):
        """Build from MHz frequencies and 1/ns or 1/us rates.

        Keys ending in ``_MHz`` are converted by 2*pi, ``_per_ns`` by 1e3 and
        ``_per_us`` taken as is; ``a2_path`` passes through.
        """
        out = {}
        for key, value in kw.items():
            if key.endswith("_MHz"):
                out[key[:-4]] = mhz(value)
            elif key.endswith("_per_ns"):
                out[key[:-7]] = per_ns(value)
            elif key.endswith("_per_us"):
                out[key[:-7]] = float(value)
            else:
                out[key] = value
        return cls(**out)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def eps_A2(self):
        return self.eps_A1 + self.Delta

    @property
    def eps_E2(self):
        return self.eps_E1

    @property
    def gamma_E_s(self):
        return self.gamma_s1 if self.gamma_E12_s is None else self.gamma_E12_s

    def lab_energy(self, state):
        return {"Ey": self.eps_Ey, "A1": self.eps_A1, "A2": self.eps_A2,
                "E1": self.eps_E1, "E2": self.eps_E2}[state]

    def frame_shift(self, state):
        """Energy removed by the rotating frame for ``state``."""
        if state == "0":
            return 0.0
        if state in ("b", "d"):
            return self.D_gs
        if state == "Ey":
            return self.eps_Ey
        if state in ("A1", "A2"):
            return self.eps_A1
        if state in ("E1", "E2"):
            return self.eps_E1
        raise KeyError(state)

    def widths(self):
        """Total out-rates ``Gamma_f`` of the excited states."""
        return {"Ey": self.gamma + 2 * self.gamma_ce,
                "A1": self.gamma + self.gamma_s1,
                "A2": self.gamma + self.gamma_s2,
                "E1": self.gamma + self.gamma_E_s,
                "E2": self.gamma + self.gamma_E_s}


def build_nv_hamiltonian(params: NVParams, delta_m: float) -> np.ndarray:
    """Rotating-frame Hamiltonian with the two-photon detuning ``delta_m`` in place of ``omega_e``."""
    H = np.zeros((9, 9), dtype=complex)
    b, d = IX["b"], IX["d"]
    H[d, d] = params.xi_perp
    H[b, b] = -params.xi_perp
    H[b, d] = H[d, b] = delta_m
    H[IX["A2"], IX["A2"]] = params.Delta
    ga = params.omega_A / SQRT2
    H[IX["A1"], b] = ga
    H[b, IX["A1"]] = ga
    if params.a2_path:
        H[IX["A2"], d] = 1j * ga
        H[d, IX["A2"]] = -1j * ga
    H[IX["Ey"], IX["0"]] = H[IX["0"], IX["Ey"]] = params.omega_E / 2.0
    return H


def build_nv_channels(params: NVParams):
    """Jump and dephasing channels; returns ``(jumps, dephasings)``."""
    g = params.gamma
    pairs = [
        ("Ey", "0", g), ("Ey", "b", params.gamma_ce), ("Ey", "d", params.gamma_ce),
        ("A1", "b", g / 2), ("A1", "d", g / 2), ("A1", "S", params.gamma_s1),
        ("A2", "b", g / 2), ("A2", "d", g / 2), ("A2", "S", params.gamma_s2),
        ("E1", "b", g / 2), ("E1", "d", g / 2), ("E1", "S", params.gamma_E_s),
        ("E2", "b", g / 2), ("E2", "d", g / 2), ("E2", "S", params.gamma_E_s),
        ("S", "0", params.gamma_s),
    ]
    jumps = tuple(JumpChannel(IX[s], IX[t], r) for s, t, r in pairs)
    dephasings = tuple(DephasingChannel(IX[s], params.gamma_phi) for s in EXCITED)
    return jumps, dephasings


def nv_model(params: NVParams, delta_m: float | None = None) -> ElectronModel:
    """Electron model at detuning ``delta_m`` (``omega_e`` when omitted)."""
    if delta_m is None:
        delta_m = params.omega_e
    jumps, dephasings = build_nv_channels(params)
    closed = not any(c.rate > 0 for c in jumps) and params.gamma_phi == 0
    return ElectronModel(NV_BASIS, build_nv_hamiltonian(params, delta_m), jumps, dephasings,
                         closed=closed)


def nv_steady_state(params: NVParams, delta_m: float) -> np.ndarray:
    return steady_state(build_liouvillian(nv_model(params, delta_m)))


def populations(P) -> dict:
    return {label: float(P[i, i].real) for i, label in enumerate(NV_LABELS)}


@dataclass(frozen=True)
class AnalyticSteadyState:
    P_0: float
    delta_0: float
    eta_1: float
    eta_2: float
    eta_3: float
    chi: float
    W_A: float
    W_E: float
    W_A2: float
    populations: dict = field(default_factory=dict)


def analytic_steady_state(params: NVParams, delta_m: float = 0.0) -> AnalyticSteadyState:
    """Closed-form near-dark-resonance NV steady state.

    ``W_E`` is taken as ``Omega_E^2 / Gamma_Ey``: that is the choice for which
    ``P_00 = (1 + Gamma_Ey/W_E) P_EyEy`` is an exact flux balance. The
    ``delta_0`` strain term is only used at ``xi_perp = 0`` (it reduces to
    ``W_A^2``); with strain the numeric Liouvillian is the reference.
    """
    p = params
    G = p.widths()
    g_ey = G["Ey"]
    eta1 = p.gamma_ce / p.gamma_s1 if p.gamma_s1 > 0 else math.inf
    eta2 = p.gamma_s / (p.gamma_s + p.gamma_ce)
    eta3 = G["A1"] * G["A2"] / (p.gamma + p.gamma_s1) ** 2
    W_A = p.omega_A ** 2 / G["A1"]
    W_E = p.omega_E ** 2 / (g_ey + 2.0 * p.gamma_phi)
    W_A2 = 0.5 * p.omega_A ** 2 * G["A2"] / p.Delta ** 2 if p.a2_path else 0.0
    chi = (p.gamma + p.gamma_phi) * p.omega_A ** 2 / (4 * eta1 * p.Delta ** 2 * (p.gamma + p.gamma_s1))
    if not p.a2_path:
        chi = 0.0
    if W_A == 0 or W_E == 0:
        P0, d0sq = 0.0, 0.0
    else:
        P0 = 1.0 / (2.0 / eta2 + 2.0 * eta1 * (p.gamma + p.gamma_s1) / W_A + g_ey / W_E)
        num = W_A ** 2 - 8 * W_A * p.xi_perp ** 2 / G["A1"] + 4 * p.xi_perp ** 2
        den = eta1 * eta2 + W_A / (p.gamma + p.gamma_s1) * (1 + 0.5 * eta2 * g_ey / W_E)
        d0sq = 0.25 * eta1 * eta2 * num / den
    d0 = math.sqrt(max(d0sq, 0.0))
    dm2 = delta_m ** 2
    p_ey0 = P0 * dm2 / (dm2 + d0sq) if (dm2 + d0sq) > 0 else 0.0
    p_a10 = 2 * eta1 * p_ey0
    p_dd0 = 1.0 - (2.0 + g_ey / W_E) * p_ey0 if W_E > 0 else 1.0
    p_ey2 = W_A2 / (2 * eta1 * (p.gamma + p.gamma_s1)) * p_dd0
    p_a12 = W_A2 / (p.gamma + p.gamma_s1) * p_dd0
    p_a22 = W_A2 / (p.gamma + p.gamma_s2) * p_dd0
    pops = {
        "Ey": p_ey0 + p_ey2,
        "A1": p_a10 + p_a12,
        "A2": p_a22,
        "d": p_dd0,
        "Ey_0": p_ey0,
        "Ey_2": p_ey2,
    }
    pops["S"] = 2 * p.gamma_ce / p.gamma_s * pops["Ey"] if p.gamma_s > 0 else math.inf
    pops["0"] = (1 + g_ey / W_E) * pops["Ey"] if W_E > 0 else 1.0
    return AnalyticSteadyState(P0, d0, eta1, eta2, eta3, chi, W_A, W_E, W_A2, pops)


# --- hyperfine geometry ------------------------------------------------------

E_X = np.array([1.0, 0.0, 0.0])
E_Y = np.array([0.0, 1.0, 0.0])
E_Z = np.array([0.0, 0.0, 1.0])


def local_frame(tensor):
    """Local nuclear triad ``(e_x, e_y, e_z)`` (rows) and longitudinal coupling ``|e_z . A|``."""
    A = np.asarray(tensor, dtype=float)
    if A.shape != (3, 3):
        raise ValueError("hyperfine tensor must be 3x3")
    row = E_Z @ A
    a_z = float(np.linalg.norm(row))
    if a_z <= 1e-14 * max(np.abs(A).max(), 1e-300):
        raise DegenerateTensor("e_z . A vanishes; nuclear quantization axis undefined")
    ez = row / a_z
    ref = E_X
    ex = ref - (ref @ ez) * ez
    if np.linalg.norm(ex) < 1e-8:
        ref = E_Y
        ex = ref - (ref @ ez) * ez
    ex /= np.linalg.norm(ex)
    ey = np.cross(ez, ex)
    return np.vstack([ex, ey, ez]), a_z


@dataclass(frozen=True, eq=False)
class CarbonSite:
    """One 13C nucleus with hyperfine tensor ``A`` in rad/us (global NV frame)."""

    tensor: np.ndarray
    frame: np.ndarray = field(init=False)
    a_z: float = field(init=False)

    def __post_init__(self):
        A = np.array(self.tensor, dtype=float)
        A.setflags(write=False)
        object.__setattr__(self, "tensor", A)
        frame, a_z = local_frame(A)
        object.__setattr__(self, "frame", frame)
        object.__setattr__(self, "a_z", a_z)

    @classmethod
    def from_mhz(cls, tensor_mhz):
        return cls(mhz(np.asarray(tensor_mhz, dtype=float)))

    def amplitude(self, alpha, beta):
        """``A_{alpha,beta} = e_alpha . A . e_{n,beta}``.

        ``alpha`` in ``x, y, z, +, -`` refers to the global NV frame and
        ``beta`` in ``x, y, z, +, -`` to the local nuclear frame, with
        ``e_pm = e_x pm i e_y``.
        """
        glob = {"x": E_X, "y": E_Y, "z": E_Z, "+": E_X + 1j * E_Y, "-": E_X - 1j * E_Y}
        ex, ey, ez = self.frame
        loc = {"x": ex, "y": ey, "z": ez, "+": ex + 1j * ey, "-": ex - 1j * ey}
        return complex(glob[alpha] @ self.tensor @ loc[beta])


@dataclass(frozen=True)
class NitrogenSite:
    A_g: float = mhz(2.2)
    A_e: float = mhz(40.0)

    def __post_init__(self):
        if self.A_g < 0 or self.A_e < 0:
            raise ValueError("nitrogen couplings must be >= 0")


MU0_OVER_4PI = 1e-7  # T m / A
HBAR = 1.054571817e-34
GAMMA_E = 1.76085963023e11  # rad / (s T)
GAMMA_13C = 6.728284e7  # rad / (s T)


def dipolar_tensor(position_nm, gamma_e=GAMMA_E, gamma_n=GAMMA_13C):
    """Point-dipole hyperfine tensor in MHz for a nucleus at ``position_nm``.

    ``A = (mu0/4pi) gamma_e gamma_n hbar / r^3 * (1 - 3 r r^T / r^2) / (2 pi)``,
    symmetric and traceless.
    """
    r = np.asarray(position_nm, dtype=float) * 1e-9
    dist = float(np.linalg.norm(r))
    if dist < 0.05e-9:
        raise ValueError("nucleus too close to the electron (|r| < 0.05 nm)")
    n = r / dist
    pref = MU0_OVER_4PI * gamma_e * gamma_n * HBAR / dist ** 3  # rad/s
    A = pref * (np.eye(3) - 3.0 * np.outer(n, n))
    return A / (2 * math.pi) / 1e6


def nv_sz_operator():
    """Ground-state ``S_g^z = sigma_bd + sigma_db`` on the NV basis."""
    O = np.zeros((9, 9), dtype=complex)
    O[IX["b"], IX["d"]] = O[IX["d"], IX["b"]] = 1.0
    return O


def _ket(d_plus=0.0, d_minus=0.0):
    """Ground ket ``c+ |+1> + c- |-1>`` in the NV basis."""
    v = np.zeros(9, dtype=complex)
    v[IX["b"]] += (d_plus - d_minus) / SQRT2
    v[IX["d"]] += (d_plus + d_minus) / SQRT2
    return v


def _e(label):
    v = np.zeros(9, dtype=complex)
    v[IX[label]] = 1.0
    return v


def _ground_blocks(params, nucleus, direction, amp_plus, amp_minus, label):
    """Blocks for an electron operator ``amp_plus S^+ + amp_minus S^-`` on the ground triplet.

    ``S^+ = sqrt2 (|+1><0| + |0><-1|)`` and ``S^- = sqrt2 (|-1><0| + |0><+1|)``.
    Components leaving ``|0>`` oscillate at ``-D_gs`` and those returning to
    ``|0>`` at ``+D_gs``; they enter as separate frequency blocks.
    """
    zero = _e("0")
    up = SQRT2 * np.outer(_ket(d_plus=amp_plus, d_minus=amp_minus), zero.conj())
    down = SQRT2 * np.outer(zero, (_ket(d_plus=np.conj(amp_minus), d_minus=np.conj(amp_plus))).conj())
    blocks = []
    if np.abs(up).max() > 0:
        blocks.append(TransverseBlock(nucleus, direction, up, -params.D_gs, f"{label}:0->pm1"))
    if np.abs(down).max() > 0:
        blocks.append(TransverseBlock(nucleus, direction, down, params.D_gs, f"{label}:pm1->0"))
    return blocks


def _excited_blocks(params, nucleus, direction, target, amp, label):
    """``amp |f><E_y| + conj(amp) ... `` split into its two frequency components."""
    ey, f = _e("Ey"), _e(target)
    shift = params.frame_shift(target) - params.frame_shift("Ey")
    blocks = []
    if amp != 0:
        blocks.append(TransverseBlock(nucleus, direction, amp * np.outer(f, ey), -shift,
                                      f"{label}:Ey->{target}"))
        blocks.append(TransverseBlock(nucleus, direction, amp * np.outer(ey, f), shift,
                                      f"{label}:{target}->Ey"))
    return blocks


def decompose_hfi(params: NVParams, nitrogen: NitrogenSite | None, carbons=()):
    """Longitudinal field coefficients and transverse flip blocks.

    Nucleus 0 is the 14N (spin 1) when ``nitrogen`` is given; carbons follow as
    spin-1/2 nuclei. Amplitudes are the natural flip-flop matrix elements:
    ``A_g`` for the 14N ground flip (``(A_g/2) * sqrt2 * sqrt2``),
    ``A_e/2`` for each ``E_y -> f`` 14N flip, ``(1/4) * sqrt2 * A_{n,-+,-}``
    for 13C ground flips and ``A_{n,y/x,-} / (2 sqrt2)`` for 13C excited
    flips. With no excited-state dephasing these reproduce the closed-form
    rates of :func:`hyperfine_rates` up to the subdominant terms dropped there.
    """
    coeffs, spins, names = [], [], []
    blocks = []
    if nitrogen is not None:
        k = len(coeffs)
        coeffs.append(nitrogen.A_g)
        spins.append(1.0)
        names.append("N14")
        for direction in (+1, -1):
            # raising the nucleus pairs with S^-, lowering with S^+
            amp_p, amp_m = (0.0, nitrogen.A_g / 2) if direction > 0 else (nitrogen.A_g / 2, 0.0)
            blocks += _ground_blocks(params, k, direction, amp_p, amp_m, "N14:g")
            for f in FLIP_TARGETS:
                blocks += _excited_blocks(params, k, direction, f, nitrogen.A_e / 2, "N14:e")
    for n, site in enumerate(carbons):
        k = len(coeffs)
        coeffs.append(site.a_z)
        spins.append(0.5)
        names.append(f"C13[{n}]")
        for direction in (+1, -1):
            beta = "-" if direction > 0 else "+"
            amp_p = 0.25 * site.amplitude("-", beta)
            amp_m = 0.25 * site.amplitude("+", beta)
            blocks += _ground_blocks(params, k, direction, amp_p, amp_m, f"C13[{n}]:g")
            a_y = site.amplitude("y", beta) / (2 * SQRT2)
            a_x = site.amplitude("x", beta) / (2 * SQRT2)
            for f in ("A1", "E1"):
                blocks += _excited_blocks(params, k, direction, f, a_y, f"C13[{n}]:e")
            for f in ("A2", "E2"):
                blocks += _excited_blocks(params, k, direction, f, a_x, f"C13[{n}]:e")
    hfi = LongitudinalHFI(nv_sz_operator(), tuple(coeffs), tuple(spins), tuple(names))
    return hfi, blocks


@dataclass(frozen=True)
class ChiFactors:
    chi_g: float
    chi_f: dict
    chi: float

    @property
    def chi_f_sum(self):
        return sum(self.chi_f.values())


def chi_factors(params: NVParams) -> ChiFactors:
    """Off-resonant flip susceptibilities (1/us per (rad/us)^2) and the A2 leak factor."""
    p = params
    G = p.widths()
    chi_g = (p.gamma + 2 * p.gamma_ce) / p.D_gs ** 2
    chi_f = {}
    for f in FLIP_TARGETS:
        gap = p.eps_Ey - p.lab_energy(f)
        if gap == 0:
            raise SingularDenominator(f"eps_Ey coincides with eps_{f}")
        chi_f[f] = 0.25 * (G[f] + p.gamma_phi) / gap ** 2
    if not p.a2_path or p.omega_A == 0:
        chi = 0.0
    elif p.gamma_ce == 0:
        chi = math.inf  # no leak out of the bright sector balances the A2 pumping
    else:
        eta1 = p.gamma_ce / p.gamma_s1
        chi = (p.gamma + p.gamma_phi) * p.omega_A ** 2 / (4 * eta1 * p.Delta ** 2 * (p.gamma + p.gamma_s1))
    return ChiFactors(chi_g, chi_f, chi)


def hyperfine_rates(params: NVParams, site, P_EyEy: float, depolarization: float = 0.0) -> float:
    """Closed-form flip rate (1/us), identical for raising and lowering.

    ``site`` is a :class:`NitrogenSite` or :class:`CarbonSite`;
    ``depolarization`` adds ``gamma_N`` or ``gamma_C``.
    """
    if not -1e-12 <= P_EyEy <= 1 + 1e-12:
        raise ValueError(f"P_EyEy={P_EyEy} outside [0, 1]")
    c = chi_factors(params)
    if isinstance(site, NitrogenSite):
        rate = (site.A_g ** 2 * c.chi_g + site.A_e ** 2 * c.chi_f_sum) * P_EyEy
    else:
        amm = abs(site.amplitude("-", "-")) ** 2
        apm = abs(site.amplitude("+", "-")) ** 2
        ay = abs(site.amplitude("y", "-")) ** 2
        ax = abs(site.amplitude("x", "-")) ** 2
        rate = (c.chi_g * (amm + apm) / 8
                + ay * (c.chi_f["A1"] + c.chi_f["E1"]) / 2
                + ax * (c.chi_f["A2"] + c.chi_f["E2"]) / 2) * P_EyEy
    return rate + depolarization
