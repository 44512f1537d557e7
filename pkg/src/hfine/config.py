"""Scenario files: TOML with unit-suffixed keys, validated by pydantic.

Sections: ``[nv]``, ``[nitrogen]``, ``[[carbon]]``, ``[bath]`` and ``[run]``.
Unknown keys anywhere abort loading. Frequencies are ordinary frequencies in
MHz (``*_MHz``), rates carry ``*_per_ns``, ``*_per_us`` or ``*_per_s``.
"""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, NegativeRate
from .units import mhz, per_ns, per_s


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False, frozen=True)


class NVSection(_Strict):
    omega_A_MHz: float = 2.0
    omega_E_MHz: float = 8.0
    Delta_MHz: float = 2000.0
    omega_e_MHz: float = 0.18
    xi_perp_MHz: float = 0.0
    D_gs_MHz: float = 2870.0
    eps_Ey_MHz: float = 0.0
    eps_A1_MHz: float = -3600.0
    eps_E1_MHz: float = -5200.0
    gamma_per_ns: float = 1.0 / 12.0
    gamma_s1_per_ns: Optional[float] = None
    gamma_s2_per_ns: Optional[float] = None
    gamma_ce_per_ns: Optional[float] = None
    gamma_s_per_ns: float = 1.0 / 300.0
    gamma_phi_per_ns: float = 0.0
    gamma_E12_s_per_ns: Optional[float] = None
    a2_path: bool = True


class NitrogenSection(_Strict):
    enabled: bool = True
    A_g_MHz: float = 2.2
    A_e_MHz: float = 40.0
    gamma_N_per_s: float = 0.0


class CarbonSection(_Strict):
    tensor_MHz: Optional[List[List[float]]] = None
    position_nm: Optional[List[float]] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.tensor_MHz is None) == (self.position_nm is None):
            raise ValueError("give exactly one of tensor_MHz or position_nm")
        if self.tensor_MHz is not None and np.shape(self.tensor_MHz) != (3, 3):
            raise ValueError("tensor_MHz must be 3x3 (row-major)")
        if self.position_nm is not None and len(self.position_nm) != 3:
            raise ValueError("position_nm must have three components")
        return self


class BathSection(_Strict):
    N: int = 400
    A_par_MHz: float = 0.025
    A_perp_MHz: float = 0.5
    gamma_C_per_s: float = 2.5e-2


class RunSection(_Strict):
    seed: int = 12345
    threads: int = 1
    # steady-scan
    steady_points: int = 201
    steady_span_MHz: Optional[float] = None
    # n14-scan
    n14_omega_A_min_MHz: float = 1.0
    n14_omega_A_max_MHz: float = 150.0
    n14_omega_A_points: int = 40
    # cpt-scan
    cpt_omega_A_re_MHz: List[float] = [3.2, 10.0, 8.0]
    cpt_C: float = 12.0
    cpt_omega_re_span_MHz: float = 1.0
    cpt_omega_re_stride: int = 1
    # narrowing
    narrowing_omega_A_min_MHz: float = 0.05
    narrowing_omega_A_max_MHz: float = 60.0
    narrowing_omega_A_points: int = 80
    kmc_enabled: bool = True
    kmc_trajectories: int = 4
    kmc_events: int = 20000
    kmc_burn_in: int = 1000
    # squeezing-demo
    squeeze_rabi_MHz: float = 20.0
    squeeze_detuning_MHz: float = 10.0
    squeeze_gamma_per_us: float = 60.0
    squeeze_spins: int = 40
    squeeze_coupling_MHz: float = 1.0
    # validate
    validate_oracles: bool = True

    @model_validator(mode="after")
    def _positive(self):
        for name in ("steady_points", "n14_omega_A_points", "narrowing_omega_A_points",
                     "kmc_trajectories", "squeeze_spins", "threads", "cpt_omega_re_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.cpt_C < 0:
            raise ValueError("cpt_C must be >= 0")
        return self


class ScenarioConfig(_Strict):
    nv: NVSection = NVSection()
    nitrogen: NitrogenSection = NitrogenSection()
    carbon: List[CarbonSection] = []
    bath: BathSection = BathSection()
    run: RunSection = RunSection()

    def digest(self) -> str:
        """Stable short hash of the validated content.

        Independent of key order; ``run.threads`` is left out because it
        never changes results.
        """
        data = self.model_dump(mode="json")
        data["run"].pop("threads")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def parse_config(text: str, source="<string>") -> ScenarioConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, str(path))


def shipped_scenarios() -> dict:
    """Name -> TOML text of every scenario shipped with the package."""
    out = {}
    for entry in sorted(resources.files("hfine.scenarios").iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".toml"):
            out[entry.name[:-5]] = entry.read_text()
    return out


def _rate(value_per_ns):
    return None if value_per_ns is None else per_ns(value_per_ns)


def nv_params(cfg: ScenarioConfig):
    """:class:`~hfine.nv.NVParams` from the ``[nv]`` section.

    Negative rates surface as :class:`NegativeRate` rather than a schema
    error so that the validation command can report them as a failed check.
    """
    from .nv import NVParams

    s = cfg.nv
    gamma = per_ns(s.gamma_per_ns)
    rates = {
        "gamma": gamma,
        "gamma_s1": _rate(s.gamma_s1_per_ns) if s.gamma_s1_per_ns is not None else gamma,
        "gamma_s2": _rate(s.gamma_s2_per_ns) if s.gamma_s2_per_ns is not None else gamma / 120.0,
        "gamma_ce": _rate(s.gamma_ce_per_ns) if s.gamma_ce_per_ns is not None else gamma / 800.0,
        "gamma_s": per_ns(s.gamma_s_per_ns),
        "gamma_phi": per_ns(s.gamma_phi_per_ns),
        "gamma_E12_s": _rate(s.gamma_E12_s_per_ns),
    }
    for name, value in rates.items():
        if value is not None and value < 0:
            raise NegativeRate(f"[nv] {name} = {value} 1/us is negative")
    if s.Delta_MHz <= 0:
        raise ConfigError("[nv] Delta_MHz must be > 0")
    return NVParams(
        omega_A=mhz(s.omega_A_MHz), omega_E=mhz(s.omega_E_MHz), Delta=mhz(s.Delta_MHz),
        omega_e=mhz(s.omega_e_MHz), xi_perp=mhz(s.xi_perp_MHz), D_gs=mhz(s.D_gs_MHz),
        eps_Ey=mhz(s.eps_Ey_MHz), eps_A1=mhz(s.eps_A1_MHz), eps_E1=mhz(s.eps_E1_MHz),
        a2_path=s.a2_path, **rates)


def nitrogen_site(cfg: ScenarioConfig):
    from .nv import NitrogenSite

    s = cfg.nitrogen
    if not s.enabled:
        return None
    if s.A_g_MHz < 0 or s.A_e_MHz < 0:
        raise ConfigError("[nitrogen] couplings must be >= 0")
    return NitrogenSite(A_g=mhz(s.A_g_MHz), A_e=mhz(s.A_e_MHz))


def gamma_N(cfg: ScenarioConfig) -> float:
    if cfg.nitrogen.gamma_N_per_s < 0:
        raise NegativeRate("[nitrogen] gamma_N_per_s is negative")
    return per_s(cfg.nitrogen.gamma_N_per_s)


def carbon_sites(cfg: ScenarioConfig):
    from .nv import CarbonSite, dipolar_tensor

    sites = []
    for c in cfg.carbon:
        tensor = np.asarray(c.tensor_MHz, dtype=float) if c.tensor_MHz is not None \
            else dipolar_tensor(c.position_nm)
        sites.append(CarbonSite.from_mhz(tensor))
    return sites


def bath_settings(cfg: ScenarioConfig):
    """``(N, A_par, A_perp, gamma_C)`` in internal units."""
    b = cfg.bath
    if b.N < 1:
        raise ConfigError("[bath] N must be >= 1")
    if b.A_par_MHz <= 0 or b.A_perp_MHz < 0:
        raise ConfigError("[bath] A_par_MHz must be > 0 and A_perp_MHz >= 0")
    if b.gamma_C_per_s < 0:
        raise NegativeRate("[bath] gamma_C_per_s is negative")
    return b.N, mhz(b.A_par_MHz), mhz(b.A_perp_MHz), per_s(b.gamma_C_per_s)
