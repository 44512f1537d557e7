"""Scenario commands: each takes a validated config and returns CSV tables.

Commands parallelize over their outermost grid with a thread pool; results
are collected in grid order so output does not depend on ``threads``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from . import config as cfgmod
from .adiabatic import LongitudinalHFI, SteadyStateMap, mean_field_generator
from .bath import (
    NarrowingParams,
    UniformBathRates,
    analytic_distribution,
    birth_death_steady,
    continuum_on_lattice,
    detailed_balance_residual,
    kmc_sample,
    nitrogen_chain,
    optimal_narrowing,
    sup_norm_deviation,
    total_variation,
)
from .csvio import Column, Table
from .errors import ConfigError, SolverError
from .lindblad import ElectronBasis, ElectronModel, JumpChannel
from .nv import analytic_steady_state, hyperfine_rates, nv_steady_state, populations
from .units import mhz, to_mhz

STATE_COLUMNS = (("Ey", "P_Ey"), ("0", "P_0state"), ("d", "P_d"), ("b", "P_b"),
                 ("S", "P_S"), ("A1", "P_A1"), ("A2", "P_A2"))


@dataclass(frozen=True, eq=False)
class CommandResult:
    tables: tuple


def parallel_map(fn, items, threads=1):
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _p_ey(nv, delta):
    return populations(nv_steady_state(nv, delta))["Ey"]


def _annotated(fn, what):
    """Wrap ``fn(x)`` so solver errors name the grid point that failed."""
    def wrapped(x):
        try:
            return fn(x)
        except SolverError as exc:
            raise type(exc)(f"{what}={x!r}: {exc}") from exc
    return wrapped


def _lorentzian_dip(delta, amplitude, width, floor):
    d2 = delta * delta
    return amplitude * d2 / (d2 + width * width) + floor


# --- steady-scan ---------------------------------------------------------------


def steady_scan(cfg, threads=1) -> CommandResult:
    """Numeric and closed-form NV populations across a symmetric detuning grid."""
    nv = cfgmod.nv_params(cfg)
    an0 = analytic_steady_state(nv)
    run = cfg.run
    span = mhz(run.steady_span_MHz) if run.steady_span_MHz is not None else \
        (5.0 * an0.delta_0 if an0.delta_0 > 0 else mhz(1.0))
    grid = np.linspace(-span, span, run.steady_points)

    def point(delta):
        return populations(nv_steady_state(nv, delta))

    numeric = parallel_map(_annotated(point, "delta_m"), grid, threads)
    rows = []
    for delta, pops in zip(grid, numeric):
        an = analytic_steady_state(nv, delta).populations
        rows.append((to_mhz(delta), *(pops[s] for s, _ in STATE_COLUMNS),
                     an["Ey"], an["0"], an["d"], an["S"], an["A1"], an["A2"]))
    cols = (Column("delta_m_MHz", "MHz", "two-photon detuning"),) + tuple(
        Column(name, "1", f"numeric steady population of {s}") for s, name in STATE_COLUMNS) + tuple(
        Column(f"analytic_{name}", "1", f"closed-form population of {s} (zeroth plus second order)")
        for s, name in STATE_COLUMNS if s != "b")
    scan = Table("steady_scan", cols, rows)

    p_ey = np.array([p["Ey"] for p in numeric])
    p_s = np.array([p["S"] for p in numeric])
    fit = fit_lorentzian_dip(grid, p_ey)
    balance = 2 * nv.gamma_ce / nv.gamma_s * p_ey
    balance_dev = float(np.max(np.abs(p_s - balance)) / np.max(np.abs(balance))) \
        if np.max(np.abs(balance)) > 0 else 0.0
    summary = Table("steady_scan_fit", (
        Column("fit_P0", "1", "fitted dip depth"),
        Column("fit_delta0_MHz", "MHz", "fitted dip half width"),
        Column("fit_floor", "1", "fitted constant offset"),
        Column("fit_residual_rel", "1", "max |data - fit| divided by fit_P0"),
        Column("analytic_P0", "1", "closed-form dip depth"),
        Column("analytic_delta0_MHz", "MHz", "closed-form dip half width"),
        Column("argmin_delta_m_MHz", "MHz", "grid detuning with the smallest P_Ey"),
        Column("symmetry_dev", "1", "max |P_Ey(d) - P_Ey(-d)|"),
        Column("balance_dev", "1", "max |P_S - (2 gamma_ce/gamma_s) P_Ey| relative to the largest P_Ey term"),
    ), [(fit[0], to_mhz(fit[1]), fit[2], fit[3], an0.P_0, to_mhz(an0.delta_0),
         to_mhz(grid[int(np.argmin(p_ey))]), float(np.max(np.abs(p_ey - p_ey[::-1]))), balance_dev)])
    return CommandResult((scan, summary))


def fit_lorentzian_dip(delta, p_ey):
    """Least-squares ``A d^2/(d^2 + w^2) + c``; returns ``(A, w, c, max residual / A)``."""
    delta = np.asarray(delta, dtype=float)
    p_ey = np.asarray(p_ey, dtype=float)
    amp0 = float(p_ey.max() - p_ey.min())
    half = p_ey.min() + 0.5 * amp0
    above = np.abs(delta[p_ey >= half])
    w0 = float(above.min()) if above.size else float(np.ptp(delta)) / 4
    popt, _ = curve_fit(_lorentzian_dip, delta, p_ey, p0=(amp0, max(w0, 1e-9), float(p_ey.min())),
                        maxfev=20000)
    amp, width, floor = popt
    resid = float(np.max(np.abs(_lorentzian_dip(delta, *popt) - p_ey)) / abs(amp))
    return float(amp), float(abs(width)), float(floor), resid


# --- n14-scan ------------------------------------------------------------------


def nitrogen_populations(nv, site, gamma_N, omega_A):
    """``(pop(m0=0), narrowing time, relaxation time)`` of the 14N chain at drive ``omega_A``."""
    q = nv.replace(omega_A=omega_A)
    rates = [hyperfine_rates(q, site, _p_ey(q, q.omega_e + site.A_g * m0), gamma_N) for m0 in (-1, 0, 1)]
    res = nitrogen_chain(rates)
    return float(res.populations[1]), res.narrowing_time, res.relaxation_time


def count_maxima(values):
    """Number of interior rises-then-falls in a sampled curve (plateaus ignored)."""
    d = np.sign(np.diff(np.asarray(values, dtype=float)))
    d = d[d != 0]
    return int(np.sum((d[:-1] > 0) & (d[1:] < 0)))


def n14_scan(cfg, threads=1) -> CommandResult:
    nv = cfgmod.nv_params(cfg)
    site = cfgmod.nitrogen_site(cfg)
    if site is None:
        raise ConfigError("n14-scan needs [nitrogen] enabled = true")
    gN = cfgmod.gamma_N(cfg)
    run = cfg.run
    grid = mhz(np.geomspace(run.n14_omega_A_min_MHz, run.n14_omega_A_max_MHz, run.n14_omega_A_points))
    main = parallel_map(_annotated(lambda om: nitrogen_populations(nv, site, gN, om), "omega_A"),
                        grid, threads)
    no_a2 = nv.replace(a2_path=False)
    ref = parallel_map(_annotated(lambda om: nitrogen_populations(no_a2, site, gN, om), "omega_A"),
                       grid, threads)
    rows = [(to_mhz(om), m[0], m[1], m[2], r[0]) for om, m, r in zip(grid, main, ref)]
    scan = Table("n14_scan", (
        Column("Omega_A_MHz", "MHz", "A1 drive Rabi frequency"),
        Column("pop_m0_0", "1", "steady population of m0 = 0"),
        Column("narrowing_time_us", "us", "1 / population-weighted total flip rate"),
        Column("relaxation_time_us", "us", "slowest relaxation mode of the 3-state chain"),
        Column("pop_m0_0_no_A2", "1", "pop_m0_0 with the A2 excitation path removed"),
    ), rows)
    pop = np.array([m[0] for m in main])
    pop_ref = np.array([r[0] for r in ref])
    i = int(np.argmax(pop))
    summary = Table("n14_summary", (
        Column("Omega_A_opt_MHz", "MHz", "drive with the largest pop_m0_0"),
        Column("pop_max", "1", "largest pop_m0_0"),
        Column("narrowing_time_opt_us", "us", "narrowing time at the optimum"),
        Column("relaxation_time_opt_us", "us", "slowest-mode time at the optimum"),
        Column("maxima", "1", "number of interior maxima of pop_m0_0"),
        Column("no_A2_monotone", "1", "1 if pop_m0_0_no_A2 never decreases"),
    ), [(to_mhz(grid[i]), pop[i], main[i][1], main[i][2], count_maxima(pop),
         int(np.all(np.diff(pop_ref) >= -1e-12)))])
    return CommandResult((scan, summary))


# --- cpt-scan ------------------------------------------------------------------


def dip_fwhm(x, y):
    """Full width at half depth of a dip in ``y`` normalized to its last point (NaN if unresolved)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float) / y[-1]
    i = int(np.argmin(y))
    half = 1.0 - 0.5 * (1.0 - y[i])
    left = np.nonzero(y[:i] > half)[0]
    right = np.nonzero(y[i:] > half)[0]
    if y[i] >= 1.0 or not left.size or not right.size:
        return math.nan
    l, r = left[-1], i + right[0]
    xl = np.interp(half, [y[l + 1], y[l]], [x[l + 1], x[l]])
    xr = np.interp(half, [y[r - 1], y[r]], [x[r - 1], x[r]])
    return float(xr - xl)


def cpt_bath(cfg):
    """13C bath parameters and birth-death steady state with the dip at ``h = -omega_e``."""
    nv = cfgmod.nv_params(cfg)
    N, A_par, A_perp, gamma_C = cfgmod.bath_settings(cfg)
    params = NarrowingParams.from_nv(nv, N, A_par, A_perp, gamma_C, offset=nv.omega_e)
    return nv, params, birth_death_steady(params)


def cpt_scan(cfg, threads=1) -> CommandResult:
    """Bath-averaged and post-selected readout fluorescence versus readout Zeeman splitting.

    The readout grid is a multiple of ``A_par``, so each readout detuning
    ``omega_re + h_M`` falls on a half-integer lattice and is solved once.
    """
    nv, params, dist = cpt_bath(cfg)
    run = cfg.run
    A_par = params.A_par
    step = A_par * run.cpt_omega_re_stride
    K = int(math.floor(mhz(run.cpt_omega_re_span_MHz) / step + 1e-9))
    if K < 2:
        raise ConfigError("cpt_omega_re_span_MHz is smaller than two grid steps")
    ks = np.arange(-K, K + 1) * run.cpt_omega_re_stride
    two_m = np.rint(2 * dist.h / A_par).astype(int)
    cond = np.array(parallel_map(_annotated(lambda h: _p_ey(nv, nv.omega_e + h), "h"), dist.h, threads))
    weight = np.exp(-run.cpt_C * cond)
    post = dist.p * weight
    post = post / post.sum()
    keep = (dist.p > 1e-16) | (post > 1e-16)
    needed = sorted({int(2 * k + m) for k in ks for m in two_m[keep]})

    columns = [Column("omega_re_MHz", "MHz", "readout electron Zeeman splitting")]
    curves, summary_rows = [], []
    for om_re in run.cpt_omega_A_re_MHz:
        readout = nv.replace(omega_A=mhz(om_re))
        values = parallel_map(_annotated(lambda j: _p_ey(readout, 0.5 * j * A_par), "readout detuning index"),
                              needed, threads)
        table = dict(zip(needed, values))
        avg, sel = [], []
        for k in ks:
            p_k = np.array([table[int(2 * k + m)] for m in two_m[keep]])
            avg.append(float(np.dot(dist.p[keep], p_k)))
            sel.append(float(np.dot(post[keep], p_k)))
        avg = np.array(avg) / avg[-1]
        sel = np.array(sel) / sel[-1]
        curves += [avg, sel]
        columns += [Column(f"fluor_avg_{om_re:g}MHz", "1", f"bath-averaged P_Ey at Omega_A_re = {om_re:g} MHz"),
                    Column(f"fluor_post_{om_re:g}MHz", "1", f"post-selected P_Ey at Omega_A_re = {om_re:g} MHz")]
        x = to_mhz(ks * A_par)
        summary_rows.append((om_re, dip_fwhm(x, avg), dip_fwhm(x, sel), 1 - avg.min(), 1 - sel.min()))
    x = to_mhz(ks * A_par)
    scan = Table("cpt_scan", tuple(columns), np.column_stack([x, *curves]).tolist(),
                 notes=("normalized to 1 at the largest omega_re",
                        "bath: uniform 13C spins only; 14N is not included"))
    summary = Table("cpt_summary", (
        Column("Omega_A_re_MHz", "MHz", "readout A1 drive"),
        Column("fwhm_avg_MHz", "MHz", "full width at half depth, averaged"),
        Column("fwhm_post_MHz", "MHz", "full width at half depth, post-selected"),
        Column("depth_avg", "1", "1 - minimum, averaged"),
        Column("depth_post", "1", "1 - minimum, post-selected"),
    ), summary_rows)
    bath = Table("cpt_bath", (
        Column("h_MHz", "MHz", "collective Overhauser field"),
        Column("p_bath", "1", "birth-death steady probability"),
        Column("p_postselected", "1", "probability after the photon-count weight"),
        Column("P_Ey_conditioning", "1", "P_Ey at omega_e + h under the conditioning drive"),
    ), np.column_stack([to_mhz(dist.h), dist.p, post, cond]).tolist())
    return CommandResult((scan, summary, bath))


# --- narrowing -----------------------------------------------------------------


def _dist_table(name, dist, description, extra=None):
    cols = [Column("h_MHz", "MHz", "collective Overhauser field"), Column("probability", "1", description)]
    data = [to_mhz(dist.h), dist.p]
    if extra is not None:
        cols.append(Column(extra[0], "1", extra[1]))
        data.append(extra[2])
    return Table(name, tuple(cols), np.column_stack(data).tolist())


def narrowing(cfg, seed=None, threads=1) -> CommandResult:
    nv = cfgmod.nv_params(cfg)
    N, A_par, A_perp, gamma_C = cfgmod.bath_settings(cfg)
    run = cfg.run
    seed = run.seed if seed is None else seed
    params = NarrowingParams.from_nv(nv, N, A_par, A_perp, gamma_C)
    analytic = analytic_distribution(params)
    bd = birth_death_steady(params)
    lattice = continuum_on_lattice(params)
    tables = [
        _dist_table("narrowing_analytic", analytic, "continuum narrowed form (cell masses)"),
        _dist_table("narrowing_birth_death", bd, "birth-death steady state",
                    ("continuum_on_lattice", "continuum form sampled on the same lattice", lattice.p)),
    ]
    kmc_ratio, kmc_tv = math.nan, math.nan
    if run.kmc_enabled:
        res = kmc_sample(UniformBathRates(params), run.kmc_trajectories, seed,
                         max_events=run.kmc_events + run.kmc_burn_in, burn_in=run.kmc_burn_in,
                         threads=threads)
        if res.histogram is not None:
            tables.append(_dist_table("narrowing_kmc", res.histogram, "residence-time histogram"))
            kmc_ratio = res.histogram.sigma / params.sigma_eq
            kmc_tv = total_variation(res.histogram, bd)
    grid = mhz(np.geomspace(run.narrowing_omega_A_min_MHz, run.narrowing_omega_A_max_MHz,
                            run.narrowing_omega_A_points))
    opt = optimal_narrowing(nv, N, A_par, A_perp, gamma_C, grid)
    tables.append(Table("narrowing_scan", (
        Column("Omega_A_MHz", "MHz", "A1 drive Rabi frequency"),
        Column("delta_0_MHz", "MHz", "dip half width"),
        Column("ratio", "1", "sigma / sigma_eq of the continuum form"),
    ), np.column_stack([to_mhz(opt.omega_A), to_mhz(opt.delta_0), opt.ratio]).tolist()))
    tables.append(Table("narrowing_summary", (
        Column("sigma_eq_MHz", "MHz", "unpolarized field spread"),
        Column("delta_s_MHz", "MHz", "narrowed peak half width"),
        Column("R_per_us", "1/us", "typical flip rate"),
        Column("Gamma_dep_per_us", "1/us", "depolarization rate"),
        Column("ratio_analytic", "1", "sigma/sigma_eq of the continuum form"),
        Column("ratio_birth_death", "1", "sigma/sigma_eq of the birth-death state"),
        Column("ratio_kmc", "1", "sigma/sigma_eq of the KMC histogram (nan if disabled)"),
        Column("tv_kmc_birth_death", "1", "total variation KMC vs birth-death"),
        Column("sup_dev_birth_death", "1", "sup-norm deviation birth-death vs lattice continuum"),
        Column("detailed_balance_residual", "1", "largest relative flux mismatch"),
        Column("scan_ratio_min", "1", "smallest ratio over the drive scan"),
        Column("scan_Omega_A_opt_MHz", "MHz", "drive at the smallest ratio"),
        Column("scan_delta_0_opt_MHz", "MHz", "dip half width at the smallest ratio"),
        Column("closed_form_ratio_min", "1", "closed-form optimal ratio"),
        Column("closed_form_deviation", "1", "|scan - closed form| / closed form"),
        Column("scan_unimodal", "1", "1 if the scan has a single minimum"),
    ), [(to_mhz(params.sigma_eq), to_mhz(params.delta_s), params.R, params.Gamma_dep,
         analytic.sigma / params.sigma_eq, bd.sigma / params.sigma_eq, kmc_ratio, kmc_tv,
         sup_norm_deviation(bd, lattice), detailed_balance_residual(params, bd), opt.ratio_min,
         to_mhz(opt.omega_A_opt), to_mhz(opt.delta_0_opt), opt.analytic_ratio, opt.relative_deviation,
         int(opt.is_unimodal()))]))
    return CommandResult(tuple(tables))


# --- squeezing-demo ------------------------------------------------------------


def driven_spin_model(rabi, detuning, decay):
    """Driven-damped spin 1/2 (``down``, ``up``): ``H = (rabi/2) sigma_x + detuning S_z``, decay ``up -> down``."""
    H = np.array([[-detuning / 2, rabi / 2], [rabi / 2, detuning / 2]], dtype=complex)
    jumps = (JumpChannel(1, 0, decay),) if decay > 0 else ()
    return ElectronModel(ElectronBasis(("down", "up")), H, jumps, (), closed=decay == 0)


def squeezing_demo(cfg, threads=1) -> CommandResult:
    """Mean-field diagonal generator ``h <S_z>_h`` on a collective spin of ``squeeze_spins`` nuclei."""
    run = cfg.run
    n = run.squeeze_spins
    M = np.arange(n + 1) - n / 2.0
    a = mhz(run.squeeze_coupling_MHz)
    model = driven_spin_model(mhz(run.squeeze_rabi_MHz), mhz(run.squeeze_detuning_MHz),
                              run.squeeze_gamma_per_us)
    hfi = LongitudinalHFI(np.diag([-0.5, 0.5]), (a,), (n / 2.0,), ("collective",))
    mean_field = mean_field_generator(SteadyStateMap(model, hfi))
    h = np.array([hfi.field((m,)) for m in M])
    sz = np.array(parallel_map(_annotated(mean_field.expectation, "h"), h, threads))
    h_eff = h * sz
    curvature = np.full_like(h, np.nan)
    if len(h) >= 3:
        curvature[1:-1] = (h_eff[2:] - 2 * h_eff[1:-1] + h_eff[:-2]) / (a * a)
    table = Table("squeezing", (
        Column("M", "1", "collective projection"),
        Column("h_MHz", "MHz", "longitudinal field coupling * M"),
        Column("Sz", "1", "steady electron <S_z> at that field"),
        Column("H_eff_MHz", "MHz", "diagonal of the effective generator, h <S_z>_h"),
        Column("curvature_per_MHz", "1/MHz", "second difference of H_eff in h (scaled to MHz)"),
    ), np.column_stack([M, to_mhz(h), sz, to_mhz(h_eff), curvature * mhz(1.0)]).tolist())
    return CommandResult((table,))


COMMANDS = {
    "steady-scan": steady_scan,
    "n14-scan": n14_scan,
    "cpt-scan": cpt_scan,
    "narrowing": narrowing,
    "squeezing-demo": squeezing_demo,
}
