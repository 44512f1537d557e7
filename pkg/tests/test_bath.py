import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from hfine.bath import (
    BathConfig,
    ChainRates,
    FieldDistribution,
    NarrowingParams,
    UniformBathRates,
    analytic_distribution,
    birth_death_generator,
    birth_death_steady,
    configuration_master_equation,
    continuum_density,
    continuum_on_lattice,
    detailed_balance_residual,
    enumerate_configs,
    kmc_sample,
    narrowing_metrics,
    nitrogen_chain,
    optimal_narrowing,
    sup_norm_deviation,
    total_variation,
)
from hfine.errors import GridResolutionError, NegativeRate, UseKMC
from hfine.nv import NitrogenSite, NVParams, chi_factors, analytic_steady_state, hyperfine_rates
from hfine.nv import nv_steady_state, populations
from hfine.units import mhz


def uniform_params(N=40, A_par=0.05, R=1e3, Gamma_dep=1.0, delta_0=None):
    sigma_eq = math.sqrt(N) * A_par / 2
    return NarrowingParams(N=N, A_par=A_par, R=R, Gamma_dep=Gamma_dep,
                           delta_0=sigma_eq if delta_0 is None else delta_0)


def test_bath_config_field_and_validation():
    c = BathConfig.build(1, (0.5, -0.5), A_g=2.0, carbon_couplings=(0.3, 0.1))
    assert c.h == pytest.approx(2.0 + 0.15 - 0.05)
    assert c.projections == (1.0, 0.5, -0.5)
    with pytest.raises(ValueError):
        BathConfig.build(2, ())
    with pytest.raises(ValueError):
        BathConfig.build(None, (1.0,), carbon_couplings=(0.1,))
    with pytest.raises(ValueError):
        BathConfig.build(None, (0.5,))


def test_narrowing_params_derived_quantities():
    p = NarrowingParams(N=100, A_par=0.2, R=3.0, Gamma_dep=1.0, delta_0=2.0)
    assert p.sigma_eq == pytest.approx(1.0)
    assert p.delta_s == pytest.approx(1.0)
    with pytest.raises(ValueError):
        NarrowingParams(N=0, A_par=0.1, R=1.0, Gamma_dep=1.0, delta_0=1.0)
    with pytest.raises(ValueError):
        NarrowingParams(N=10, A_par=0.1, R=-1.0, Gamma_dep=1.0, delta_0=1.0)
    with pytest.raises(ValueError):
        NarrowingParams(N=10, A_par=0.1, R=math.inf, Gamma_dep=1.0, delta_0=1.0)


def test_params_from_nv_follow_the_rate_model():
    nv = NVParams()
    p = NarrowingParams.from_nv(nv, N=400, A_par=mhz(0.05), A_perp=mhz(0.5), gamma_C=1e-3)
    c, an = chi_factors(nv), analytic_steady_state(nv)
    R = (c.chi_f_sum + c.chi_g) * mhz(0.5) ** 2 * an.P_0 * (1 - 2 * an.chi)
    assert p.R == pytest.approx(R, rel=1e-14)
    assert p.Gamma_dep == pytest.approx(1e-3 + an.chi * R, rel=1e-14)
    assert p.delta_0 == an.delta_0
    with pytest.raises(NegativeRate):
        NarrowingParams.from_nv(nv.replace(Delta=mhz(1.0)), 400, mhz(0.05), mhz(0.5))


def test_birth_death_without_drive_is_binomial():
    p = uniform_params(R=0.0)
    d = birth_death_steady(p)
    assert np.allclose(d.p, binom.pmf(np.arange(p.N + 1), p.N, 0.5), atol=1e-15)
    assert d.sigma == pytest.approx(p.sigma_eq, rel=1e-12)
    flat = birth_death_steady(uniform_params(R=1.0, Gamma_dep=1e12))
    assert flat.sigma == pytest.approx(p.sigma_eq, rel=1e-9)


def test_birth_death_detailed_balance_and_stationarity():
    p = uniform_params()
    d = birth_death_steady(p)
    assert detailed_balance_residual(p, d) < 1e-12
    G = birth_death_generator(p)
    assert np.abs(G @ d.p).max() < 1e-12 * np.abs(G).max()
    assert abs(d.p.sum() - 1) < 1e-12


@given(st.integers(2, 200), st.floats(0.01, 1.0), st.floats(0.0, 1e4), st.floats(1e-3, 1e2),
       st.floats(0.01, 10.0))
@settings(max_examples=40, deadline=None)
def test_birth_death_balance_holds_for_any_parameters(N, A_par, R, gamma, d0):
    p = NarrowingParams(N=N, A_par=A_par, R=R, Gamma_dep=gamma, delta_0=d0)
    d = birth_death_steady(p)
    assert abs(d.p.sum() - 1) < 1e-12 and np.all(d.p >= 0)
    assert detailed_balance_residual(p, d) < 1e-11
    assert d.sigma <= p.sigma_eq * (1 + 1e-9)


def test_birth_death_needs_depolarization_when_the_rate_vanishes():
    p = NarrowingParams(N=10, A_par=0.1, R=1.0, Gamma_dep=0.0, delta_0=0.3)
    with pytest.raises(GridResolutionError):
        birth_death_steady(p)


def test_birth_death_matches_continuum_form_on_lattice():
    p = uniform_params(N=40, R=1e3, Gamma_dep=1.0)
    bd = birth_death_steady(p)
    assert bd.sigma / p.sigma_eq < 1.0
    assert sup_norm_deviation(bd, continuum_on_lattice(p)) < 0.02


def test_continuum_consistency_improves_with_n():
    def deviation(N):
        p = uniform_params(N=N, A_par=2.0 / math.sqrt(N), R=1e3, Gamma_dep=1.0, delta_0=1.0)
        return sup_norm_deviation(birth_death_steady(p), continuum_on_lattice(p))

    assert deviation(80) / deviation(20) == pytest.approx(0.5, rel=0.3)


def test_analytic_distribution_limits():
    p = uniform_params(R=0.0)
    assert analytic_distribution(p).sigma == pytest.approx(p.sigma_eq, rel=1e-6)
    q = NarrowingParams(N=400, A_par=0.05, R=1e4, Gamma_dep=1.0, delta_0=0.5)
    peak = continuum_density(q, 0.0)
    assert peak == pytest.approx(1 + q.delta_0 ** 2 / q.delta_s ** 2, rel=1e-3)
    with pytest.raises(GridResolutionError):
        analytic_distribution(q.replace(Gamma_dep=0.0))


def test_analytic_grid_resolves_the_peak():
    q = NarrowingParams(N=400, A_par=0.05, R=1e4, Gamma_dep=1.0, delta_0=0.5)
    d = analytic_distribution(q)
    assert d.h.min() == pytest.approx(-6 * q.sigma_eq) and d.h.max() == pytest.approx(6 * q.sigma_eq)
    near = np.abs(d.h) < 5 * q.delta_s
    assert np.diff(d.h[near]).max() <= q.delta_s / 10


def test_analytic_matches_birth_death_when_lattice_is_fine():
    N = 2000
    p = uniform_params(N=N, A_par=2.0 / math.sqrt(N), R=1.0, Gamma_dep=0.01, delta_0=1.0)
    assert p.delta_s > 2 * p.A_par
    ratio_bd = birth_death_steady(p).sigma / p.sigma_eq
    ratio_an = analytic_distribution(p).sigma / p.sigma_eq
    assert ratio_an == pytest.approx(ratio_bd, rel=0.05)


def test_narrowing_never_improves_with_more_depolarization():
    p = uniform_params()
    ratios = [birth_death_steady(p.replace(Gamma_dep=g)).sigma / p.sigma_eq
              for g in np.geomspace(0.1, 1e4, 5)]
    assert np.all(np.diff(ratios) >= 0)
    an = [analytic_distribution(p.replace(Gamma_dep=g)).sigma / p.sigma_eq
          for g in np.geomspace(0.1, 1e4, 5)]
    assert np.all(np.diff(an) >= -1e-12)


def test_narrowing_metrics_flags():
    p = uniform_params(R=0.0)
    gauss = narrowing_metrics(birth_death_steady(p), p)
    assert gauss.ratio == pytest.approx(1.0, rel=1e-12) and not gauss.narrowed
    spike = FieldDistribution(np.array([-1.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0]))
    rep = narrowing_metrics(spike, p)
    assert rep.ratio == 0.0 and rep.narrowed
    assert "ratio=0" in rep.as_text()


def test_field_distribution_validation_and_moments():
    d = FieldDistribution(np.array([-1.0, 1.0]), np.array([1.0, 3.0]))
    assert d.mean == pytest.approx(0.5) and d.sigma == pytest.approx(math.sqrt(0.75))
    with pytest.raises(ValueError):
        FieldDistribution(np.array([0.0, 1.0]), np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        FieldDistribution(np.array([0.0]), np.array([0.0]))


def test_total_variation_and_sup_norm():
    a = FieldDistribution(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    b = FieldDistribution(np.array([2.0, 3.0]), np.array([1.0, 1.0]))
    assert total_variation(a, a) == 0.0
    assert total_variation(a, b) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        sup_norm_deviation(a, b)


def test_master_equation_trivial_chains():
    res = configuration_master_equation(lambda c, k, d: 1.0, (1.0,))
    assert res.populations == pytest.approx(np.full(3, 1 / 3), abs=1e-14)
    res = configuration_master_equation(lambda c, k, d: 0.2, (0.5, 0.5, 1.0))
    assert res.populations == pytest.approx(np.full(12, 1 / 12), abs=1e-14)
    with pytest.raises(NegativeRate):
        configuration_master_equation(lambda c, k, d: -1.0, (0.5,))
    with pytest.raises(UseKMC):
        enumerate_configs((0.5,) * 18)


def test_master_equation_lumps_to_birth_death():
    p = uniform_params(N=8, A_par=0.3, R=50.0, Gamma_dep=0.5, delta_0=0.4)
    res = configuration_master_equation(lambda c, k, d: float(p.flip_rate(p.A_par * sum(c))),
                                        (0.5,) * p.N)
    M = np.array([sum(c) for c in res.configs])
    lumped = np.array([res.populations[M == m].sum() for m in np.arange(-4, 5)])
    assert np.allclose(lumped, birth_death_steady(p).p, atol=1e-12)


def test_master_equation_time_evolution_conserves_probability():
    p = uniform_params(N=6, A_par=0.3, R=50.0, Gamma_dep=0.5, delta_0=0.4)
    rate = lambda c, k, d: float(p.flip_rate(p.A_par * sum(c)))  # noqa: E731
    res = configuration_master_equation(rate, (0.5,) * p.N, times=[0.0, 0.01, 0.1, 1.0, 50.0])
    assert np.allclose(res.populations.sum(axis=1), 1.0, atol=1e-12)
    steady = configuration_master_equation(rate, (0.5,) * p.N).populations
    assert np.allclose(res.populations[-1], steady, atol=1e-8)


def test_nitrogen_chain_cools_under_cpt():
    nv, site = NVParams(), NitrogenSite()

    def rate(c, k, d):
        p_ey = populations(nv_steady_state(nv, nv.omega_e + site.A_g * c[0]))["Ey"]
        return hyperfine_rates(nv, site, p_ey)

    res = configuration_master_equation(rate, (1.0,))
    assert res.populations.sum() == pytest.approx(1.0, abs=1e-12)
    assert res.populations[1] > 1 / 3
    chain = nitrogen_chain([rate((m,), 0, 1) for m in (-1, 0, 1)])
    assert np.allclose(chain.populations, res.populations, atol=1e-12)
    assert chain.narrowing_time > 0 and chain.relaxation_time > 0


def test_kmc_zero_rates_stay_put():
    provider = ChainRates(lambda c, k, d: 0.0, (0.5, 0.5), (1.0, 1.0))
    res = kmc_sample(provider, 2, seed=1, horizon=10.0, initial=(0.5, -0.5))
    assert all(res.absorbed)
    assert all(np.array_equal(c, [0.5, -0.5]) for c in res.final_configs)
    assert res.histogram.h.tolist() == [0.0]


def test_kmc_is_deterministic_and_thread_independent():
    provider = UniformBathRates(uniform_params(N=20))
    a = kmc_sample(provider, 3, seed=11, max_events=2000, record=50)
    b = kmc_sample(provider, 3, seed=11, max_events=2000, record=50)
    c = kmc_sample(provider, 3, seed=11, max_events=2000, record=50, threads=2)
    d = kmc_sample(provider, 3, seed=12, max_events=2000, record=50)
    assert a.first_events == b.first_events == c.first_events
    assert np.array_equal(a.histogram.p, c.histogram.p) and np.array_equal(a.times, c.times)
    assert a.first_events != d.first_events
    with pytest.raises(ValueError):
        kmc_sample(provider, 1, seed=1, max_events=None)


def test_kmc_equilibrium_width():
    p = uniform_params(N=40, R=0.0, Gamma_dep=1.0)
    res = kmc_sample(UniformBathRates(p), 4, seed=3, max_events=250_000, burn_in=1000)
    assert res.histogram.sigma == pytest.approx(p.sigma_eq, rel=0.03)


def test_kmc_matches_birth_death_for_narrowing_profile():
    p = uniform_params(N=20, R=20.0, Gamma_dep=1.0)
    res = kmc_sample(UniformBathRates(p), 4, seed=5, max_events=50_000, burn_in=500)
    assert total_variation(res.histogram, birth_death_steady(p)) < 0.03


def test_generic_chain_provider_matches_master_equation():
    couplings = (0.7, 0.3)
    spins = (1.0, 0.5)
    rate = lambda c, k, d: 1.0 + 0.5 * (c[0] + d) ** 2 + 0.2 * k  # noqa: E731
    provider = ChainRates(rate, spins, couplings)
    res = kmc_sample(provider, 4, seed=2, max_events=40_000, burn_in=100)
    me = configuration_master_equation(rate, spins)
    h = {}
    for c, pr in zip(me.configs, me.populations):
        key = round(float(np.dot(couplings, c)), 9)
        h[key] = h.get(key, 0.0) + pr
    ref = FieldDistribution(np.array(sorted(h)), np.array([h[k] for k in sorted(h)]))
    assert total_variation(res.histogram, ref) < 0.03


def test_optimal_narrowing_scan_is_unimodal_and_tracks_depolarization():
    nv = NVParams()
    grid = mhz(np.geomspace(0.01, 80, 60))
    rates = (1e-6, 1e-8, 1e-10)  # 1/us
    opt = [optimal_narrowing(nv, 400, mhz(0.05), mhz(0.5), g, grid) for g in rates]
    for o in opt:
        assert o.is_unimodal()
        assert 0 < o.ratio_min < 1
    d0 = [o.delta_0_opt for o in opt]
    assert d0[0] > d0[1] > d0[2]
    assert opt[0].ratio_min > opt[1].ratio_min > opt[2].ratio_min
    with pytest.raises(ValueError):
        optimal_narrowing(nv.replace(xi_perp=mhz(0.1)), 400, mhz(0.05), mhz(0.5), 1e-10, grid)
