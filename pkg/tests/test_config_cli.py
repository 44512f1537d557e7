import json
import math
import subprocess
import sys

import numpy as np
import pytest
from scipy.stats import binom

from hfine import commands
from hfine.cli import main
from hfine.config import (
    bath_settings,
    carbon_sites,
    gamma_N,
    load_config,
    nitrogen_site,
    nv_params,
    parse_config,
    shipped_scenarios,
)
from hfine.csvio import Column, Table, read_table
from hfine.errors import ConfigError, NegativeRate
from hfine.nv import NVParams, nv_steady_state, populations
from hfine.units import mhz, per_ns, per_s

SMALL = """
[nv]
omega_A_MHz = 2.0
omega_E_MHz = 8.0

[[carbon]]
tensor_MHz = [[0.1, 0.0, 0.05], [0.0, 0.1, 0.0], [0.05, 0.0, 0.3]]

[bath]
N = 60
A_par_MHz = 0.05
A_perp_MHz = 0.5
gamma_C_per_s = 0.025

[run]
seed = 3
steady_points = 21
n14_omega_A_points = 6
cpt_omega_A_re_MHz = [8.0]
cpt_omega_re_span_MHz = 0.6
narrowing_omega_A_points = 12
kmc_trajectories = 2
kmc_events = 3000
kmc_burn_in = 100
squeeze_spins = 10
validate_oracles = false
"""


def write(tmp_path, text, name="scenario.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


# --- schema ----------------------------------------------------------------------


def test_defaults_convert_units():
    cfg = parse_config("")
    nv = nv_params(cfg)
    assert nv.omega_A == pytest.approx(mhz(2.0)) and nv.omega_e == pytest.approx(mhz(0.18))
    assert nv.gamma == pytest.approx(per_ns(1 / 12)) and nv.gamma_s1 == nv.gamma
    assert nv.gamma_s2 == pytest.approx(nv.gamma / 120) and nv.gamma_ce == pytest.approx(nv.gamma / 800)
    N, A_par, A_perp, gamma_C = bath_settings(cfg)
    assert (N, A_par, gamma_C) == (400, pytest.approx(mhz(0.025)), pytest.approx(per_s(2.5e-2)))
    assert nitrogen_site(cfg).A_g == pytest.approx(mhz(2.2)) and gamma_N(cfg) == 0.0
    assert carbon_sites(cfg) == []


@pytest.mark.parametrize("text", [
    "[nv]\nomega_A_mhz = 2.0\n",
    "[bath]\nsize = 3\n",
    "[unknown]\nx = 1\n",
    "[nv]\nomega_A_MHz = nan\n",
    "[nv]\nomega_A_MHz = inf\n",
    "[[carbon]]\n",
    "[[carbon]]\ntensor_MHz = [[1, 0, 0], [0, 1, 0], [0, 0, 1]]\nposition_nm = [0.1, 0.2, 0.3]\n",
    "[[carbon]]\ntensor_MHz = [[1, 0], [0, 1]]\n",
    "[run]\nthreads = 0\n",
    "[run]\ncpt_C = -1\n",
    "not toml at all = = =",
])
def test_schema_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_negative_rates_are_reported_as_negative_rate():
    with pytest.raises(NegativeRate):
        nv_params(parse_config("[nv]\ngamma_ce_per_ns = -0.001\n"))
    with pytest.raises(NegativeRate):
        bath_settings(parse_config("[bath]\ngamma_C_per_s = -1\n"))


def test_digest_ignores_key_order_and_threads():
    a = parse_config("[nv]\nomega_A_MHz = 3.0\nomega_E_MHz = 1.0\n[run]\nthreads = 1\n")
    b = parse_config("[run]\nthreads = 4\n[nv]\nomega_E_MHz = 1.0\nomega_A_MHz = 3.0\n")
    c = parse_config("[nv]\nomega_A_MHz = 3.5\nomega_E_MHz = 1.0\n")
    assert a.digest() == b.digest() != c.digest()


def test_carbon_sites_from_tensor_and_position():
    cfg = parse_config("[[carbon]]\nposition_nm = [0.0, 0.0, 0.5]\n"
                       "[[carbon]]\ntensor_MHz = [[0, 0, 0], [0, 0, 0], [0, 0, 0.7]]\n")
    first, second = carbon_sites(cfg)
    assert np.allclose(np.abs(first.frame[2]), [0, 0, 1])
    assert second.a_z == pytest.approx(mhz(0.7))


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")


def test_shipped_scenarios_parse():
    names = shipped_scenarios()
    assert {"default", "optimal_narrowing", "strain_dephasing"} <= set(names)
    for text in names.values():
        parse_config(text)


# --- csv -------------------------------------------------------------------------


def test_table_rejects_ragged_rows_and_separator_text(tmp_path):
    with pytest.raises(ValueError):
        Table("t", (Column("a", "1", "x"),), [(1.0, 2.0)])
    from hfine.csvio import write_table
    bad = Table("t", (Column("a", "-", "x"),), [("x,y",)])
    with pytest.raises(ValueError):
        write_table(tmp_path / "t.csv", bad, "cmd", "h", 1, "v", "r")


# --- cli -------------------------------------------------------------------------


def run_cli(tmp_path, command, text=SMALL, out="out", extra=()):
    cfg = write(tmp_path, text)
    out_dir = tmp_path / out
    code = main([command, "--config", str(cfg), "--out", str(out_dir), *extra])
    return code, out_dir


def csv_bytes(out_dir):
    return {p.name: p.read_bytes() for p in sorted(out_dir.glob("*.csv"))}


def test_headers_and_manifest(tmp_path):
    code, out = run_cli(tmp_path, "squeezing-demo")
    assert code == 0
    header, names, rows = read_table(out / "squeezing.csv")
    manifest = [json.loads(line) for line in (out / "manifest.jsonl").read_text().splitlines()]
    assert len(manifest) == 1 and manifest[0]["exit_code"] == 0
    entry = manifest[0]
    assert entry["outputs"] == ["squeezing.csv"] and entry["seed"] == 3
    assert f"# run_id: {entry['run_id']} (see manifest.jsonl)" in header
    assert f"# config_hash: {entry['config_hash']}" in header
    assert "# column h_MHz [MHz]: longitudinal field coupling * M" in header
    assert names == ["M", "h_MHz", "Sz", "H_eff_MHz", "curvature_per_MHz"]
    assert len(rows) == 11


@pytest.mark.parametrize("command", ["steady-scan", "narrowing", "cpt-scan"])
def test_reruns_and_thread_counts_are_byte_identical(tmp_path, command):
    code1, out1 = run_cli(tmp_path, command, out="a")
    code2, out2 = run_cli(tmp_path, command, out="b")
    code3, out3 = run_cli(tmp_path, command, out="c", extra=("--threads", "2"))
    assert code1 == code2 == code3 == 0
    assert csv_bytes(out1) == csv_bytes(out2) == csv_bytes(out3)
    assert csv_bytes(out1)


def test_seed_override_changes_kmc_only(tmp_path):
    _, a = run_cli(tmp_path, "narrowing", out="a")
    _, b = run_cli(tmp_path, "narrowing", out="b", extra=("--seed", "99"))
    ca, cb = csv_bytes(a), csv_bytes(b)
    strip = lambda blob: [ln for ln in blob.decode().splitlines() if not ln.startswith("#")]  # noqa: E731
    assert strip(ca["narrowing_birth_death.csv"]) == strip(cb["narrowing_birth_death.csv"])
    assert strip(ca["narrowing_kmc.csv"]) != strip(cb["narrowing_kmc.csv"])


def test_exit_code_config_error(tmp_path, capsys):
    code, out = run_cli(tmp_path, "steady-scan", text=SMALL + "\n[extra]\nkey = 1\n")
    assert code == 2 and not out.exists()
    assert "config error" in capsys.readouterr().err
    assert main(["steady-scan", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 2
    code, _ = run_cli(tmp_path, "steady-scan", extra=("--threads", "0"))
    assert code == 2


def test_exit_code_solver_error(tmp_path, capsys):
    text = SMALL.replace("[nv]\n", "[nv]\ngamma_ce_per_ns = -0.001\n")
    code, _ = run_cli(tmp_path, "steady-scan", text=text)
    assert code == 3
    assert "NegativeRate" in capsys.readouterr().err


def test_validate_fails_with_negative_rate(tmp_path, capsys):
    text = SMALL.replace("[nv]\n", "[nv]\ngamma_ce_per_ns = -0.001\n")
    code, out = run_cli(tmp_path, "validate", text=text)
    assert code == 4
    printed = capsys.readouterr().out
    assert "FAIL parameters" in printed and "NegativeRate" in printed
    _, names, rows = read_table(out / "validation.csv")
    assert rows[0][0] == "parameters" and rows[0][1] == 0.0


def test_validate_surfaces_degenerate_model(tmp_path, capsys):
    text = SMALL.replace("omega_A_MHz = 2.0\nomega_E_MHz = 8.0", "omega_A_MHz = 0.0\nomega_E_MHz = 0.0")
    code, _ = run_cli(tmp_path, "validate", text=text)
    assert code == 4
    assert "DegenerateSteadyState" in capsys.readouterr().out


def test_validate_small_scenario_passes(tmp_path):
    code, out = run_cli(tmp_path, "validate")
    _, names, rows = read_table(out / "validation.csv")
    failed = [r for r in rows if r[1] != 1.0]
    assert code == 0, failed
    assert {r[0] for r in rows} >= {"liouvillian_trace", "birth_death_detailed_balance", "kmc_determinism"}


def test_console_script_entry_point(tmp_path):
    cfg = write(tmp_path, SMALL)
    proc = subprocess.run([sys.executable, "-m", "hfine.cli", "squeezing-demo", "--config", str(cfg),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "hfine.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("hfine ")


# --- command behaviour -----------------------------------------------------------------


def small_cfg(extra=""):
    return parse_config(SMALL + extra)


def test_steady_scan_symmetric_with_minimum_at_resonance():
    cfg = small_cfg()
    scan, fit = commands.steady_scan(cfg).tables
    delta = scan.column("delta_m_MHz")
    p_ey = scan.column("P_Ey")
    assert np.allclose(delta, -delta[::-1])
    assert np.abs(p_ey - p_ey[::-1]).max() <= 1e-9 * p_ey.max()
    assert delta[np.argmin(p_ey)] == 0.0
    row = dict(zip([c.name for c in fit.columns], fit.rows[0]))
    assert row["fit_residual_rel"] < 0.10
    assert row["argmin_delta_m_MHz"] == 0.0


def test_n14_scan_tends_to_one_third_with_depolarization():
    nv, site = NVParams(), nitrogen_site(parse_config(""))
    pop, t_narrow, _ = commands.nitrogen_populations(nv, site, per_s(1e3), mhz(0.05))
    assert pop == pytest.approx(1 / 3, abs=1e-3)
    assert t_narrow > 0


def test_n14_scan_requires_nitrogen():
    with pytest.raises(ConfigError):
        commands.n14_scan(parse_config("[nitrogen]\nenabled = false\n"))


def test_cpt_without_photon_weight_keeps_the_average():
    cfg = parse_config(SMALL.replace("seed = 3", "seed = 3\ncpt_C = 0.0"))
    scan, summary, bath = commands.cpt_scan(cfg).tables
    avg, post = scan.column("fluor_avg_8MHz"), scan.column("fluor_post_8MHz")
    assert np.abs(avg - post).max() <= 1e-12
    assert np.allclose(bath.column("p_bath"), bath.column("p_postselected"), atol=1e-15)


def test_cpt_post_selection_narrows_the_dip():
    _, summary, _ = commands.cpt_scan(small_cfg()).tables
    row = summary.rows[0]
    assert row[2] < row[1]


def test_cpt_unnarrowed_bath_is_a_convolution():
    text = SMALL.replace("gamma_C_per_s = 0.025", "gamma_C_per_s = 1e12")
    cfg = parse_config(text)
    scan, summary, _ = commands.cpt_scan(cfg).tables
    x = mhz(scan.column("omega_re_MHz"))
    N, A_par = 60, mhz(0.05)
    M = np.arange(N + 1) - N / 2
    weights = binom.pmf(np.arange(N + 1), N, 0.5)
    readout = nv_params(cfg).replace(omega_A=mhz(8.0))
    cache = {}

    def p_ey(d):
        key = round(d / A_par * 2)
        if key not in cache:
            cache[key] = populations(nv_steady_state(readout, d))["Ey"]
        return cache[key]

    ref = np.array([sum(w * p_ey(om + A_par * m) for w, m in zip(weights, M) if w > 1e-16) for om in x])
    ref /= ref[-1]
    assert np.abs(scan.column("fluor_avg_8MHz") - ref).max() < 1e-9
    sigma_mhz = math.sqrt(N) * 0.05 / 2
    assert summary.rows[0][1] > 2 * sigma_mhz


def test_squeezing_trivial_and_curved_cases():
    still = parse_config(SMALL.replace("seed = 3", "seed = 3\nsqueeze_rabi_MHz = 0.0"))
    (table,) = commands.squeezing_demo(still).tables
    assert np.allclose(table.column("Sz"), -0.5, atol=1e-12)
    h_eff, h = table.column("H_eff_MHz"), table.column("h_MHz")
    assert np.allclose(h_eff, -0.5 * h, atol=1e-12)
    (table,) = commands.squeezing_demo(small_cfg()).tables
    curvature = table.column("curvature_per_MHz")[1:-1]
    assert np.abs(curvature).max() > 1e-3


def test_parallel_map_keeps_order():
    assert commands.parallel_map(lambda x: x * x, range(20), threads=3) == [x * x for x in range(20)]


def test_count_maxima_and_fwhm_helpers():
    assert commands.count_maxima([0, 1, 2, 1, 0]) == 1
    assert commands.count_maxima([0, 1, 1, 2, 3]) == 0
    assert commands.count_maxima([0, 2, 1, 3, 0]) == 2
    x = np.linspace(-500, 500, 200001)
    y = 1 - 0.5 / (1 + x ** 2)
    assert commands.dip_fwhm(x, y) == pytest.approx(2.0, rel=1e-3)
    assert math.isnan(commands.dip_fwhm(x, np.ones_like(x)))
