import json

import numpy as np
import pandas as pd
import pytest

from conftest import ROOT, SCENARIOS
from swirs.config.scenario import locate, load_scenario, parse_scenario
from swirs.errors import EXIT_CONFIG, ConfigError, DomainError
from swirs.main import main
from swirs.services.model_service import ControlTrajectory, State, integrate
from swirs.services.scenario_service import (
    SWEEP_COLUMNS,
    RunSummary,
    ScenarioService,
    calibrate_seed,
    run_scenario,
    run_sweep,
    seeded_state,
)

PARAMS = """\
[params]
k = 0.3
beta_s1 = 0.35
beta_s2 = 0.45
beta_w1 = 0.25
beta_w2 = 0.35
sigma1 = 0.05
sigma2 = 0.03
sigma3 = 0.01
gamma = 0.2
epsilon = 0.5
"""

INITIAL = """\
[initial]
s = 0.9965
w = 0.0005
i1 = 0.0015
i2 = 0.0015
r = 0.0
"""


def scenario(mode: str, grid: str = "t_end = 20.0\nn_steps = 1000", extra: str = "", params: str = PARAMS) -> str:
    return f'name = "unit"\nmode = "{mode}"\n\n{params}\n[grid]\n{grid}\n\n{INITIAL}\n{extra}'


def test_parse_round_trip():
    cfg = parse_scenario(scenario("simulate"))
    assert cfg.params.k == 0.3
    assert cfg.grid.n_steps == 1000
    assert cfg.initial.s == 0.9965
    assert cfg.costs.h1.coef == 20.0


def test_missing_rate_reports_field_and_line():
    text = scenario("simulate", params=PARAMS.replace("gamma = 0.2\n", ""))
    with pytest.raises(ConfigError) as info:
        parse_scenario(text)
    assert info.value.field == "params.gamma"
    assert info.value.code == EXIT_CONFIG
    assert info.value.line == text.splitlines().index("[params]") + 1


def test_bad_value_points_at_its_line():
    text = scenario("simulate", params=PARAMS.replace("k = 0.3", "k = -0.3"))
    with pytest.raises(ConfigError) as info:
        parse_scenario(text)
    assert info.value.field == "params.k"
    assert info.value.line == text.splitlines().index("k = -0.3") + 1
    assert str(info.value).startswith(f"line {info.value.line}: ")


def test_toml_syntax_error_has_a_line():
    text = 'name = "unit"\nmode = "simulate"\n[params\nk = 1\n'
    with pytest.raises(ConfigError) as info:
        parse_scenario(text)
    assert info.value.line == 3


def test_mode_requirements():
    text = 'name = "unit"\nmode = "network"\n\n' + PARAMS + "\n[grid]\nt_end = 5.0\n"
    with pytest.raises(ConfigError, match="requires a \\[network\\] table"):
        parse_scenario(text)
    with pytest.raises(ConfigError, match="requires a \\[sweep\\] table"):
        parse_scenario(scenario("sweep"))


def test_sweep_validation():
    bad_steps = '[sweep.x]\nname = "k"\nmin = 0.1\nmax = 0.5\nsteps = 1\n[sweep.y]\nname = "sigma3"\nmin = 0.01\nmax = 0.1\nsteps = 2\n'
    with pytest.raises(ConfigError) as info:
        parse_scenario(scenario("sweep", extra=bad_steps))
    assert info.value.field == "sweep.x.steps"
    assert info.value.line == scenario("sweep", extra=bad_steps).splitlines().index("steps = 1") + 1

    same_axis = bad_steps.replace("steps = 1", "steps = 2").replace('"sigma3"', '"k"')
    with pytest.raises(ConfigError, match="both sweep axes"):
        parse_scenario(scenario("sweep", extra=same_axis))


def test_locate_handles_array_tables():
    text = (SCENARIOS / "experiment3.toml").read_text(encoding="utf-8")
    lines = text.splitlines()
    second = [n for n, line in enumerate(lines) if line.strip() == "[[network.initial]]"][1]
    # s, w, i1 follow the header
    assert locate(text, ("network", "initial", 1, "i1")) == second + 4
    assert locate(text, ("name",)) == lines.index('name = "experiment3"') + 1


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_scenario(tmp_path / "missing.toml")
    assert info.value.field == "config"


def test_bundled_scenarios_load():
    paths = sorted(SCENARIOS.glob("*.toml"))
    assert len(paths) >= 6
    for path in paths:
        cfg = load_scenario(path)
        assert cfg.name == path.stem


def test_simulate_run_writes_csv_and_summary(tmp_path):
    code, summary = run_scenario(parse_scenario(scenario("simulate")), tmp_path)
    assert code == 0
    assert summary.files == ["unit.csv", "unit_summary.json"]
    frame = pd.read_csv(tmp_path / "unit.csv")
    assert list(frame.columns) == ["t", "S", "W", "I1", "I2", "R", "u1", "u2", "u3"]
    assert len(frame) == 1001
    assert summary.lyapunov is not None
    stored = json.loads((tmp_path / "unit_summary.json").read_text(encoding="utf-8"))
    assert stored["simulation"]["final_state"]["I2"] == pytest.approx(frame["I2"].iloc[-1], rel=1e-12)


def test_optimize_run_writes_both_series(tmp_path):
    cfg = parse_scenario(scenario("optimize", grid="t_end = 5.0\nn_steps = 250"))
    code, summary = run_scenario(cfg, tmp_path)
    assert code in (0, 3)
    assert summary.status == ("ok" if summary.converged else "not_converged")
    controlled = pd.read_csv(tmp_path / "unit_controlled.csv")
    assert list(controlled.columns)[-3:] == ["phi1", "phi2", "phi3"]
    assert (tmp_path / "unit_uncontrolled.csv").exists()
    assert summary.controlled.costs.total <= summary.uncontrolled.costs.total + 1e-9


def test_stability_run(tmp_path):
    code, summary = run_scenario(load_scenario(SCENARIOS / "stability_exp1.toml"), tmp_path)
    assert code == 0
    reports = json.loads((tmp_path / "stability_exp1_stability.json").read_text(encoding="utf-8"))
    assert set(reports) == {"E1", "E2"}
    assert summary.stability["E1"]["classification"] == "unstable"
    assert not summary.lyapunov["satisfied"]


def test_network_and_bound_runs(tmp_path):
    code, summary = run_scenario(load_scenario(SCENARIOS / "experiment3.toml"), tmp_path)
    assert code == 0
    frame = pd.read_csv(tmp_path / "experiment3_network.csv")
    assert frame.shape == (3001, 1 + 2 * 5 + 2 * 3)
    assert len(summary.clusters.final_states) == 2

    code, summary = run_scenario(load_scenario(SCENARIOS / "experiment3_bound.toml"), tmp_path)
    assert code == 0
    assert summary.bound["U"] == pytest.approx(-0.85)
    assert summary.bound["target"] == 1
    assert (tmp_path / "experiment3_bound_suppression.csv").exists()


def test_summary_schema_matches_model():
    schema = json.loads((ROOT / "schemas" / "summary.schema.json").read_text(encoding="utf-8"))
    generated = RunSummary.model_json_schema()
    assert set(schema["properties"]) == set(generated["properties"])
    assert set(schema["required"]) == set(generated["required"])


def _sweep_text() -> str:
    axes = ('[sweep.x]\nname = "k"\nmin = 0.2\nmax = 0.4\nsteps = 2\n'
            '[sweep.y]\nname = "sigma3"\nmin = 0.01\nmax = 0.05\nsteps = 2\n')
    return scenario("sweep", grid="t_end = 5.0\nn_steps = 200", extra=axes)


def test_sweep_rows_and_ordering():
    frame = run_sweep(parse_scenario(_sweep_text()))
    assert list(frame.columns) == ["k", "sigma3", *SWEEP_COLUMNS]
    np.testing.assert_allclose(frame[["k", "sigma3"]].to_numpy(),
                               [[0.2, 0.01], [0.2, 0.05], [0.4, 0.01], [0.4, 0.05]])
    assert not frame["I_total_uncontrolled"].isna().any()
    assert np.all(frame["I_total_controlled"] <= frame["I_total_uncontrolled"] + 1e-12)
    assert np.all(frame["I_total_fixed_policy"] <= frame["I_total_uncontrolled"])


def test_sweep_in_worker_processes_matches_serial():
    cfg = parse_scenario(_sweep_text())
    serial = run_sweep(cfg)
    parallel = run_sweep(cfg, workers=2)
    pd.testing.assert_frame_equal(serial, parallel)


def test_seeded_state_scales_the_seed(exp1_initial):
    state = seeded_state(exp1_initial, 0.007)
    assert state.s == pytest.approx(0.993)
    assert state.i1 == pytest.approx(2 * exp1_initial.i1)
    with pytest.raises(DomainError):
        seeded_state(State(s=1.0, w=0.0, i1=0.0, i2=0.0, r=0.0), 0.01)


def test_calibrate_recovers_a_known_seed():
    # early in the outbreak I2(T) grows with the seed
    cfg = parse_scenario(scenario("simulate", grid="t_end = 10.0\nn_steps = 500"))
    reached = integrate(cfg.initial, ControlTrajectory.zeros(cfg.grid), cfg.params, cfg.grid).final.i2
    result = calibrate_seed(cfg, reached, bracket=(1e-4, 0.01))
    assert result["achieved"] == pytest.approx(reached, abs=1e-9)
    assert result["seed"] == pytest.approx(0.0035, rel=1e-4)

    with pytest.raises(DomainError):
        calibrate_seed(cfg, 2.0)


def test_scenario_service_calibrate(tmp_path):
    cfg = parse_scenario(scenario("simulate"))
    result = ScenarioService().calibrate(cfg, tmp_path, 2.0)
    assert not result["success"]
    assert result["type"] == "DomainError"


@pytest.fixture
def cli_env(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("SWIRS_FILE_LOGGING", "false")
    monkeypatch.setenv("SWIRS_OUTPUT_DIR", str(tmp_path / "output"))
    return tmp_path


def test_main_exit_codes(cli_env):
    good = cli_env / "good.toml"
    good.write_text(scenario("simulate"), encoding="utf-8")
    assert main(["simulate", "--config", str(good), "--out", str(cli_env / "run")]) == 0
    assert (cli_env / "run" / "unit.csv").exists()

    bad = cli_env / "bad.toml"
    bad.write_text(scenario("simulate", params=PARAMS.replace("gamma = 0.2\n", "")), encoding="utf-8")
    assert main(["simulate", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(cli_env / "absent.toml")]) == EXIT_CONFIG


def test_main_rejects_bad_worker_setting(cli_env, monkeypatch):
    monkeypatch.setenv("SWIRS_WORKERS", "many")
    good = cli_env / "good.toml"
    good.write_text(scenario("simulate"), encoding="utf-8")
    assert main(["simulate", "--config", str(good)]) == EXIT_CONFIG


def test_main_rejects_zero_workers(cli_env, monkeypatch):
    monkeypatch.setenv("SWIRS_WORKERS", "2")
    sweep = cli_env / "sweep.toml"
    sweep.write_text(_sweep_text(), encoding="utf-8")
    assert main(["sweep", "--config", str(sweep), "--workers", "0"]) == EXIT_CONFIG
    assert not (cli_env / "output" / "unit_sweep.csv").exists()


def test_main_writes_schema(cli_env):
    target = cli_env / "schema.json"
    assert main(["schema", "--out", str(target)]) == 0
    assert json.loads(target.read_text(encoding="utf-8"))["title"] == "RunSummary"
