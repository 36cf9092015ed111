import json
import math

import numpy as np
import pytest

from dinfty.cli import main
from dinfty.experiment import (
    ConfigError,
    ExperimentConfig,
    TrialResult,
    fit_rate,
    format_csv,
    load_json,
    medians_by_n,
    read_csv,
    run_experiment,
)


def uniform_square():
    return {"domain": [[[0, 0], [1, 1]]], "kind": "uniform"}


@pytest.mark.parametrize("d", [2, 3, 4])
def test_fit_recovers_synthetic_rates(d):
    ns = [2**k for k in range(8, 17)]
    c = 0.75 if d == 2 else 1 / d
    theta = 0.5 if d == 2 else 1 / d
    med = [(n, 0.7 * math.log(n) ** c * n**-theta) for n in ns]
    fit = fit_rate(med, d)
    assert abs(fit.residual_slope) < 1e-12
    assert fit.exponent == pytest.approx(-theta)
    assert fit.intercept == pytest.approx(math.log(0.7))
    slow = [(n, v * n**0.1) for n, v in med]
    assert fit_rate(slow, d).residual_slope == pytest.approx(0.1)


def test_fit_rejects_short_or_bad_input():
    with pytest.raises(ValueError):
        fit_rate([(10, 1.0), (20, 0.5)], 2)
    with pytest.raises(ValueError):
        fit_rate([(10, 1.0), (20, 0.0), (40, 0.3)], 2)


def test_csv_round_trip(tmp_path):
    rows = [TrialResult(64, 1, 0.25, 0.1, False, 1.5), TrialResult(32, 2, 1 / 3, 0.2, True, 0.0)]
    p = tmp_path / "t.csv"
    p.write_text(format_csv(rows))
    back = read_csv(p)
    assert [(r.n, r.seed, r.upper, r.lower, r.escalated) for r in back] == [
        (32, 2, 1 / 3, 0.2, True),
        (64, 1, 0.25, 0.1, False),
    ]
    assert medians_by_n(back) == [(32, 1 / 3), (64, 0.25)]


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"density": uniform_square(), "n_schedule": [64, 32]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"density": uniform_square(), "n_schedule": [32], "alpha": 2})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"density": uniform_square(), "n_schedule": [32], "bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"density": uniform_square(), "n_schedule": [32], "scheme": "nope"})


def test_json_errors_report_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "a": 1,\n  "b": \n}')
    with pytest.raises(ConfigError, match="line 4, column 1"):
        load_json(p)


def test_density_path_is_resolved_relative_to_config(tmp_path):
    (tmp_path / "dens.json").write_text(json.dumps(uniform_square()))
    cfg_path = tmp_path / "exp.json"
    cfg_path.write_text(json.dumps({"density": "dens.json", "n_schedule": [16, 32, 64]}))
    cfg = ExperimentConfig.load(cfg_path)
    assert cfg.density["kind"] == "uniform"


def test_seeds():
    cfg = ExperimentConfig(uniform_square(), [10, 20], trials=3, base_seed=5)
    assert cfg.seed_for(1, 2) == 1007
    cfg = ExperimentConfig(uniform_square(), [10, 20], trials=2, seeds=[9, 8])
    assert cfg.seed_for(1, 1) == 8


def test_experiment_writes_outputs(tmp_path):
    cfg = ExperimentConfig(uniform_square(), [64, 128, 256], trials=2, out=str(tmp_path / "r"), record_timing=False)
    res = run_experiment(cfg)
    assert res.failures == 0
    rows = read_csv(tmp_path / "r" / "trials.csv")
    assert len(rows) == 6
    assert all(r.lower <= r.upper for r in rows)
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["rate_fit"]["log_correction_exponent"] == 0.75
    assert (tmp_path / "r" / "plot_medians.py").exists()


def test_cli_sample_is_reproducible(tmp_path, capsys):
    cfg = tmp_path / "d.json"
    cfg.write_text(json.dumps(uniform_square()))
    assert main(["sample", "--config", str(cfg), "--n", "20", "--seed", "4", "--out", str(tmp_path / "a.csv")]) == 0
    assert main(["sample", "--config", str(cfg), "--n", "20", "--seed", "4", "--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_cli_transport_match_and_fit(tmp_path, capsys):
    cfg = tmp_path / "d.json"
    cfg.write_text(json.dumps(uniform_square()))
    assert main(["transport", "--config", str(cfg), "--n", "300", "--scheme", "highd"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["certified_bound"] > 0
    assert main(["match", "--config", str(cfg), "--n", "100"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["n"] == 100 and out["radius"] <= out["displacement"]
    exp = tmp_path / "e.json"
    exp.write_text(json.dumps({"density": "d.json", "n_schedule": [64, 128, 256], "trials": 1}))
    assert main(["experiment", "--config", str(exp), "--out", str(tmp_path / "o"), "--no-timing"]) == 0
    first = (tmp_path / "o" / "trials.csv").read_bytes()
    assert main(["experiment", "--config", str(exp), "--out", str(tmp_path / "o2"), "--no-timing"]) == 0
    assert (tmp_path / "o2" / "trials.csv").read_bytes() == first
    assert main(["fit", "--csv", str(tmp_path / "o" / "trials.csv"), "--dim", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["log_correction_exponent"] == 0.75


def test_cli_density_to_density(tmp_path, capsys):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    a.write_text(json.dumps({"domain": [[[0, 0], [1, 1]]], "kind": "grid", "lambda": 2, "values": [[1.0, 1.1], [1.0, 0.9]]}))
    b.write_text(json.dumps(uniform_square()))
    assert main(["transport", "--config", str(a), "--target", str(b)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert 0 < out["certified_bound"] < math.sqrt(2)


def test_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["sample", "--config", str(bad), "--n", "3"]) == 2
    assert "line 1" in capsys.readouterr().err
    assert main(["sample", "--config", str(tmp_path / "missing.json"), "--n", "3"]) == 2
    cube = tmp_path / "c.json"
    cube.write_text(json.dumps({"domain": [[[0, 0, 0], [1, 1, 1]]], "kind": "uniform"}))
    assert main(["match", "--config", str(cube), "--n", "5"]) == 2
    assert main(["experiment", "--config", str(cube)]) == 2


def test_numbers_are_finite(tmp_path):
    cfg = ExperimentConfig(
        {"domain": [[[0, 0, 0], [1, 1, 1]]], "kind": "uniform"}, [512, 1024, 2048], out=str(tmp_path)
    )
    res = run_experiment(cfg, write=False)
    assert all(np.isfinite([r.upper, r.lower]).all() for r in res.rows)
    assert res.fit is not None


def test_fit_special_inputs():
    ns = [2**k for k in range(8, 17)]
    x = np.log(ns)
    # constant values: the slope is that of -(3/4) ln ln n against ln n
    fit = fit_rate([(n, 1.0) for n in ns], 2)
    assert fit.exponent == pytest.approx(np.polyfit(x, -0.75 * np.log(x), 1)[0])
    fit = fit_rate([(n, n**-0.5) for n in ns], 2)
    assert fit.residual_slope == pytest.approx(-np.polyfit(x, 0.75 * np.log(x), 1)[0])
    fit = fit_rate([(n, math.log(n) ** (1 / 3) * n ** (-1 / 3)) for n in ns], 3)
    assert abs(fit.exponent + 1 / 3) < 1e-10


def test_smoke_single_small_run(tmp_path):
    cfg = ExperimentConfig(uniform_square(), [4], trials=1, out=str(tmp_path / "s"))
    res = run_experiment(cfg)
    assert res.fit is None and res.failures == 0
    assert len(read_csv(tmp_path / "s" / "trials.csv")) == 1
    assert (tmp_path / "s" / "summary.json").exists()
