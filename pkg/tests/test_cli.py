import json

import pytest

from allocator.cli import PRESETS, main, resolve_config, ConfigError
from allocator.market_model import CALIBRATED_PARAMS


def run(tmp_path, *args, out="out"):
    return main([*args, "--out", str(tmp_path / out)])


def manifest(tmp_path, out="out"):
    return json.loads((tmp_path / out / "manifest.json").read_text())


def test_preset_values():
    cfg, sources, _ = resolve_config("policy", "paper")
    for k, v in CALIBRATED_PARAMS.as_dict().items():
        assert cfg[k] == v and sources[k] == "preset"
    assert cfg["gamma"] == 4.0


def test_missing_keys():
    with pytest.raises(ConfigError, match="kappa"):
        resolve_config("policy")


def test_override_recorded():
    cfg, sources, over = resolve_config("policy", "paper", flags={"gamma": "3"})
    assert cfg["gamma"] == 3.0 and sources["gamma"] == "flag"
    assert over["gamma"] == {"preset": 4.0, "flag": 3.0}


def test_seed_required():
    with pytest.raises(ConfigError, match="seed"):
        resolve_config("study", "paper")


def test_config_file_layer(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"gamma": 6, "n_paths": 12}))
    cfg, sources, over = resolve_config("study", "paper", str(f), {"seed": "3", "n_paths": "20"})
    assert cfg["gamma"] == 6.0 and over["gamma"]["config"] == 6.0
    assert cfg["n_paths"] == 20 and sources["n_paths"] == "flag"


def test_validate(capsys):
    assert main(["validate", "--preset", "paper"]) == 0
    assert "feller_margin 0.1957" in capsys.readouterr().out


def test_validate_failure(capsys):
    assert main(["validate", "--preset", "paper", "--sigma-v", "1.0"]) == 1


def test_exit_one_cases(tmp_path):
    assert run(tmp_path, "policy") == 1
    assert run(tmp_path, "study", "--preset", "paper") == 1
    assert run(tmp_path, "policy", "--preset", "paper", "--gamma", "abc") == 1
    assert run(tmp_path, "policy", "--preset", "paper", "--bogus", "1") == 1
    assert run(tmp_path, "policy", "--preset", "nope") == 1
    assert run(tmp_path, "policy", "--preset", "paper", "--format", "xml") == 1


def test_policy(tmp_path):
    assert run(tmp_path, "policy", "--preset", "paper", "--xbar", "1", "--X", "3") == 0
    m = manifest(tmp_path)
    assert m["exit_code"] == 0 and m["command"] == "policy"


def test_study_rows_and_rerun(tmp_path):
    args = ["study", "--preset", "paper", "--x0-ratios", "1,10", "--seed", "1", "--n-paths", "40"]
    assert run(tmp_path, *args) == 0
    lines = (tmp_path / "out" / "study.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[3].startswith("inf,")
    m = manifest(tmp_path)
    assert m["seed"] == 1 and m["config"]["n_paths"] == 40 and m["standard_errors"]
    # manifest round trip
    assert main(["study", "--config", str(tmp_path / "out" / "manifest.json"),
                 "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "study.csv").read_bytes() == (tmp_path / "out" / "study.csv").read_bytes()


def test_thread_count_invariance(tmp_path, monkeypatch):
    args = ["study", "--preset", "paper", "--x0-ratios", "2", "--seed", "5", "--n-paths", "30",
            "--chunk-size", "7"]
    monkeypatch.setenv("ALLOCATOR_THREADS", "1")
    assert run(tmp_path, *args, out="a") == 0
    monkeypatch.setenv("ALLOCATOR_THREADS", "3")
    assert run(tmp_path, *args, out="b") == 0
    assert (tmp_path / "a" / "study.csv").read_bytes() == (tmp_path / "b" / "study.csv").read_bytes()


def test_json_format(tmp_path):
    assert run(tmp_path, "study", "--preset", "paper", "--x0-ratios", "2", "--seed", "5",
               "--n-paths", "10", "--format", "json") == 0
    rows = json.loads((tmp_path / "out" / "study.json").read_text())
    assert len(rows) == 2


def test_numerical_failure_exit_two(tmp_path):
    code = run(tmp_path, "solve-theta-u", "--preset", "paper", "--T", "1", "--n-time", "3", "--n-state", "3",
               "--mc-paths", "20", "--seed", "1", "--tol", "0", "--max-iter", "1")
    assert code == 2
    m = manifest(tmp_path)
    assert m["exit_code"] == 2 and "converge" in m["error"]


def test_breach_threshold_exit_two(tmp_path):
    code = run(tmp_path, "study", "--preset", "paper", "--x0-ratios", "1", "--seed", "1",
               "--n-paths", "10", "--breach-threshold", "-1")
    assert code == 2


def test_solve_theta_u_report(tmp_path):
    assert run(tmp_path, "solve-theta-u", "--preset", "paper", "--gamma", "4", "--T", "1", "--n-time", "3",
               "--n-state", "5", "--mc-paths", "200", "--seed", "2") == 0
    rep = json.loads((tmp_path / "out" / "residual_report.json").read_text())
    assert {"lemma", "fixed_point", "kernel", "closed_form", "solver"} <= set(rep)
    assert (tmp_path / "out" / "theta_u.csv").exists()


@pytest.mark.parametrize("command", ["simulate", "mc-components", "hysteresis", "quantiles", "ratio-study"])
def test_other_commands(tmp_path, command):
    extra = {"simulate": ["--T", "1"], "mc-components": ["--T", "1", "--mc-paths", "64", "--X", "3"],
             "hysteresis": ["--x0-ratios", "2", "--n-paths", "8", "--T-grid", "4"],
             "quantiles": ["--x0-ratios", "2", "--n-paths", "8", "--T-grid", "2"],
             "ratio-study": ["--n-paths", "8", "--T-grid", "2"]}[command]
    assert run(tmp_path, command, "--preset", "paper", "--seed", "3", *extra) == 0
    assert manifest(tmp_path)["outputs"]


def test_preset_contents():
    assert set(PRESETS["paper"]) >= {"kappa", "gamma", "xbar", "x0_ratios"}
