import json

import numpy as np
import pytest

from tiltedflow import cli, train as train_mod
from tiltedflow.cli import ConfigError, apply_overrides, load_config, main

MINIMAL = {
    "problem": {"reward": {"kind": "linear", "lambda": 1.0}},
    "run": {"method": "AS", "iters": 4, "batch": 16, "steps": 20, "eval_every": 2,
            "eval_samples": 50},
}


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def test_minimal_run_writes_three_files(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", write(tmp_path, MINIMAL), "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {"metrics.jsonl", "samples.csv", "params.bin"}
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[-1])["iter"] == 4
    assert json.loads(capsys.readouterr().out.splitlines()[-1])["method"] == "AS"


def test_rerun_is_byte_identical(tmp_path):
    cfg = write(tmp_path, MINIMAL)
    for name in ("a", "b"):
        assert main(["run", cfg, "--out", str(tmp_path / name)]) == 0
    for f in ("metrics.jsonl", "samples.csv", "params.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_unknown_key_exits_2(tmp_path, capsys):
    bad = json.loads(json.dumps(MINIMAL))
    bad["problem"]["schedule"] = {"sgima0": 1.0}
    assert main(["run", write(tmp_path, bad)]) == 2
    assert "sgima0" in capsys.readouterr().err


def test_unknown_run_key_exits_2(tmp_path, capsys):
    assert main(["run", write(tmp_path, MINIMAL), "--set", "run.itres=3"]) == 2
    assert "run.itres" in capsys.readouterr().err


def test_bad_values_exit_2(tmp_path):
    assert main(["run", write(tmp_path, MINIMAL), "--set", "problem.schedule.sigma0=-1"]) == 2
    assert main(["run", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["run", str(tmp_path / "broken.json")]) == 2


def test_overrides_parse_json_values():
    tree = apply_overrides({}, ["run.iters=7", "run.method=NSM", "sweep.lambda=[1, 2]"])
    assert tree == {"run": {"iters": 7, "method": "NSM"}, "sweep": {"lambda": [1, 2]}}


def test_seed_environment_override(tmp_path):
    cfg = load_config(write(tmp_path, MINIMAL), (), "17")
    assert cfg.train_config().seed == 17


def test_sweep_expands_per_lambda(tmp_path, capsys):
    cfg = dict(MINIMAL, sweep={"lambda": [0.5, 2.0]})
    out = tmp_path / "sweep"
    assert main(["run", write(tmp_path, cfg), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["lambda_0.5", "lambda_2"]
    lams = [json.loads(line)["lambda"] for line in capsys.readouterr().out.splitlines()]
    assert lams == [0.5, 2.0]


def test_default_sweep_matches_grid():
    cfg = cli.ExperimentConfig.model_validate({"sweep": {}})
    assert np.allclose(cfg.sweep.lambda_, [1, 10, 10**1.5, 100])


def test_divergence_exits_3(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise train_mod.TrainingDiverged("nan", np.zeros(1), [])

    monkeypatch.setattr(train_mod, "train", boom)
    assert main(["run", write(tmp_path, MINIMAL)]) == 3


def test_free_energy_zero_reward_is_exact(tmp_path, capsys):
    cfg = {"problem": {"reward": {"kind": "zero"}}, "thermo": {"n_paths": 100, "steps": 20}}
    out = tmp_path / "fe"
    assert main(["free-energy", write(tmp_path, cfg), "--out", str(out)]) == 0
    recs = [json.loads(line) for line in (out / "free_energy.jsonl").read_text().splitlines()]
    assert all(r["estimate"] == 0.0 for r in recs)


def test_free_energy_linear_default(tmp_path, capsys):
    cfg = {"thermo": {"n_paths": 4000, "steps": 100, "train": False}}
    assert main(["free-energy", write(tmp_path, cfg), "--out", str(tmp_path / "fe")]) == 0
    recs = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    zero = next(r for r in recs if r["v_tag"] == "zero")
    assert abs(zero["estimate"] - 0.5) < 3 * zero["std_err"] + 2e-3


def test_low_ess_exits_4(tmp_path, capsys):
    cfg = {"problem": {"reward": {"lambda": 60.0}},
           "thermo": {"n_paths": 40, "steps": 20, "train": False}}
    out = tmp_path / "fe"
    assert main(["free-energy", write(tmp_path, cfg), "--out", str(out)]) == 4
    recs = [json.loads(line) for line in (out / "free_energy.jsonl").read_text().splitlines()]
    assert any(r.get("warning") == "low_ess" for r in recs)


def test_table1_prints_fifteen_cells(capsys):
    assert main(["table1"]) == 0
    rows = [line for line in capsys.readouterr().out.splitlines()
            if line.split() and line.split()[0] in {"AMAS", "TSM", "CSM", "NSM", "iDEM"}]
    assert len(rows) == 15
    assert main(["table1", "--json", "--sigma0", "2"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert len(data) == 15 and all(r["family"] for r in data)


def test_verify_table1(capsys):
    assert main(["verify", "table1"]) == 0
    out = capsys.readouterr().out
    assert out.strip().splitlines()[-1].endswith("checks passed")


def test_verify_identities_json(capsys):
    assert main(["verify", "identities", "--json"]) == 0
    recs = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert recs and all(r["passed"] for r in recs)


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "tiltedflow", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "TILTEDFLOW_SEED" in res.stdout


def test_config_error_type(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, {"nope": 1}))
