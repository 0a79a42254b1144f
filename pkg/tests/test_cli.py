import json

import pytest

from klab.cli import EXIT_ERROR, EXIT_FAIL, EXIT_OK, main
from klab.config import default_config, from_mapping
from klab.experiments import EXPERIMENTS, pool_size, run_experiment


def _small_flow(tmp_path, seed=0):
    return from_mapping(
        {
            "name": "flow-holder",
            "numeric": {"T": 0.5, "dt": 0.01},
            "mc": {"n_paths": 64, "seed": seed},
            "params": {"n_pairs": 4},
            "outputs": {"dir": str(tmp_path)},
        }
    )


def test_registry_covers_every_experiment():
    assert set(EXPERIMENTS) == {
        "counterexample", "ou-check", "resolvent", "zvonkin", "flow-holder", "girsanov",
        "derivative", "spde-regularity", "uniqueness", "norms", "mollify",
    }


def test_ou_check_writes_artifacts(tmp_path, capsys):
    code = main(["ou-check", "--out", str(tmp_path), "--seed", "3", "--plot"])
    assert code == EXIT_OK
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["all_passed"]
    assert set(manifest["files"]) == {"ou_covariance.csv", "ou_sample_covariance.csv", "verdicts.json", "config.json"}
    assert set(manifest["versions"]) >= {"klab", "numpy", "scipy", "python"}
    # covariance table at t = 1, d = 1
    rows = (tmp_path / "ou_covariance.csv").read_text().splitlines()
    assert rows[0].startswith("# config: ")
    assert any(r.startswith("1,1.0,0.3333333333333333,0.5,1.0,") for r in rows)
    verdicts = json.loads((tmp_path / "verdicts.json").read_text())
    assert verdicts["config"]["mc"]["seed"] == 3 and verdicts["config_hash"] == manifest["config_hash"]
    assert "PASS  ou_covariance_exact" in capsys.readouterr().out


def test_counterexample_reports_failed_verdict(tmp_path):
    code = main(["counterexample", "--out", str(tmp_path), "--plot"])
    verdicts = json.loads((tmp_path / "verdicts.json").read_text())["verdicts"]
    assert verdicts["branch_residual"]["passed"] and verdicts["coalescence_endpoint"]["passed"]
    assert code == (EXIT_OK if all(v["passed"] for v in verdicts.values()) else EXIT_FAIL)
    assert (tmp_path / "branch.csv").exists() and (tmp_path / "branch.png").exists()


def test_same_config_and_seed_give_identical_bytes(tmp_path, monkeypatch):
    a = run_experiment(_small_flow(tmp_path))
    first = (tmp_path / "manifest.json").read_bytes()
    monkeypatch.setenv("KLAB_THREADS", "1")
    b = run_experiment(_small_flow(tmp_path))
    assert a.files == b.files and (tmp_path / "manifest.json").read_bytes() == first
    c = run_experiment(_small_flow(tmp_path, seed=1))
    assert c.files["holder.csv"] != a.files["holder.csv"]


def test_config_file_and_errors(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("name: something-else\nparams: {n_samples: 20000}\n")
    assert main(["ou-check", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    saved = json.loads((tmp_path / "o" / "config.json").read_text())
    assert saved["name"] == "ou-check" and saved["params"]["n_samples"] == 20000
    bad = tmp_path / "bad.yaml"
    bad.write_text("drift: {kind: counterexample, alpha: 1.2}\nmc: {seed: -1}\n")
    assert main(["counterexample", "--config", str(bad)]) == EXIT_ERROR
    err = capsys.readouterr().err
    assert "(1/2, 1)" in err and "mc.seed" in err
    assert main(["counterexample", "--config", str(tmp_path / "missing.yaml")]) == EXIT_ERROR
    with pytest.raises(SystemExit) as info:
        main(["not-an-experiment"])
    assert info.value.code == EXIT_ERROR


def test_thread_cap(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("KLAB_THREADS", "2")
    assert pool_size() == 2
    monkeypatch.setenv("KLAB_THREADS", "many")
    assert main(["ou-check"]) == EXIT_ERROR
    assert not (tmp_path / "klab-out").exists()
    monkeypatch.delenv("KLAB_THREADS")
    assert pool_size() >= 1


def test_zvonkin_scheme_through_cli(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("numeric: {n: 32, T: 0.2, dt: 0.01}\nmc: {n_paths: 16}\nparams: {n_pairs: 2}\n")
    code = main(["flow-holder", "--config", str(cfg), "--scheme", "zvonkin", "--out", str(tmp_path / "z")])
    assert code in (EXIT_OK, EXIT_FAIL)
    assert json.loads((tmp_path / "z" / "verdicts.json").read_text())["scheme"] == "zvonkin"


def test_default_config_round_trip_through_runner(tmp_path):
    rep = run_experiment(default_config("ou-check").with_overrides(n_samples=20000), out_dir=tmp_path)
    assert rep.passed and rep.out_dir == tmp_path
