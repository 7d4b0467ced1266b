import json

import pytest
import yaml

from coopquery.cli import main

SMALL = {
    "seed": 7,
    "data": {"n_scenes": 20, "train_scenes": 20, "eval_scenes": 4},
    "train": {"steps": 200},
    "sweep": {"translation": [0.0, 1.0], "rotation": [0.0, 2.0], "n_seeds": 3},
    "lift": {"n_seeds": 2, "n_objects": 50},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


def test_unknown_subcommand(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["explode"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_invalid_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("matcher: {tau: 2.0}\n")
    assert main(["cost-report", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: ConfigInvalid:") and "\n" not in err
    assert main(["cost-report", "--set", "nonsense.key=1", "--out", str(tmp_path / "o")]) == 2
    assert main(["cost-report", "--set", "novalue", "--out", str(tmp_path / "o")]) == 2
    unknown = tmp_path / "unknown.yaml"
    unknown.write_text("surprise: 1\n")
    assert main(["cost-report", "--config", str(unknown), "--out", str(tmp_path / "o")]) == 2


def test_missing_config_exit_3(tmp_path, capsys):
    assert main(["cost-report", "--config", str(tmp_path / "nope.yaml")]) == 3
    assert capsys.readouterr().err.startswith("error: IoFailure:")


def test_divergence_exit_4(tmp_path, small_config, capsys):
    code = main(["train", "--config", str(small_config), "--out", str(tmp_path / "o"),
                 "--set", "train.learning_rate=1e300", "--set", "train.steps=5", "--set", "train.clip_norm=null"])
    assert code == 4
    assert capsys.readouterr().err.startswith("error: DivergenceDetected:")


def test_cost_report(tmp_path, capsys):
    assert main(["cost-report", "--out", str(tmp_path)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((tmp_path / "cost.json").read_text())
    assert abs(printed["ratio"] / 16.9 - 1) < 0.2


def test_gen_scenes_deterministic(tmp_path, small_config):
    for out in ("a", "b"):
        assert main(["gen-scenes", "--config", str(small_config), "--out", str(tmp_path / out)]) == 0
    names = sorted(p.name for p in (tmp_path / "a" / "scenes").iterdir())
    assert len(names) == 20
    for n in names:
        assert (tmp_path / "a" / "scenes" / n).read_bytes() == (tmp_path / "b" / "scenes" / n).read_bytes()


def test_overrides_recorded_in_manifest(tmp_path):
    out = tmp_path / "o"
    assert main(["cost-report", "--out", str(out), "--seed", "11", "--threads", "2",
                 "--set", "cost.sparse.n_queries=50"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "cost-report"
    cfg = manifest["config"]
    assert (cfg["seed"], cfg["threads"], cfg["cost"]["sparse"]["n_queries"]) == (11, 2, 50)


def test_full_pipeline_smoke(tmp_path, small_config):
    out = tmp_path / "run"
    for sub in ("gen-scenes", "train", "eval", "sweep-noise", "compare-lift", "cost-report"):
        assert main([sub, "--config", str(small_config), "--out", str(out), "--threads", "2"]) == 0, sub
        if sub == "eval":
            manifest = json.loads((out / "manifest.json").read_text())
            assert manifest["config"]["matcher"]["params_path"] == str((out / "params.bin").resolve())
    expected = {"scenes", "params.bin", "loss.csv", "metrics.csv", "metrics_by_range.csv", "detections.jsonl",
                "sweep.csv", "sweep_translation_plot.csv", "sweep_rotation_plot.csv", "lift.csv", "cost.json",
                "manifest.json"}
    assert expected <= {p.name for p in out.iterdir()}
    assert len((out / "loss.csv").read_text().splitlines()) == 201
    sweep = (out / "sweep.csv").read_text().splitlines()
    assert sweep[0].startswith("matcher,sigma_t,sigma_r,tau,f1")
    assert len(sweep) == 1 + 4 * 4  # 4 noise cells x (2 baselines + 2 tau presets)
