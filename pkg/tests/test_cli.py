import csv
import json

import pytest

import scalar_oracles as orc
from fcoslite import config as config_mod
from fcoslite.cli import main
from fcoslite.config import ConfigError, RunConfig


def test_config_round_trip_and_overrides(tmp_path):
    cfg = config_mod.apply_overrides(RunConfig(), ["train.lr=0.02", "scene.max_objects=3", "name='x'", "seed=9"])
    assert cfg.train.lr == 0.02 and cfg.scene.max_objects == 3 and cfg.name == "x"
    assert cfg.scene.seed == 9 and cfg.train.seed == 9
    p = tmp_path / "c.toml"
    p.write_text(cfg.dumps())
    assert config_mod.load(p) == cfg
    with pytest.raises(ConfigError):
        config_mod.apply_overrides(RunConfig(), ["train.nope=1"])
    with pytest.raises(ConfigError):
        config_mod.apply_overrides(RunConfig(), ["train.cls_kind='MSE'"])
    with pytest.raises(ConfigError):
        config_mod.from_dict({"bogus": 1})


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


SMALL = ["--set", "data.n_train=4", "--set", "data.n_val=2", "--set", "data.n_test=2", "--set", "scene.max_objects=3"]


def test_gen_data_deterministic_and_no_overwrite(tmp_path, capsys):
    code, out, _ = _run(capsys, "gen-data", "--seed", 3, "--out", tmp_path / "a", *SMALL)
    assert code == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert f"train {manifest['counts']['train']}" in out
    assert f"class0 {manifest['objects']['0']}" in out and f"class1 {manifest['objects']['1']}" in out
    _run(capsys, "gen-data", "--seed", 3, "--out", tmp_path / "b", *SMALL)
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    code, _, err = _run(capsys, "gen-data", "--seed", 3, "--out", tmp_path / "a", *SMALL)
    assert code == 3
    assert json.loads(err.strip().splitlines()[-1])["exit_code"] == 3
    assert _run(capsys, "gen-data", "--seed", 3, "--out", tmp_path / "a", "--force", *SMALL)[0] == 0


def test_random_seed_is_recorded(tmp_path, capsys):
    _run(capsys, "gen-data", "--out", tmp_path / "r", *SMALL)
    resolved = config_mod.load(tmp_path / "r" / "config.resolved.toml")
    manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert resolved.seed == manifest["seed"] and resolved.seed is not None


def test_curves_match_oracle(tmp_path, capsys):
    out = tmp_path / "curves.csv"
    code, _, _ = _run(capsys, "curves", "--mu", "0.4,0.6,0.8", "--out", out)
    assert code == 0
    rows = list(csv.DictReader(open(out)))
    for row in rows[:: len(rows) // 20][:20]:
        g = float(row["x"])
        for mu in (0.4, 0.6, 0.8):
            assert float(row[f"weight_mu_{mu:g}"]) == pytest.approx(orc.weight(g, mu), abs=1e-12)
    assert _run(capsys, "curves", "--mu", "0.4", "--out", out)[0] == 3
    assert _run(capsys, "curves", "--mu", "abc", "--out", tmp_path / "x.csv")[0] == 2
    assert _run(capsys, "curves", "--mu", "1.5", "--out", tmp_path / "y.csv")[0] == 2


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nlr = 'fast'\nbogus = 1\n")
    code, _, err = _run(capsys, "gen-data", "--config", bad, "--out", tmp_path / "z")
    assert code == 2 and "bogus" in err
    code, _, _ = _run(capsys, "gen-data", "--config", tmp_path / "missing.toml", "--out", tmp_path / "z")
    assert code == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--seed", "1", "--out", str(root / "corpus"), "--set", "data.n_train=16",
                 "--set", "data.n_val=4", "--set", "data.n_test=4", "--set", "scene.max_objects=3"]) == 0
    assert main(["train", "--seed", "1", "--corpus", str(root / "corpus"), "--out", str(root / "train"),
                 "--set", "train.epochs=1", "--set", "train.warmup_iters=0"]) == 0
    return root


def test_train_writes_run_directory(trained):
    names = {p.name for p in (trained / "train").iterdir()}
    assert {"config.resolved.toml", "metrics.jsonl", "report.json", "checkpoint.bin"} <= names
    assert json.loads((trained / "train" / "report.json").read_text())["schema"] == 1


def test_timestamped_run_dirs_are_unique(trained, capsys):
    runs = trained / "runs"
    for _ in range(2):
        code, _, _ = _run(capsys, "eval", "--oracle", "--corpus", trained / "corpus", "--runs", runs, "--name", "o")
        assert code == 0
    assert len(list(runs.iterdir())) == 2


def test_eval_oracle_prints_perfect_map(trained, tmp_path, capsys):
    code, out, _ = _run(capsys, "eval", "--oracle", "--corpus", trained / "corpus", "--out", tmp_path / "e")
    assert code == 0 and "mAP@0.5 1.000" in out
    assert json.loads((tmp_path / "e" / "report.json").read_text())["map"] == 1.0


def test_quantize_then_eval_quantized(trained, tmp_path, capsys):
    ckpt = trained / "train" / "checkpoint.bin"
    code, out, _ = _run(capsys, "quantize", "--checkpoint", ckpt, "--corpus", trained / "corpus",
                        "--out", tmp_path / "q", "--set", "quant.calibration_images=16")
    assert code == 0 and "PASS" in out
    audit = json.loads((tmp_path / "q" / "report.json").read_text())["size_audit"]
    assert audit["passed"]
    code, out, _ = _run(capsys, "eval", "--checkpoint", ckpt, "--corpus", trained / "corpus", "--quantized",
                        "--quantspec", tmp_path / "q" / "quantspec.json", "--out", tmp_path / "qe")
    assert code == 0
    assert "float" in out and "int8" in out and "diff" in out
    rep = json.loads((tmp_path / "qe" / "report.json").read_text())
    assert rep["extra"]["map_diff"] == pytest.approx(rep["map"] - rep["extra"]["int8"]["map"])


def test_gates_and_missing_inputs(trained, tmp_path, capsys):
    code, _, err = _run(capsys, "eval", "--oracle", "--corpus", trained / "corpus", "--out", tmp_path / "g",
                        "--min-map", "1.01")
    assert code == 5 and '"exit_code": 5' in err
    code, _, _ = _run(capsys, "eval", "--checkpoint", tmp_path / "nope.bin", "--corpus", trained / "corpus",
                      "--out", tmp_path / "m")
    assert code == 3
    code, _, _ = _run(capsys, "train-kd", "--teacher", tmp_path / "nope.bin", "--corpus", trained / "corpus",
                      "--out", tmp_path / "k")
    assert code == 3
    code, _, _ = _run(capsys, "eval", "--corpus", trained / "corpus", "--out", tmp_path / "n")
    assert code == 2
