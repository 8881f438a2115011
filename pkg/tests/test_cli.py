import hashlib
import json

import numpy as np
import pytest

from shapemotion.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main
from shapemotion.motion_repr import read_samo


def run(capsys, *argv):
    code = main(["--profile", "smoke", *map(str, argv)])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == EXIT_OK else json.loads(err))


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth-data -> train-vae -> train-lm once for the module."""
    root = tmp_path_factory.mktemp("cli")
    for argv in (["synth-data", "--out", root / "data"],
                 ["train-vae", "--data", root / "data", "--out", root / "vae"],
                 ["train-lm", "--data", root / "data", "--vae", root / "vae/vae.ckpt", "--out", root / "lm"]):
        assert main(["--profile", "smoke", *map(str, argv)]) == EXIT_OK
    return root


def test_pipeline_artifacts_and_run_meta(pipeline):
    meta = json.loads((pipeline / "vae/run.json").read_text())
    assert meta["command"] == "train-vae" and meta["profile"] == "smoke" and meta["steps"] == 20
    assert set(meta["versions"]) == {"shapemotion", "python", "numpy", "torch"}
    assert len(meta["config_hash"]) == 64
    assert len((pipeline / "vae/train_vae.jsonl").read_text().splitlines()) >= 1
    assert (pipeline / "lm/lm.ckpt").exists() and (pipeline / "lm/train_lm.jsonl").exists()


def test_generate_and_plot(pipeline, capsys, tmp_path):
    code, gen = run(capsys, "generate", "--text", "a tall person walks forward", "--lm", pipeline / "lm/lm.ckpt",
                    "--vae", pipeline / "vae/vae.ckpt", "--out", tmp_path / "g", "--plot")
    assert code == EXIT_OK
    assert len(gen["beta"]) == 10 and gen["frames"] == 4 * gen["token_count"]
    joints = np.load(tmp_path / "g/joints.npy")
    assert joints.shape == (gen["frames"], 22, 3)
    assert read_samo(tmp_path / "g/motion.samo").shape == (gen["frames"], 263)
    assert (tmp_path / "g/trajectory.png").stat().st_size > 0
    code, out = run(capsys, "plot", "--generation", tmp_path / "g/generation.json",
                    "--log", pipeline / "vae/train_vae.jsonl", "--out", tmp_path / "p")
    assert code == EXIT_OK and len(out["plots"]) == 2


def test_evaluate_repeats_and_metric_plot(pipeline, capsys, tmp_path):
    code, summary = run(capsys, "evaluate", "--data", pipeline / "data", "--lm", pipeline / "lm/lm.ckpt",
                        "--vae", pipeline / "vae/vae.ckpt", "--repeats", 2, "--out", tmp_path / "e")
    assert code == EXIT_OK
    assert len((tmp_path / "e/runs.jsonl").read_text().splitlines()) == 2
    assert json.loads((tmp_path / "e/run.json").read_text())["repeats"] == 2
    assert json.loads((tmp_path / "e/metrics.json").read_text()) == summary
    code, _ = run(capsys, "plot", "--metrics", tmp_path / "e/metrics.json", "--out", tmp_path / "p")
    assert code == EXIT_OK and (tmp_path / "p/metrics.png").exists()


def test_reconstruct(pipeline, capsys, tmp_path):
    code, summary = run(capsys, "reconstruct", "--data", pipeline / "data", "--vae", pipeline / "vae/vae.ckpt",
                        "--limit", 3, "--out", tmp_path / "r")
    assert code == EXIT_OK and summary["bone_length_diff_mm"] >= 0
    assert len(list((tmp_path / "r").glob("*.samo"))) == 3


def test_same_seed_gives_identical_artifacts(pipeline, tmp_path):
    for argv in (["synth-data", "--out", tmp_path / "data"],
                 ["train-vae", "--data", tmp_path / "data", "--out", tmp_path / "vae"]):
        assert main(["--profile", "smoke", *map(str, argv)]) == EXIT_OK
    assert digest(tmp_path / "data/manifest.jsonl") == digest(pipeline / "data/manifest.jsonl")
    assert digest(tmp_path / "vae/train_vae.jsonl") == digest(pipeline / "vae/train_vae.jsonl")
    assert digest(tmp_path / "vae/vae.ckpt") == digest(pipeline / "vae/vae.ckpt")


def test_missing_checkpoint_exit_code(capsys, tmp_path):
    code, err = run(capsys, "generate", "--text", "x", "--lm", tmp_path / "nope.ckpt", "--vae", tmp_path / "v")
    assert code == EXIT_MISSING and err["error"] == "MissingCheckpoint"


def test_unknown_config_key_exit_code(capsys, tmp_path):
    (tmp_path / "c.yaml").write_text("vae:\n  widht: 12\n")
    code, err = run(capsys, "--config", tmp_path / "c.yaml", "synth-data", "--out", tmp_path / "d")
    assert code == EXIT_CONFIG and "widht" in err["message"]


def test_output_root_env_and_schema(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("SHAPEMOTION_OUTPUT_ROOT", str(tmp_path))
    code, out = run(capsys, "--seed", 4, "synth-data", "--n", 2)
    assert code == EXIT_OK and out["n_samples"] == 2
    assert (tmp_path / "data/manifest.jsonl").exists()
    assert json.loads((tmp_path / "data/run.json").read_text())["seed"] == 4
    code, schema = run(capsys, "config-schema")
    assert code == EXIT_OK and "q_percent" in schema["vae"]
