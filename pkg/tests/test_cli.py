"""Config validation, overrides, presets, and the command pipeline
(generate -> train -> eval -> report) on a miniature experiment."""

import json
import shutil

import numpy as np
import pytest

from liquidlane import __version__
from liquidlane.cli import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_OK,
    _resolve_config,
    build_parser,
    generate_artifacts,
    load_dataset,
    main,
)
from liquidlane.config import (
    ConfigError,
    apply_overrides,
    config_hash,
    load_preset,
    validate_config,
)
from liquidlane.io_utils import read_manifest, verify_manifest
from liquidlane.metrics import MetricsReport
from liquidlane.policy import load_checkpoint


def tiny_config(out_dir: str) -> dict:
    return {
        "format_version": 1,
        "kind": "CTRNN",
        "m": 4,
        "n": 16,
        "dt": 1.0,
        "out_dir": out_dir,
        "road": {
            "seeds": [5],
            "eval_seed": 6,
            "length": 150.0,
            "kappa_max": 0.05,
            "smoothness": 1.0,
            "seasons": ["summer"],
        },
        "dataset": {"window": 16, "stride": 8, "start_offsets": [0.0]},
        "training": {
            "epochs": 1,
            "batch_size": 8,
            "sequence_length": 16,
            "learning_rate": 0.002,
            "weight_decay": 1e-6,
            "adam_beta1": 0.9,
            "adam_beta2": 0.999,
            "adam_eps": 1e-8,
            "seed": 0,
            "clip_norm": 10.0,
            "compute_dtype": "float32",
        },
        "eval": {
            "noise_variances": [0.1],
            "ssim_frames": 4,
            "rollout_seed": 3,
            "saliency_samples": 1,
        },
    }


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full command pipeline once per module; tests inspect artifacts."""
    root = tmp_path_factory.mktemp("run")
    config = tiny_config(str(root / "out"))
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config) + "\n")
    codes = {
        command: main([command, "--config", str(config_path)])
        for command in ("generate", "train", "eval", "report")
    }
    return {"root": root, "config": config, "config_path": config_path, "codes": codes}


# --- config schema -------------------------------------------------------------


def test_presets_validate():
    for name in ("desk", "paper"):
        config = load_preset(name)
        assert config["format_version"] == 1
        assert config["dataset"]["window"] == config["training"]["sequence_length"]


def test_unknown_preset_raises():
    with pytest.raises(ConfigError, match="unknown preset"):
        load_preset("bench")


def test_validate_accepts_tiny_config(tmp_path):
    validate_config(tiny_config(str(tmp_path)))


def test_validate_reports_schema_path(tmp_path):
    config = tiny_config(str(tmp_path))
    config["road"]["length"] = 5
    with pytest.raises(ConfigError, match="road/length"):
        validate_config(config)
    config = tiny_config(str(tmp_path))
    config["kind"] = "RNN"
    with pytest.raises(ConfigError, match="kind"):
        validate_config(config)


def test_validate_rejects_unknown_keys(tmp_path):
    config = tiny_config(str(tmp_path))
    config["training"]["momentum"] = 0.9
    with pytest.raises(ConfigError, match="momentum"):
        validate_config(config)


def test_validate_window_must_match_sequence_length(tmp_path):
    config = tiny_config(str(tmp_path))
    config["dataset"]["window"] = 32
    with pytest.raises(ConfigError, match="sequence_length"):
        validate_config(config)


# --- overrides -----------------------------------------------------------------


def test_overrides_parse_json_values(tmp_path):
    config = tiny_config(str(tmp_path))
    out = apply_overrides(
        config, ["training.epochs=7", "road.seeds=[3,4]", "out_dir=/tmp/elsewhere"]
    )
    assert out["training"]["epochs"] == 7
    assert out["road"]["seeds"] == [3, 4]
    assert out["out_dir"] == "/tmp/elsewhere"
    # the input dict is untouched
    assert config["training"]["epochs"] == 1


def test_overrides_validation_errors(tmp_path):
    config = tiny_config(str(tmp_path))
    with pytest.raises(ConfigError, match="KEY=VALUE"):
        apply_overrides(config, ["noequals"])
    with pytest.raises(ConfigError, match="no such key"):
        apply_overrides(config, ["nokey.x=1"])
    with pytest.raises(ConfigError):
        apply_overrides(config, ["training.epochs=0"])
    with pytest.raises(ConfigError):
        apply_overrides(config, ["training.nope=1"])


def test_config_hash_is_order_independent(tmp_path):
    config = tiny_config(str(tmp_path))
    shuffled = dict(reversed(list(config.items())))
    assert config_hash(config) == config_hash(shuffled)
    changed = apply_overrides(config, ["training.epochs=2"])
    assert config_hash(changed) != config_hash(config)


def test_resolve_config_seed_and_out_flags(tmp_path):
    config_path = tmp_path / "c.json"
    config_path.write_text(json.dumps(tiny_config(str(tmp_path / "out"))))
    parser = build_parser()
    args = parser.parse_args(
        ["train", "--config", str(config_path), "--seed", "42", "--out", str(tmp_path / "o2")]
    )
    config = _resolve_config(args)
    assert config["training"]["seed"] == 42
    assert config["eval"]["rollout_seed"] == 42
    assert config["out_dir"] == str(tmp_path / "o2")


def test_resolve_config_requires_source():
    args = build_parser().parse_args(["train"])
    with pytest.raises(ConfigError, match="--config or --preset"):
        _resolve_config(args)


# --- entry point and exit codes --------------------------------------------------


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_missing_config_file_is_io_error(tmp_path, capsys):
    code = main(["generate", "--config", str(tmp_path / "absent.json")])
    assert code == EXIT_IO
    assert "i/o error" in capsys.readouterr().err


def test_invalid_json_is_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    code = main(["generate", "--config", str(bad)])
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_schema_violation_is_config_error(tmp_path):
    config = tiny_config(str(tmp_path))
    del config["road"]
    path = tmp_path / "c.json"
    path.write_text(json.dumps(config))
    assert main(["train", "--config", str(path)]) == EXIT_CONFIG


def test_gradcheck_single_kind(capsys):
    assert main(["gradcheck", "--kind", "MGU"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "MGU" in out and "PASS" in out


def test_gradcheck_corrupt_control_fails(capsys):
    assert main(["gradcheck", "--kind", "MGU", "--corrupt"]) == EXIT_NUMERIC
    assert "FAIL" in capsys.readouterr().out


# --- pipeline artifacts ------------------------------------------------------------


def test_pipeline_exit_codes(pipeline):
    assert pipeline["codes"] == {
        "generate": EXIT_OK,
        "train": EXIT_OK,
        "eval": EXIT_OK,
        "report": EXIT_OK,
    }


def test_generate_artifacts_layout(pipeline):
    dataset_dir = pipeline["root"] / "out" / "dataset"
    assert (dataset_dir / "roads" / "road_5_summer.json").is_file()
    trace_dir = dataset_dir / "traces" / "trace_000"
    for name in ("scalars.csv", "meta.json", "frames.npy.gz"):
        assert (trace_dir / name).is_file()
    splits = json.loads((dataset_dir / "splits.json").read_text())
    assert splits["window"] == 16 and splits["stride"] == 8
    assert splits["trace_dirs"] == ["traces/trace_000"]
    assert splits["train"] and splits["val"] and splits["test"]


def test_generate_manifest_checksums(pipeline):
    dataset_dir = pipeline["root"] / "out" / "dataset"
    manifest = read_manifest(dataset_dir)
    counts = manifest["window_counts"]
    splits = json.loads((dataset_dir / "splits.json").read_text())
    assert counts["train"] == len(splits["train"])
    assert counts["val"] == len(splits["val"])
    assert counts["test"] == len(splits["test"])
    assert manifest["config_hash"] == config_hash(pipeline["config"])
    assert verify_manifest(dataset_dir) == []


def test_generate_is_reproducible(pipeline, tmp_path):
    # a second run in a fresh directory yields byte-identical artifacts
    config = dict(pipeline["config"], out_dir=str(tmp_path / "out2"))
    manifest = generate_artifacts(config)
    original = read_manifest(pipeline["root"] / "out" / "dataset")
    assert manifest["files"] == original["files"]
    assert manifest["window_counts"] == original["window_counts"]


def test_load_dataset_round_trip(pipeline):
    dataset = load_dataset(pipeline["config"])
    splits = json.loads(
        (pipeline["root"] / "out" / "dataset" / "splits.json").read_text()
    )
    assert [list(w) for w in dataset.train] == splits["train"]
    frames, targets = dataset.batch(dataset.train[:2])
    assert frames.shape == (2, 16, 48, 160)
    assert targets.shape == (2, 16)


def test_train_artifacts(pipeline):
    model_dir = pipeline["root"] / "out" / "models" / "CTRNN"
    model, moments = load_checkpoint(model_dir / "checkpoint.json")
    assert model.cell.kind.value == "CTRNN"
    assert model.head is not None
    assert moments is not None and moments["t"] > 0
    history = (model_dir / "history.csv").read_text().splitlines()
    assert history[0] == "epoch,train_mse,val_mse,val_weighted,is_best"
    assert len(history) == 2  # header + 1 epoch
    assert history[1].endswith(",1")  # the only epoch is the best


def test_eval_artifacts(pipeline):
    eval_dir = pipeline["root"] / "out" / "eval" / "CTRNN"
    report = MetricsReport.from_json((eval_dir / "metrics.json").read_text())
    assert "CTRNN/summer" in report.correlations
    assert report.metadata["kind"] == "CTRNN"
    assert "summer" in report.metadata["rollouts"]
    ssim_lines = (eval_dir / "ssim.csv").read_text().splitlines()
    assert ssim_lines[0] == "model,season,variance,frame_index,ssim"
    assert len(ssim_lines) > 1
    assert (eval_dir / "saliency_summer_0.png").is_file()
    assert (eval_dir / "trace_summer" / "scalars.csv").is_file()
    # noise-free SSIM of a frame against itself is exactly 1
    clean = report.ssim_values("CTRNN", "summer", 0.0)
    np.testing.assert_array_equal(clean, np.ones_like(clean))


def test_report_artifact(pipeline):
    text = (pipeline["root"] / "out" / "report.md").read_text()
    assert text.startswith("# Run summary")
    assert "CTRNN" in text
    assert "val MSE" in text
    assert "SSIM median" in text


def test_eval_kind_mismatch_is_config_error(pipeline, tmp_path, capsys):
    config = dict(pipeline["config"], kind="LTC")
    out_root = pipeline["root"] / "out"
    (out_root / "models" / "LTC").mkdir(parents=True, exist_ok=True)
    shutil.copy(
        out_root / "models" / "CTRNN" / "checkpoint.json",
        out_root / "models" / "LTC" / "checkpoint.json",
    )
    path = tmp_path / "ltc.json"
    path.write_text(json.dumps(config))
    assert main(["eval", "--config", str(path)]) == EXIT_CONFIG
    assert "checkpoint holds CTRNN" in capsys.readouterr().err


def test_eval_missing_checkpoint_is_io_error(pipeline, tmp_path):
    config = dict(pipeline["config"], kind="LSTM")
    path = tmp_path / "lstm.json"
    path.write_text(json.dumps(config))
    assert main(["eval", "--config", str(path)]) == EXIT_IO
