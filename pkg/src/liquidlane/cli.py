"""Command-line pipeline: generate, train, eval, gradcheck, report.

Every command takes a JSON config (--config or a shipped preset via
--preset), optional dotted --set overrides, and writes its artifacts
under the config's out_dir.  Exit codes: 0 success, 2 config error,
3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .cells import CellKind, NumericOverflowError
from .config import (
    ConfigError,
    apply_overrides,
    config_hash,
    load_config,
    load_preset,
    training_config,
)
from .io_utils import write_manifest, write_text_atomic
from .metrics import (
    REAL_ROAD_REFERENCE,
    MetricsReport,
    correlation_table,
    ssim_robustness,
)
from .perception import save_image_png
from .policy import (
    checkpoint_to_json,
    init_policy,
    load_checkpoint,
)
from .simulator import (
    build_dataset,
    generate_road,
    load_road,
    load_trace,
    rollout_closed_loop,
    rollout_expert,
    save_road,
    save_trace,
    window_count,
)
from .training import (
    TrainingDivergedError,
    gradient_check,
    read_history_csv,
    train,
    write_history_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

ALL_KINDS = [k.value for k in CellKind]


def _add_common_flags(parser: argparse.ArgumentParser, needs_config: bool) -> None:
    group = parser.add_mutually_exclusive_group(required=False)
    group.add_argument("--config", metavar="PATH", help="experiment config JSON")
    group.add_argument(
        "--preset", choices=["desk", "paper"], help="shipped config preset"
    )
    parser.add_argument("--seed", type=int, metavar="N", help="override all seeds")
    parser.add_argument("--threads", type=int, default=1, metavar="N")
    parser.add_argument("--out", metavar="DIR", help="override out_dir")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="K=V",
        help="dotted config override, repeatable",
    )
    parser.set_defaults(needs_config=needs_config)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="liquidlane",
        description="Lane-keeping imitation experiments with liquid recurrent cells.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="build roads, expert rollouts, and dataset")
    _add_common_flags(p, needs_config=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the configured cell kind")
    _add_common_flags(p, needs_config=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed-loop rollouts and interpretability metrics")
    _add_common_flags(p, needs_config=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common_flags(p, needs_config=False)
    p.add_argument("--kind", choices=ALL_KINDS, help="single kind (default: all)")
    p.add_argument(
        "--corrupt",
        action="store_true",
        help="inject a gradient error (negative control, must fail)",
    )
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="assemble a run summary from artifacts")
    _add_common_flags(p, needs_config=True)
    p.set_defaults(func=cmd_report)
    return parser


def _resolve_config(args) -> dict:
    if args.config:
        config = load_config(args.config)
    elif args.preset:
        config = load_preset(args.preset)
    else:
        raise ConfigError("one of --config or --preset is required")
    config = apply_overrides(config, args.overrides)
    if args.out is not None:
        config["out_dir"] = args.out
    if args.seed is not None:
        config["training"]["seed"] = args.seed
        config["eval"]["rollout_seed"] = args.seed
    return config


def _dataset_dir(config: dict) -> Path:
    return Path(config["out_dir"]) / "dataset"


def _model_dir(config: dict) -> Path:
    return Path(config["out_dir"]) / "models" / config["kind"]


def _eval_dir(config: dict) -> Path:
    return Path(config["out_dir"]) / "eval" / config["kind"]


def generate_artifacts(config: dict, threads: int = 1) -> dict:
    """Roads, expert traces, and split index under out_dir/dataset;
    returns the manifest."""
    road_cfg = config["road"]
    data_cfg = config["dataset"]
    root = _dataset_dir(config)
    (root / "roads").mkdir(parents=True, exist_ok=True)
    (root / "traces").mkdir(parents=True, exist_ok=True)
    jobs = []
    for seed in road_cfg["seeds"]:
        for season in road_cfg["seasons"]:
            road = generate_road(
                seed,
                length=road_cfg["length"],
                kappa_max=road_cfg["kappa_max"],
                smoothness=road_cfg["smoothness"],
                season=season,
            )
            save_road(road, root / "roads" / f"road_{seed}_{season}.json")
            for oi, offset in enumerate(data_cfg["start_offsets"]):
                jobs.append((road, season, seed, oi, float(offset)))

    def run(job):
        road, season, seed, oi, offset = job
        return rollout_expert(
            road, season=season, seed=(seed * 1000 + oi), start_d=offset, keep_frames=True
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            traces = list(pool.map(run, jobs))
    else:
        traces = [run(job) for job in jobs]
    dataset = build_dataset(traces, window=data_cfg["window"], stride=data_cfg["stride"])
    trace_dirs = []
    for idx, trace in enumerate(traces):
        directory = root / "traces" / f"trace_{idx:03d}"
        save_trace(trace, directory)
        trace_dirs.append(directory.relative_to(root).as_posix())
    splits = {
        "format_version": 1,
        "window": data_cfg["window"],
        "stride": data_cfg["stride"],
        "trace_dirs": trace_dirs,
        "train": [list(w) for w in dataset.train],
        "val": [list(w) for w in dataset.val],
        "test": [list(w) for w in dataset.test],
    }
    write_text_atomic(root / "splits.json", json.dumps(splits, indent=2, sort_keys=True) + "\n")
    return write_manifest(
        root,
        extra={
            "config_hash": config_hash(config),
            "window_counts": {
                "train": len(dataset.train),
                "val": len(dataset.val),
                "test": len(dataset.test),
                "per_trace": [window_count(len(t), data_cfg["window"], data_cfg["stride"]) for t in traces],
            },
        },
    )


def load_dataset(config: dict):
    """Rebuild the LaneDataset recorded by generate_artifacts."""
    from .simulator import LaneDataset

    root = _dataset_dir(config)
    splits_path = root / "splits.json"
    with open(splits_path, "r", encoding="ascii") as fh:
        splits = json.load(fh)
    traces = [
        load_trace(root / rel, load_frames=True) for rel in splits["trace_dirs"]
    ]
    return LaneDataset(
        traces=traces,
        window=splits["window"],
        train=[tuple(w) for w in splits["train"]],
        val=[tuple(w) for w in splits["val"]],
        test=[tuple(w) for w in splits["test"]],
    )


def cmd_generate(args) -> int:
    config = _resolve_config(args)
    manifest = generate_artifacts(config, threads=args.threads)
    counts = manifest["window_counts"]
    print(
        f"dataset at {_dataset_dir(config)}: "
        f"{counts['train']} train / {counts['val']} val / {counts['test']} test windows"
    )
    return EXIT_OK


def train_model(config: dict, dataset=None):
    """Train the configured kind; returns (TrainResult, model_dir)."""
    if dataset is None:
        dataset = load_dataset(config)
    tconf = training_config(config)
    rng = np.random.default_rng(tconf.seed)
    model = init_policy(
        CellKind(config["kind"]), rng, m=config["m"], n=config["n"], dt=config["dt"]
    )
    return train(model, dataset, tconf)


def cmd_train(args) -> int:
    config = _resolve_config(args)
    model_dir = _model_dir(config)
    model_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = train_model(config)
    except TrainingDivergedError as err:
        # keep whatever is usable for post-mortem, then fail
        if err.history:
            write_history_csv(err.history, err.best_epoch, model_dir / "history.csv")
        if err.model is not None:
            write_text_atomic(model_dir / "checkpoint.json", checkpoint_to_json(err.model))
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    write_text_atomic(
        model_dir / "checkpoint.json", checkpoint_to_json(result.model, result.moments)
    )
    write_history_csv(result.history, result.best_epoch, model_dir / "history.csv")
    best = result.history[result.best_epoch]
    print(
        f"{config['kind']}: best epoch {result.best_epoch} "
        f"val_mse {best['val_mse']:.6f} val_weighted {best['val_weighted']:.6f}"
    )
    return EXIT_OK


def evaluate_model(config: dict, model, out_dir: Path, threads: int = 1) -> MetricsReport:
    """Closed-loop rollouts, correlation table, SSIM robustness, and
    saliency images for one trained model."""
    road_cfg = config["road"]
    eval_cfg = config["eval"]
    kind = config["kind"]
    out_dir.mkdir(parents=True, exist_ok=True)
    report = MetricsReport()
    report.metadata = {
        "config_hash": config_hash(config),
        "kind": kind,
        "eval_road_seed": road_cfg["eval_seed"],
        "rollout_seed": eval_cfg["rollout_seed"],
        "reference_values": {
            season: REAL_ROAD_REFERENCE[season].get(kind)
            for season in road_cfg["seasons"]
        },
    }
    variances = [0.0] + [float(v) for v in eval_cfg["noise_variances"]]
    for season in road_cfg["seasons"]:
        road = generate_road(
            road_cfg["eval_seed"],
            length=road_cfg["length"],
            kappa_max=road_cfg["kappa_max"],
            smoothness=road_cfg["smoothness"],
            season=season,
        )
        trace = rollout_closed_loop(
            model,
            road,
            seed=eval_cfg["rollout_seed"],
            season=season,
            keep_frames=True,
        )
        save_trace(
            trace,
            out_dir / f"trace_{season}",
            png_samples=eval_cfg["saliency_samples"],
            save_frames=False,
        )
        report.add_correlations(kind, season, correlation_table([trace]))
        report.metadata.setdefault("rollouts", {})[season] = {
            "completed": trace.completed,
            "fraction_completed": trace.fraction_completed,
            "crash_step": trace.crash_step,
            "steps": len(trace),
        }
        picks = np.unique(
            np.linspace(0, len(trace) - 1, min(eval_cfg["ssim_frames"], len(trace))).astype(int)
        )
        frames = [trace.frames[i].astype(float) for i in picks]
        if threads > 1:
            chunks = np.array_split(np.arange(len(frames)), threads)
            results: dict[float, np.ndarray] = {v: np.empty(len(frames)) for v in variances}

            def run(chunk):
                sub = ssim_robustness(
                    model, [frames[i] for i in chunk], variances,
                    seed=eval_cfg["rollout_seed"],
                )
                return chunk, sub

            with ThreadPoolExecutor(max_workers=threads) as pool:
                for chunk, sub in pool.map(run, [c for c in chunks if len(c)]):
                    for v in variances:
                        results[v][chunk] = sub[v]
            samples = results
        else:
            samples = ssim_robustness(
                model, frames, variances, seed=eval_cfg["rollout_seed"]
            )
        report.add_ssim_samples(kind, season, samples)
        for k in range(min(eval_cfg["saliency_samples"], len(frames))):
            save_image_png(
                model.saliency(frames[k]), out_dir / f"saliency_{season}_{k}.png"
            )
    history_path = _model_dir(config) / "history.csv"
    if history_path.exists():
        history, best_epoch = read_history_csv(history_path)
        best = history[best_epoch]
        report.losses[kind] = {
            "best_epoch": best_epoch,
            "val_mse": best["val_mse"],
            "val_weighted": best["val_weighted"],
        }
    write_text_atomic(out_dir / "metrics.json", report.to_json())
    report.write_ssim_csv(out_dir / "ssim.csv")
    return report


def cmd_eval(args) -> int:
    config = _resolve_config(args)
    checkpoint = _model_dir(config) / "checkpoint.json"
    model, _ = load_checkpoint(checkpoint)
    if model.cell.kind.value != config["kind"]:
        raise ConfigError(
            f"checkpoint holds {model.cell.kind.value}, config expects {config['kind']}"
        )
    report = evaluate_model(config, model, _eval_dir(config), threads=args.threads)
    for season, info in report.metadata.get("rollouts", {}).items():
        status = "completed" if info["completed"] else f"crashed at step {info['crash_step']}"
        print(f"{config['kind']}/{season}: {status}, "
              f"{100 * info['fraction_completed']:.1f}% of road")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    kinds = [CellKind(args.kind)] if args.kind else list(CellKind)
    corrupt = ("readout.w", 1e-3) if args.corrupt else None
    seed = args.seed if args.seed is not None else 0
    failed = False

    def run(kind):
        return gradient_check(kind, seed=seed, corrupt=corrupt)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            reports = list(pool.map(run, kinds))
    else:
        reports = [run(kind) for kind in kinds]
    for report in reports:
        for line in report.lines():
            print(line)
        failed = failed or not report.passed
    return EXIT_NUMERIC if failed else EXIT_OK


def _format_report(config: dict) -> str:
    out_root = Path(config["out_dir"])
    lines = ["# Run summary", ""]
    models_root = out_root / "models"
    rows = []
    for model_dir in sorted(models_root.iterdir()) if models_root.is_dir() else []:
        history_path = model_dir / "history.csv"
        if not history_path.is_file():
            continue
        history, best_epoch = read_history_csv(history_path)
        best = history[best_epoch]
        rows.append((model_dir.name, best_epoch, best["val_mse"], best["val_weighted"]))
    if rows:
        lines += ["## Validation losses", "",
                  "| model | best epoch | val MSE | weighted val |",
                  "| --- | --- | --- | --- |"]
        for name, epoch, mse, weighted in rows:
            lines.append(f"| {name} | {epoch} | {mse:.6f} | {weighted:.6f} |")
        lines.append("")
    eval_root = out_root / "eval"
    for eval_dir in sorted(eval_root.iterdir()) if eval_root.is_dir() else []:
        metrics_path = eval_dir / "metrics.json"
        if not metrics_path.is_file():
            continue
        with open(metrics_path, "r", encoding="ascii") as fh:
            report = MetricsReport.from_json(fh.read())
        kind = eval_dir.name
        lines.append(f"## {kind} interpretability")
        lines.append("")
        for key in sorted(report.correlations):
            table = report.correlations[key]
            season = key.split("/", 1)[1]
            reference = REAL_ROAD_REFERENCE.get(season, {}).get(kind)
            ref_text = (
                f" (real-road reference {reference[0]:.3f} +- {reference[1]:.3f})"
                if reference
                else ""
            )
            lines.append(
                f"- |corr| {season}: {table['mean']:.3f} +- {table['std']:.3f}{ref_text}"
            )
        for season in config["road"]["seasons"]:
            for variance in [0.0] + list(config["eval"]["noise_variances"]):
                values = report.ssim_values(kind, season, float(variance))
                if values.size:
                    lines.append(
                        f"- SSIM median {season} var {variance}: {np.median(values):.4f}"
                    )
        lines.append("")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    config = _resolve_config(args)
    text = _format_report(config)
    write_text_atomic(Path(config["out_dir"]) / "report.md", text)
    print(text, end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericOverflowError, TrainingDivergedError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
