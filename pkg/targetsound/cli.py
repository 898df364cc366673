"""Command line interface: synthesize data, train stages, evaluate, ablate and plot."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .archive import load_bundle
from .config import (
    SCHEMA_VERSION,
    AblationRow,
    ExperimentConfig,
    config_hash,
    load_config,
    save_config,
    substream_seed,
    with_overrides,
)
from .errors import EXIT_OK, EXIT_RUNTIME, TargetSoundError
from .manifest import MANIFEST_NAME, build_dataset, load_manifest
from .metrics import EvalReport, evaluate
from .plotting import plot_example
from .synth import load_backgrounds, load_bank, make_toy_backgrounds, make_toy_bank
from .trainer import (
    RunLog,
    TrainingData,
    checkpoint_path,
    new_bundle,
    run_pipeline,
    train_single_stage,
    train_stage1,
    train_stage2,
)

log = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_NAME = "targetsound.log"
_HANDLER_TAG = "_targetsound_cli"


def setup_logging(out_dir: Optional[Path], verbose: bool = False) -> None:
    """Attach a log file under ``out_dir`` and a console handler to the root logger."""

    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    for handler in list(root.handlers):
        if getattr(handler, _HANDLER_TAG, False):
            root.removeHandler(handler)
            handler.close()

    formatter = logging.Formatter(LOG_FORMAT)
    console = logging.StreamHandler()
    console.setLevel(logging.DEBUG if verbose else logging.INFO)
    console.setFormatter(formatter)
    setattr(console, _HANDLER_TAG, True)
    root.addHandler(console)

    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(Path(out_dir) / LOG_NAME, mode="a")
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        setattr(file_handler, _HANDLER_TAG, True)
        root.addHandler(file_handler)


def cmd_synth(cfg: ExperimentConfig, out_dir: Path) -> Tuple[Path, Path]:
    """Build the train and test splits; returns both manifest paths."""

    data = cfg.data
    synth = data.synth
    if data.bank_dir:
        fg_bank, names = load_bank(Path(data.bank_dir), synth.sample_rate)
        log.info("Loaded %d foreground clips over %d classes", len(fg_bank), len(names))
    else:
        fg_bank = make_toy_bank(synth, data.toy_clips_per_class, substream_seed(cfg.seed, "bank"))
    if data.background_dir:
        bg_bank = load_backgrounds(Path(data.background_dir), synth.sample_rate)
    else:
        bg_bank = make_toy_backgrounds(synth, data.toy_backgrounds, substream_seed(cfg.seed, "bank:bg"))

    out = Path(out_dir)
    threads = cfg.training.threads
    train = build_dataset(fg_bank, bg_bank, synth, data.n_train, out / "train", "train", threads)
    test = build_dataset(fg_bank, bg_bank, synth, data.n_test, out / "test", "test", threads)
    save_config(cfg, out / "config.json")
    return train.path, test.path


def resolve_data(cfg: ExperimentConfig, out_dir: Path, data_dir: Optional[Path] = None) -> TrainingData:
    """Manifests from ``--data``, from the config, or synthesized under ``<out>/data``."""

    if data_dir is not None:
        return TrainingData(load_manifest(Path(data_dir) / "train"), load_manifest(Path(data_dir) / "test"))
    if cfg.data.train_manifest:
        valid = load_manifest(Path(cfg.data.test_manifest)) if cfg.data.test_manifest else None
        return TrainingData(load_manifest(Path(cfg.data.train_manifest)), valid)
    generated = Path(out_dir) / "data"
    if not (generated / "train" / MANIFEST_NAME).exists():
        cmd_synth(cfg, generated)
    return TrainingData(load_manifest(generated / "train"), load_manifest(generated / "test"))


def cmd_train(cfg: ExperimentConfig, stage: str, out_dir: Path, data_dir: Optional[Path] = None, resume: bool = False) -> RunLog:
    data = resolve_data(cfg, out_dir, data_dir)
    save_config(cfg, Path(out_dir) / "config.json")
    if stage == "pipeline":
        return run_pipeline(data, cfg, out_dir, resume=resume)
    return train_single_stage(data, cfg, int(stage), out_dir, resume=resume)


def cmd_eval(cfg: ExperimentConfig, checkpoint: Path, manifest: Path, out_dir: Path) -> EvalReport:
    bundle = load_bundle(checkpoint)
    report = evaluate(load_manifest(manifest), bundle, cfg)
    report.write(out_dir)
    return report


def _row_config(cfg: ExperimentConfig, row: AblationRow) -> ExperimentConfig:
    loss = dataclasses.replace(cfg.loss_weights, fmse=row.f, tmse=row.t, sisdr=row.s, tau=row.tau)
    return dataclasses.replace(cfg, loss_weights=loss)


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    return float(np.mean(values)), float(np.std(values))


def cmd_ablate(cfg: ExperimentConfig, out_dir: Path, seeds: Sequence[int], data_dir: Optional[Path] = None) -> List[Dict[str, object]]:
    """Train and score the extractor once per loss row and seed.

    The detector is trained once per seed and shared by every row.
    """

    out = Path(out_dir)
    data = resolve_data(cfg, out, data_dir)
    if data.valid is None:
        raise TargetSoundError("Ablation needs a test manifest to score")
    scores: Dict[int, Dict[str, List[float]]] = {}
    for seed in seeds:
        seed_cfg = with_overrides(cfg, seed=seed)
        seed_dir = out / f"seed{seed}"
        detector_ckpt = checkpoint_path(seed_dir / "detector", 0, 1)
        if seed_cfg.training.use_detection and not detector_ckpt.exists():
            train_stage1(data, new_bundle(seed_cfg), seed_cfg, out_dir=seed_dir / "detector")
        for i, row in enumerate(cfg.ablation.rows):
            row_cfg = _row_config(seed_cfg, row)
            bundle = load_bundle(detector_ckpt) if row_cfg.training.use_detection else new_bundle(row_cfg)
            bundle.config_hash = config_hash(row_cfg)
            train_stage2(dataclasses.replace(data, valid=None), bundle, row_cfg, out_dir=seed_dir / f"row{i:02d}")
            report = evaluate(data.valid, bundle, row_cfg, with_extraction=True, with_detection=False)
            report.write(seed_dir / f"row{i:02d}")
            bucket = scores.setdefault(i, {"si_sdri": [], "si_sdri_t": []})
            bucket["si_sdri"].append(report.aggregate["si_sdri"])
            bucket["si_sdri_t"].append(report.aggregate["si_sdri_t"])
            log.info("Seed %d row %s: SI-SDRi %.3f dB", seed, row.label, report.aggregate["si_sdri"])

    table = []
    for i, row in enumerate(cfg.ablation.rows):
        sdri_mean, sdri_std = _mean_std(scores[i]["si_sdri"])
        sdri_t_mean, sdri_t_std = _mean_std(scores[i]["si_sdri_t"])
        table.append(
            {
                "label": row.label,
                "f": row.f,
                "t": row.t,
                "s": row.s,
                "tau": row.tau,
                "n_seeds": len(seeds),
                "si_sdri_mean": sdri_mean,
                "si_sdri_std": sdri_std,
                "si_sdri_t_mean": sdri_t_mean,
                "si_sdri_t_std": sdri_t_std,
            }
        )
    _write_table(table, out / "ablation", cfg)
    return table


def _write_table(rows: List[Dict[str, object]], stem: Path, cfg: ExperimentConfig) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump({"schema_version": SCHEMA_VERSION, "config_hash": config_hash(cfg), "rows": rows}, f, indent=2)
    with open(stem.with_suffix(".csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()) if rows else ["label"])
        writer.writeheader()
        writer.writerows(rows)


def cmd_plot(cfg: ExperimentConfig, example_id: str, checkpoint: Path, manifest: Path, out_dir: Path) -> List[Path]:
    bundle = load_bundle(checkpoint)
    return plot_example(load_manifest(manifest), example_id, bundle, cfg, out_dir)


def _multi_seed_train(cfg: ExperimentConfig, args: argparse.Namespace, seeds: Sequence[int]) -> None:
    """Full pipeline per seed, then mean and std of the test metrics."""

    out = Path(args.out)
    per_seed: Dict[str, List[float]] = {}
    for seed in seeds:
        seed_cfg = with_overrides(cfg, seed=seed)
        seed_dir = out / f"seed{seed}"
        data = resolve_data(seed_cfg, seed_dir, Path(args.data) if args.data else None)
        runlog = run_pipeline(data, seed_cfg, seed_dir, resume=args.resume)
        if data.valid is None:
            continue
        report = evaluate(data.valid, load_bundle(Path(runlog.checkpoints[-1])), seed_cfg)
        report.write(seed_dir)
        for key, value in report.aggregate.items():
            per_seed.setdefault(key, []).append(value)
    rows = [{"metric": k, "n_seeds": len(v), "mean": _mean_std(v)[0], "std": _mean_std(v)[1]} for k, v in per_seed.items()]
    _write_table(rows, out / "seeds_summary", cfg)
    for row in rows:
        print(f"{row['metric']}: {row['mean']:.4f} ± {row['std']:.4f} over {row['n_seeds']} seeds")


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Experiment config (JSON).")
    common.add_argument("--out", required=True, help="Output directory.")
    common.add_argument("--seed", type=int, help="Override the config's root seed.")
    common.add_argument("--threads", type=int, help="Cap on worker threads.")
    common.add_argument("--verbose", action="store_true", help="Log debug messages to the console.")

    parser = argparse.ArgumentParser(prog="targetsound", description="Timestamp-guided target sound extraction.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="Synthesize train and test mixtures.")

    train = sub.add_parser("train", parents=[common], help="Train one stage or the whole pipeline.")
    train.add_argument("--stage", choices=["1", "2", "3", "pipeline"], default="pipeline")
    train.add_argument("--data", help="Directory written by 'synth' (holds train/ and test/).")
    train.add_argument("--resume", action="store_true", help="Continue from finished stages and resume files.")
    train.add_argument("--seeds", type=int, default=1, help="Repeat the pipeline over this many seeds.")

    ev = sub.add_parser("eval", parents=[common], help="Score a checkpoint on a manifest.")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)

    ablate = sub.add_parser("ablate", parents=[common], help="Loss-term and weight ablation of the extractor.")
    ablate.add_argument("--data", help="Directory written by 'synth' (holds train/ and test/).")
    ablate.add_argument("--seeds", type=int, default=1)

    plot = sub.add_parser("plot", parents=[common], help="Spectrogram figures for one example.")
    plot.add_argument("--checkpoint", required=True)
    plot.add_argument("--manifest", required=True)
    plot.add_argument("--example-id", required=True)

    return parser.parse_args(argv)


def _run(args: argparse.Namespace) -> int:
    cfg = with_overrides(load_config(Path(args.config)), seed=args.seed, threads=args.threads)
    torch.set_num_threads(cfg.training.threads)
    out = Path(args.out)
    seeds = [cfg.seed + k for k in range(max(1, getattr(args, "seeds", 1)))]

    if args.command == "synth":
        train, test = cmd_synth(cfg, out)
        print(f"Train manifest: {train}\nTest manifest: {test}")
    elif args.command == "train":
        if len(seeds) > 1:
            if args.stage != "pipeline":
                raise TargetSoundError("--seeds applies to the full pipeline only")
            _multi_seed_train(cfg, args, seeds)
        else:
            runlog = cmd_train(cfg, args.stage, out, Path(args.data) if args.data else None, args.resume)
            print(f"Run log written to {out}; checkpoints: {len(runlog.checkpoints)}")
    elif args.command == "eval":
        report = cmd_eval(cfg, Path(args.checkpoint), Path(args.manifest), out)
        for key, value in report.aggregate.items():
            print(f"{key}: {value:.4f}")
    elif args.command == "ablate":
        for row in cmd_ablate(cfg, out, seeds, Path(args.data) if args.data else None):
            print(f"{row['label']:<12} SI-SDRi {row['si_sdri_mean']:.3f} ± {row['si_sdri_std']:.3f}  SI-SDRi-t {row['si_sdri_t_mean']:.3f} ± {row['si_sdri_t_std']:.3f}")
    elif args.command == "plot":
        for path in cmd_plot(cfg, args.example_id, Path(args.checkpoint), Path(args.manifest), out):
            print(f"Wrote {path}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    setup_logging(Path(args.out), args.verbose)
    try:
        return _run(args)
    except TargetSoundError as exc:
        log.error("%s failed: %s", args.command, exc, exc_info=True)
        print(f"Error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        log.error("%s failed unexpectedly: %s", args.command, exc, exc_info=True)
        print(f"Unexpected error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
