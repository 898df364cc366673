"""Three-stage mutual learning between the detection and extraction branches.

Stage 1 trains the detection branch. Stage 2 freezes it and trains the
extraction branch, conditioning on the detector's track. Stage 3 freezes the
extraction branch and fine-tunes the detector with an embedding averaged over
the reference clip and the extracted sound. Cycles after the first repeat
stages 2 and 3.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset, Subset

from .archive import load_bundle, save_bundle
from .config import SCHEMA_VERSION, ExperimentConfig, StagePlan, config_hash, substream_seed
from .dsp import FrameSpec
from .errors import EmptyRegion, FreezeViolation, StageOrderError, TrainingDiverged
from .losses import LossTerms, LossWeights, RegionMask, tse_joint_loss, tsd_joint_loss
from .manifest import Manifest
from .models import DetectionTrack, ModelBundle, build_bundle, parameter_hash, reinitialize, resample_frames

log = logging.getLogger(__name__)

STEP_FIELDS = (
    "step",
    "cycle",
    "stage",
    "epoch",
    "loss_total",
    "loss_fmse",
    "loss_tmse",
    "loss_sisdr",
    "loss_target",
    "loss_cls",
    "loss_bce",
)

TSD_NETWORKS = ("tsd.conditional_encoder", "tsd.sound_encoder", "tsd.detector", "tsd.classifier")
TSE_NETWORKS = ("tse.conditional_encoder", "tse.sound_encoder", "tse.extractor", "tse.classifier")

# stage -> (trainable, frozen)
STAGE_LAYOUT = {
    1: (TSD_NETWORKS, TSE_NETWORKS),
    2: (TSE_NETWORKS, TSD_NETWORKS),
    3: (TSD_NETWORKS, TSE_NETWORKS),
}


@dataclass(frozen=True)
class TrainingData:
    train: Manifest
    valid: Optional[Manifest] = None


@dataclass
class RunLog:
    """Append-only record of a run: step losses, epoch means, stage metrics."""

    seed: int
    config_hash: str
    schema_version: int = SCHEMA_VERSION
    steps: List[Dict[str, float]] = field(default_factory=list)
    epochs: List[Dict[str, float]] = field(default_factory=list)
    stages: List[Dict[str, object]] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, object]) -> "RunLog":
        return cls(**raw)  # type: ignore[arg-type]

    def write(self, out_dir: Path) -> Tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "runlog.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=STEP_FIELDS)
            writer.writeheader()
            for row in self.steps:
                writer.writerow({k: row.get(k, "") for k in STEP_FIELDS})
        json_path = out / "runlog.json"
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        return csv_path, json_path

    @classmethod
    def read(cls, out_dir: Path) -> "RunLog":
        with open(Path(out_dir) / "runlog.json", "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def frame_labels(events: Sequence, centers: np.ndarray) -> np.ndarray:
    """1.0 for frames whose centre (seconds) lies in a target interval."""

    labels = np.zeros(centers.shape[0], dtype=np.float32)
    for event in events:
        labels[(centers >= event.onset) & (centers < event.offset)] = 1.0
    return labels


def resample_track(d: DetectionTrack, target_frames: int) -> DetectionTrack:
    """Stretch or squeeze a track onto ``target_frames`` frames by linear interpolation."""

    scores = resample_frames(torch.as_tensor(d.scores, dtype=torch.float64), target_frames)
    rate = d.frame_rate * target_frames / len(d)
    return DetectionTrack(scores.numpy(), rate)


def fuse_embeddings(e: Union[torch.Tensor, np.ndarray], e_prime: Union[torch.Tensor, np.ndarray]):
    """Average of the reference and extracted-sound embeddings."""

    return (e + e_prime) / 2


class MixtureDataset(Dataset):
    """Examples of a manifest, loaded lazily from WAV files."""

    def __init__(self, manifest: Manifest, bundle: ModelBundle) -> None:
        self.manifest = manifest
        self.sample_rate = bundle.synth.sample_rate
        self.n_classes = bundle.model.n_classes
        self.n_samples = bundle.synth.clip_samples
        self.centers = bundle.tsd.sound_encoder.frame_centers(self.n_samples, self.sample_rate)

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, index: int) -> Dict[str, object]:
        record = self.manifest.records[index]
        mixture, target, reference = self.manifest.load_audio(record, self.sample_rate)
        onehot = np.zeros(self.n_classes, dtype=np.float32)
        onehot[record.class_id] = 1.0
        return {
            "index": index,
            "mixture": torch.as_tensor(mixture.samples, dtype=torch.float32),
            "target": torch.as_tensor(target.samples, dtype=torch.float32),
            "reference": torch.as_tensor(reference.samples, dtype=torch.float32),
            "onehot": torch.as_tensor(onehot),
            "labels": torch.as_tensor(frame_labels(record.events, self.centers)),
            "mask": RegionMask.from_events(record.events, len(mixture), self.sample_rate),
        }


def collate(items: Sequence[Dict[str, object]]) -> Dict[str, object]:
    batch: Dict[str, object] = {"masks": [item["mask"] for item in items]}
    batch["index"] = [item["index"] for item in items]
    for key in ("mixture", "target", "reference", "onehot", "labels"):
        batch[key] = torch.stack([item[key] for item in items])
    return batch


def _set_trainable(bundle: ModelBundle, stage: int) -> Tuple[List[nn.Parameter], Dict[str, nn.Module]]:
    trainable, frozen = STAGE_LAYOUT[stage]
    nets = bundle.networks()
    params: List[nn.Parameter] = []
    for name in trainable:
        nets[name].train()
        for p in nets[name].parameters():
            p.requires_grad = True
            params.append(p)
    for name in frozen:
        nets[name].eval()
        for p in nets[name].parameters():
            p.requires_grad = False
    return params, {name: nets[name] for name in frozen}


def _detector_track(bundle: ModelBundle, mixture: torch.Tensor, reference: torch.Tensor, binarize: bool) -> torch.Tensor:
    with torch.no_grad():
        e = bundle.tsd.conditional_encoder(reference)
        scores = bundle.tsd.detector(bundle.tsd.sound_encoder(mixture), e)
    return (scores >= 0.5).to(scores.dtype) if binarize else scores


def stage3_conditioning(
    bundle: ModelBundle,
    mixture: torch.Tensor,
    reference: torch.Tensor,
    cfg: ExperimentConfig,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Embeddings ``(e, e', fused)`` the detector sees in stage 3.

    ``e'`` encodes the frozen extractor's output with the same conditional
    encoder that encodes the reference.
    """

    with torch.no_grad():
        track = None
        if cfg.training.use_detection:
            track = _detector_track(bundle, mixture, reference, cfg.training.binarize_detection)
        e_tse = bundle.tse.conditional_encoder(reference)
        extracted = bundle.tse.extract(mixture, e_tse, track)
    e = bundle.tsd.conditional_encoder(reference)
    e_prime = bundle.tsd.conditional_encoder(extracted)
    return e, e_prime, fuse_embeddings(e, e_prime)


StepFn = Callable[[ModelBundle, Dict[str, object], ExperimentConfig, Dict[str, float]], torch.Tensor]


def _stage1_step(bundle: ModelBundle, batch: Dict[str, object], cfg: ExperimentConfig, parts: Dict[str, float]) -> torch.Tensor:
    tsd = bundle.tsd
    e = tsd.conditional_encoder(batch["reference"])
    scores = tsd.detector(tsd.sound_encoder(batch["mixture"]), e)
    return tsd_joint_loss(
        scores, batch["labels"], tsd.classifier(e), batch["onehot"], cfg.loss_weights.reduction, parts
    )


def _stage2_step(bundle: ModelBundle, batch: Dict[str, object], cfg: ExperimentConfig, parts: Dict[str, float]) -> torch.Tensor:
    track = None
    if cfg.training.use_detection:
        track = _detector_track(bundle, batch["mixture"], batch["reference"], cfg.training.binarize_detection)
    tse = bundle.tse
    e = tse.conditional_encoder(batch["reference"])
    y_hat = tse.extract(batch["mixture"], e, track)
    lw = cfg.loss_weights
    probs = tse.classifier(e)
    terms = LossTerms(lw.fmse, lw.tmse, lw.sisdr)
    frame = FrameSpec(lw.window_size, lw.hop_size)
    try:
        return tse_joint_loss(
            y_hat, batch["target"], probs, batch["onehot"], batch["masks"],
            LossWeights(lw.alpha, lw.beta, lw.tau), terms, frame, lw.reduction, parts,
        )
    except EmptyRegion as exc:
        log.warning("Batch %s: %s; using the unweighted extraction loss", batch.get("index"), exc)
        return tse_joint_loss(
            y_hat, batch["target"], probs, batch["onehot"], batch["masks"],
            LossWeights(lw.alpha, lw.beta, 0.0), terms, frame, lw.reduction, parts,
        )


def _stage3_step(bundle: ModelBundle, batch: Dict[str, object], cfg: ExperimentConfig, parts: Dict[str, float]) -> torch.Tensor:
    e, _, fused = stage3_conditioning(bundle, batch["mixture"], batch["reference"], cfg)
    tsd = bundle.tsd
    scores = tsd.detector(tsd.sound_encoder(batch["mixture"]), fused)
    return tsd_joint_loss(
        scores, batch["labels"], tsd.classifier(e), batch["onehot"], cfg.loss_weights.reduction, parts
    )


STEP_FUNCTIONS: Dict[int, StepFn] = {1: _stage1_step, 2: _stage2_step, 3: _stage3_step}


def checkpoint_path(out_dir: Path, cycle: int, stage: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"cycle{cycle}_stage{stage}.ckpt"


def _resume_path(out_dir: Path, cycle: int, stage: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"cycle{cycle}_stage{stage}.resume.pt"


def _validate(bundle: ModelBundle, stage: int, data: TrainingData, cfg: ExperimentConfig) -> Dict[str, float]:
    from .metrics import evaluate

    if data.valid is None or len(data.valid) == 0:
        return {}
    report = evaluate(data.valid, bundle, cfg, with_extraction=stage == 2, with_detection=stage != 2)
    metrics = {f"valid_{k}": v for k, v in report.aggregate.items()}
    if stage == 2:
        head = Manifest(data.train.path, data.train.records[: max(1, len(data.valid))])
        train_report = evaluate(head, bundle, cfg, with_extraction=True, with_detection=False)
        metrics.update({f"train_{k}": v for k, v in train_report.aggregate.items()})
    return metrics


def _run_stage(
    stage: int,
    data: TrainingData,
    bundle: ModelBundle,
    cfg: ExperimentConfig,
    runlog: RunLog,
    out_dir: Optional[Path] = None,
    cycle: int = 0,
    resume: bool = False,
) -> ModelBundle:
    plan: StagePlan = cfg.stage(stage)
    params, frozen = _set_trainable(bundle, stage)
    optimizer = torch.optim.Adam(params, lr=plan.lr, weight_decay=plan.weight_decay)
    frozen_before = {name: parameter_hash(net) for name, net in frozen.items()}

    start_epoch = 0
    last_good: Optional[Path] = None
    if out_dir is not None:
        resume_file = _resume_path(out_dir, cycle, stage)
        if resume and resume_file.exists():
            state = torch.load(resume_file, map_location="cpu")
            bundle.load_state_dict(state["bundle"])
            optimizer.load_state_dict(state["optimizer"])
            start_epoch = int(state["epoch"])
            bundle.step = int(state["step"])
            restored = RunLog.from_dict(state["runlog"])
            runlog.steps[:], runlog.epochs[:] = restored.steps, restored.epochs
            runlog.stages[:], runlog.checkpoints[:] = restored.stages, restored.checkpoints
            last_good = resume_file
            log.info("Resuming cycle %d stage %d at epoch %d", cycle, stage, start_epoch)

    dataset = MixtureDataset(data.train, bundle)
    step_fn = STEP_FUNCTIONS[stage]
    log.info("Stage %d (cycle %d): %d epochs over %d examples", stage, cycle, plan.epochs, len(dataset))

    for epoch in range(start_epoch, plan.epochs):
        gen = torch.Generator().manual_seed(substream_seed(cfg.seed, f"shuffle:{cycle}:{stage}:{epoch}"))
        order = torch.randperm(len(dataset), generator=gen).tolist()
        loader = DataLoader(
            Subset(dataset, order),
            batch_size=plan.batch_size,
            shuffle=False,
            collate_fn=collate,
        )
        totals: Dict[str, float] = {}
        n_batches = 0
        for batch in loader:
            parts: Dict[str, float] = {}
            loss = step_fn(bundle, batch, cfg, parts)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"Loss became {float(loss)} at stage {stage}, epoch {epoch + 1}, step {bundle.step}",
                    last_good,
                )
            optimizer.zero_grad()
            loss.backward()
            if cfg.training.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.training.grad_clip)
            optimizer.step()
            bundle.step += 1

            row = {"step": bundle.step, "cycle": cycle, "stage": stage, "epoch": epoch + 1, "loss_total": float(loss.detach())}
            row.update({f"loss_{k}": v for k, v in parts.items()})
            runlog.steps.append(row)
            for key, value in row.items():
                if key.startswith("loss_"):
                    totals[key] = totals.get(key, 0.0) + value
            n_batches += 1
            log.debug("stage %d step %d loss %.5f", stage, bundle.step, row["loss_total"])

        means = {k: v / max(1, n_batches) for k, v in totals.items()}
        runlog.epochs.append({"cycle": cycle, "stage": stage, "epoch": epoch + 1, **means})
        log.info("Stage %d epoch %d/%d: loss %.4f", stage, epoch + 1, plan.epochs, means.get("loss_total", math.nan))
        if out_dir is not None:
            resume_file = _resume_path(out_dir, cycle, stage)
            resume_file.parent.mkdir(parents=True, exist_ok=True)
            torch.save(
                {
                    "bundle": bundle.state_dict(),
                    "optimizer": optimizer.state_dict(),
                    "epoch": epoch + 1,
                    "step": bundle.step,
                    "runlog": runlog.to_dict(),
                },
                resume_file,
            )
            last_good = resume_file

    audit = {}
    for name, net in frozen.items():
        after = parameter_hash(net)
        if after != frozen_before[name]:
            raise FreezeViolation(f"{name} changed during stage {stage} although it is frozen")
        audit[name] = after
    for net in bundle.networks().values():
        net.requires_grad_(True)

    bundle.eval()
    bundle.stage = stage
    bundle.cycle = cycle
    metrics = _validate(bundle, stage, data, cfg)
    bundle.history.update({f"cycle{cycle}_stage{stage}_{k}": v for k, v in metrics.items()})
    runlog.stages.append({"cycle": cycle, "stage": stage, "metrics": metrics, "frozen_hashes": audit})
    log.info("Stage %d done: %s", stage, ", ".join(f"{k}={v:.4f}" for k, v in metrics.items()) or "no validation set")

    if out_dir is not None:
        ckpt = save_bundle(bundle, checkpoint_path(out_dir, cycle, stage))
        runlog.checkpoints.append(str(ckpt))
        _resume_path(out_dir, cycle, stage).unlink(missing_ok=True)
        runlog.write(out_dir)
    return bundle


def _require_stage(bundle: ModelBundle, needed: int, stage: int) -> None:
    if bundle.stage < needed:
        raise StageOrderError(f"Stage {stage} needs a stage-{needed} checkpoint; bundle is at stage {bundle.stage}")


def train_stage1(data: TrainingData, bundle: ModelBundle, cfg: ExperimentConfig, runlog: Optional[RunLog] = None, **kwargs) -> ModelBundle:
    """Train the detection branch on ``bce + cls``."""

    runlog = runlog or RunLog(cfg.seed, config_hash(cfg))
    return _run_stage(1, data, bundle, cfg, runlog, **kwargs)


def train_stage2(data: TrainingData, bundle: ModelBundle, cfg: ExperimentConfig, runlog: Optional[RunLog] = None, **kwargs) -> ModelBundle:
    """Train the extraction branch on the target-weighted loss, detector frozen."""

    if cfg.training.use_detection:
        _require_stage(bundle, 1, 2)
    if cfg.training.share_encoders and kwargs.get("cycle", 0) == 0:
        bundle.tse.conditional_encoder.load_state_dict(bundle.tsd.conditional_encoder.state_dict())
    runlog = runlog or RunLog(cfg.seed, config_hash(cfg))
    return _run_stage(2, data, bundle, cfg, runlog, **kwargs)


def train_stage3(data: TrainingData, bundle: ModelBundle, cfg: ExperimentConfig, runlog: Optional[RunLog] = None, **kwargs) -> ModelBundle:
    """Fine-tune the detection branch on fused embeddings, extractor frozen."""

    _require_stage(bundle, 2, 3)
    out_dir, cycle = kwargs.get("out_dir"), kwargs.get("cycle", 0)
    resuming = kwargs.get("resume", False) and out_dir is not None and _resume_path(out_dir, cycle, 3).exists()
    if cfg.training.stage3_from_scratch and not resuming:
        reinitialize(bundle.tsd, substream_seed(cfg.seed, f"init:stage3:{cycle}"))
    runlog = runlog or RunLog(cfg.seed, config_hash(cfg))
    return _run_stage(3, data, bundle, cfg, runlog, **kwargs)


STAGE_TRAINERS = {1: train_stage1, 2: train_stage2, 3: train_stage3}


def pipeline_schedule(cycles: int) -> List[Tuple[int, int]]:
    """``(cycle, stage)`` pairs: stages 1-3 once, then 2-3 per extra cycle."""

    schedule = [(0, 1), (0, 2), (0, 3)]
    for cycle in range(1, cycles):
        schedule += [(cycle, 2), (cycle, 3)]
    return schedule


def new_bundle(cfg: ExperimentConfig) -> ModelBundle:
    bundle = build_bundle(cfg.model, cfg.data.synth, substream_seed(cfg.seed, "init"))
    bundle.config_hash = config_hash(cfg)
    return bundle


def run_pipeline(data: TrainingData, cfg: ExperimentConfig, out_dir: Path, resume: bool = False) -> RunLog:
    """Run every scheduled stage with a checkpoint after each one.

    With ``resume`` set, finished stages are loaded from their checkpoints and
    a stage interrupted mid-way continues from its last finished epoch.
    """

    out = Path(out_dir)
    runlog = RunLog(cfg.seed, config_hash(cfg))
    if resume and (out / "runlog.json").exists():
        runlog = RunLog.read(out)
    bundle = new_bundle(cfg)

    for cycle, stage in pipeline_schedule(cfg.training.cycles):
        ckpt = checkpoint_path(out, cycle, stage)
        if resume and ckpt.exists():
            bundle = load_bundle(ckpt)
            log.info("Cycle %d stage %d already finished; loaded %s", cycle, stage, ckpt)
            continue
        bundle = STAGE_TRAINERS[stage](data, bundle, cfg, runlog, out_dir=out, cycle=cycle, resume=resume)

    runlog.write(out)
    return runlog


def train_single_stage(data: TrainingData, cfg: ExperimentConfig, stage: int, out_dir: Path, cycle: int = 0, resume: bool = False) -> RunLog:
    """Run one stage, loading the previous stage's checkpoint from ``out_dir``."""

    out = Path(out_dir)
    runlog = RunLog.read(out) if (out / "runlog.json").exists() else RunLog(cfg.seed, config_hash(cfg))
    if stage == 1:
        bundle = new_bundle(cfg)
    else:
        previous = checkpoint_path(out, cycle, stage - 1)
        if not previous.exists():
            if stage == 2 and not cfg.training.use_detection:
                bundle = new_bundle(cfg)
            else:
                raise StageOrderError(f"Stage {stage} needs {previous}; run stage {stage - 1} first")
        else:
            bundle = load_bundle(previous)
    STAGE_TRAINERS[stage](data, bundle, cfg, runlog, out_dir=out, cycle=cycle, resume=resume)
    return runlog
