"""Scores for extraction (SI-SDR improvement) and detection (segment and event F1)."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import sed_eval
import torch
from dcase_util.containers import MetaDataContainer
from scipy.ndimage import median_filter

from .config import SCHEMA_VERSION, ExperimentConfig
from .dsp import Waveform, si_sdr
from .errors import EmptyManifest, EmptyRegion, ShapeMismatch
from .losses import RegionMask
from .manifest import Manifest
from .models import DetectionTrack, ModelBundle
from .synth import EventAnnotation

log = logging.getLogger(__name__)

# Each clip is scored on its own, for its own target class.
EVENT_LABEL = "target"
CLIP_NAME = "clip"


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom


def _array(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def si_sdri(mixture, estimate, target) -> float:
    """SI-SDR gained by ``estimate`` over the unprocessed ``mixture``."""

    mixture, estimate, target = _array(mixture), _array(estimate), _array(target)
    if not (mixture.shape == estimate.shape == target.shape):
        raise ShapeMismatch(f"Shapes differ: {mixture.shape}, {estimate.shape}, {target.shape}")
    return si_sdr(estimate, target) - si_sdr(mixture, target)


def si_sdri_t(mixture, estimate, target, events: Sequence[EventAnnotation], sample_rate: int) -> float:
    """SI-SDR improvement over the samples inside the target events, concatenated in time order."""

    target = _array(target)
    if not events:
        raise EmptyRegion("No target events to score")
    keep = RegionMask.from_events(events, target.shape[0], sample_rate).sample_mask()
    if not keep.any():
        raise EmptyRegion("Target events contain no samples")
    return si_sdri(_array(mixture)[keep], _array(estimate)[keep], target[keep])


def binarize(
    scores: DetectionTrack,
    threshold: float = 0.5,
    median_win: int = 5,
    class_id: int = 0,
) -> List[EventAnnotation]:
    """Median-filter a track, threshold it and merge positive runs into events.

    A run of frames ``[a, b)`` becomes the interval from half a hop before the
    centre of frame ``a`` to half a hop after the centre of frame ``b - 1``,
    clipped to the track's duration. Runs touching the first or last frame
    extend to the clip edge.
    """

    smoothed = scores.scores
    if median_win > 1:
        smoothed = median_filter(smoothed, size=median_win, mode="nearest")
    active = np.concatenate([[False], smoothed >= threshold, [False]])
    edges = np.flatnonzero(np.diff(active.astype(np.int8)))
    end = math.inf if scores.duration is None else scores.duration
    events = []
    for start, stop in zip(edges[::2], edges[1::2]):
        onset = 0.0 if start == 0 else max(0.0, scores.start + start / scores.frame_rate)
        offset = min(end, scores.start + stop / scores.frame_rate)
        if stop == len(scores) and scores.duration is not None:
            offset = scores.duration
        if offset > onset:
            events.append(EventAnnotation(onset, offset, class_id))
    return events


def _event_container(events: Sequence[EventAnnotation]) -> MetaDataContainer:
    return MetaDataContainer(
        [
            {"event_label": EVENT_LABEL, "event_onset": float(e.onset), "event_offset": float(e.offset), "file": CLIP_NAME}
            for e in events
        ]
    )


def _sed_counts(scores) -> Counts:
    tp = int(round(scores.overall["Ntp"]))
    return Counts(tp, int(round(scores.overall["Nsys"])) - tp, int(round(scores.overall["Nref"])) - tp)


def segment_f1(
    pred_events: Sequence[EventAnnotation],
    gt_events: Sequence[EventAnnotation],
    clip_len: float,
    segment_s: float = 1.0,
) -> Tuple[float, Counts]:
    """F1 over fixed segments; a segment is active when an event overlaps it."""

    if clip_len <= 0 or segment_s <= 0:
        raise ValueError("clip_len and segment_s must be positive")
    if not pred_events and not gt_events:
        return Counts().f1, Counts()
    scores = sed_eval.sound_event.SegmentBasedMetrics(event_label_list=[EVENT_LABEL], time_resolution=segment_s)
    scores.evaluate(
        reference_event_list=_event_container(gt_events),
        estimated_event_list=_event_container(pred_events),
        evaluated_length_seconds=clip_len,
    )
    counts = _sed_counts(scores)
    return counts.f1, counts


def event_f1(
    pred_events: Sequence[EventAnnotation],
    gt_events: Sequence[EventAnnotation],
    onset_collar: float = 0.2,
    offset_ratio: float = 0.2,
) -> Tuple[float, Counts]:
    """F1 over events paired one to one within an onset collar and an offset tolerance.

    Pairs come from a maximum bipartite matching, so the number of hits does
    not depend on the order in which events are listed.
    """

    if not pred_events or not gt_events:
        counts = Counts(0, len(pred_events), len(gt_events))
        return counts.f1, counts
    scores = sed_eval.sound_event.EventBasedMetrics(
        event_label_list=[EVENT_LABEL],
        t_collar=onset_collar,
        percentage_of_length=offset_ratio,
        event_matching_type="optimal",
    )
    scores.evaluate(reference_event_list=_event_container(gt_events), estimated_event_list=_event_container(pred_events))
    counts = _sed_counts(scores)
    return counts.f1, counts


@dataclass
class ExampleScores:
    example_id: str
    class_id: int
    si_sdri: Optional[float] = None
    si_sdri_t: Optional[float] = None
    segment_f1: Optional[float] = None
    event_f1: Optional[float] = None
    segment_counts: Counts = field(default_factory=Counts)
    event_counts: Counts = field(default_factory=Counts)
    pred_events: List[Dict[str, float]] = field(default_factory=list)


CSV_FIELDS = (
    "example_id",
    "class_id",
    "si_sdri",
    "si_sdri_t",
    "segment_f1",
    "event_f1",
    "segment_tp",
    "segment_fp",
    "segment_fn",
    "event_tp",
    "event_fp",
    "event_fn",
)


@dataclass
class EvalReport:
    examples: List[ExampleScores]
    aggregate: Dict[str, float]
    segment_counts: Dict[int, Counts]
    event_counts: Dict[int, Counts]
    config_hash: str = ""
    checkpoint_stage: int = 0
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> Dict[str, object]:
        return {
            "schema_version": self.schema_version,
            "config_hash": self.config_hash,
            "checkpoint_stage": self.checkpoint_stage,
            "aggregate": self.aggregate,
            "counts": {
                "segment": {str(k): asdict(v) for k, v in sorted(self.segment_counts.items())},
                "event": {str(k): asdict(v) for k, v in sorted(self.event_counts.items())},
            },
            "examples": [asdict(e) for e in self.examples],
        }

    def write(self, out_dir: Path, stem: str = "eval") -> Tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        json_path = out / f"{stem}.json"
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        csv_path = out / f"{stem}.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
            writer.writeheader()
            for e in self.examples:
                writer.writerow(
                    {
                        "example_id": e.example_id,
                        "class_id": e.class_id,
                        "si_sdri": "" if e.si_sdri is None else e.si_sdri,
                        "si_sdri_t": "" if e.si_sdri_t is None else e.si_sdri_t,
                        "segment_f1": "" if e.segment_f1 is None else e.segment_f1,
                        "event_f1": "" if e.event_f1 is None else e.event_f1,
                        "segment_tp": e.segment_counts.tp,
                        "segment_fp": e.segment_counts.fp,
                        "segment_fn": e.segment_counts.fn,
                        "event_tp": e.event_counts.tp,
                        "event_fp": e.event_counts.fp,
                        "event_fn": e.event_counts.fn,
                    }
                )
        return json_path, csv_path


def assemble_report(examples: List[ExampleScores], config_hash: str = "", stage: int = 0) -> EvalReport:
    """Means for the SI-SDR family, pooled-count F1 for detection."""

    aggregate: Dict[str, float] = {}
    for key in ("si_sdri", "si_sdri_t"):
        values = [getattr(e, key) for e in examples if getattr(e, key) is not None]
        if values:
            aggregate[key] = float(np.mean(values))
    segment: Dict[int, Counts] = {}
    event: Dict[int, Counts] = {}
    scored = [e for e in examples if e.segment_f1 is not None]
    for e in scored:
        segment[e.class_id] = segment.get(e.class_id, Counts()) + e.segment_counts
        event[e.class_id] = event.get(e.class_id, Counts()) + e.event_counts
    if scored:
        aggregate["segment_f1"] = sum(segment.values(), Counts()).f1
        aggregate["event_f1"] = sum(event.values(), Counts()).f1
    return EvalReport(examples, aggregate, segment, event, config_hash, stage)


@torch.no_grad()
def infer_example(
    bundle: ModelBundle,
    mixture: Waveform,
    reference: Waveform,
    cfg: ExperimentConfig,
    with_extraction: bool = True,
) -> Tuple[Optional[np.ndarray], DetectionTrack]:
    """Extracted waveform and detection track for one mixture.

    After stage 3 the detector is conditioned on the average of the reference
    and extracted-sound embeddings, as it was trained.
    """

    mix = torch.as_tensor(mixture.samples, dtype=torch.float32).unsqueeze(0)
    ref = torch.as_tensor(reference.samples, dtype=torch.float32).unsqueeze(0)
    tsd = bundle.tsd
    features = tsd.sound_encoder(mix)
    e = tsd.conditional_encoder(ref)
    scores = tsd.detector(features, e)

    estimate = None
    if with_extraction or bundle.stage >= 3:
        track = None
        if cfg.training.use_detection:
            track = (scores >= 0.5).to(scores.dtype) if cfg.training.binarize_detection else scores
        estimate = bundle.tse.extract(mix, bundle.tse.conditional_encoder(ref), track)
        if bundle.stage >= 3:
            e_prime = tsd.conditional_encoder(estimate)
            scores = tsd.detector(features, (e + e_prime) / 2)

    track = DetectionTrack(
        scores[0].double().numpy(),
        bundle.tsd_frame_rate,
        start=tsd.sound_encoder.span_start(mixture.sample_rate),
        duration=mixture.duration,
    )
    return (None if estimate is None else estimate[0].double().numpy()), track


def evaluate(
    manifest: Manifest,
    bundle: ModelBundle,
    cfg: ExperimentConfig,
    with_extraction: bool = True,
    with_detection: bool = True,
) -> EvalReport:
    """Score every example of ``manifest`` with a frozen ``bundle``."""

    if len(manifest) == 0:
        raise EmptyManifest(f"Manifest {manifest.path} has no examples to evaluate")
    bundle.eval()
    sr = bundle.synth.sample_rate
    ev = cfg.eval
    rows: List[ExampleScores] = []
    for record in manifest:
        mixture, target, reference = manifest.load_audio(record, sr)
        estimate, track = infer_example(bundle, mixture, reference, cfg, with_extraction)
        row = ExampleScores(record.example_id, record.class_id)
        if with_extraction:
            row.si_sdri = si_sdri(mixture, estimate, target)
            row.si_sdri_t = si_sdri_t(mixture, estimate, target, record.events, sr)
        if with_detection:
            pred = binarize(track, ev.threshold, ev.median_window, record.class_id)
            row.segment_f1, row.segment_counts = segment_f1(pred, record.events, mixture.duration, ev.segment_seconds)
            row.event_f1, row.event_counts = event_f1(pred, record.events, ev.onset_collar, ev.offset_ratio)
            row.pred_events = [p.to_dict() for p in pred]
        rows.append(row)
        log.debug("Scored %s", record.example_id)

    report = assemble_report(rows, bundle.config_hash, bundle.stage)
    log.info("Evaluated %d examples: %s", len(rows), ", ".join(f"{k}={v:.4f}" for k, v in report.aggregate.items()))
    return report
