"""Static figures for one example: dB spectrograms and a detection overlay."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import ExperimentConfig  # noqa: E402
from .dsp import FrameSpec, Waveform, stft  # noqa: E402
from .manifest import Manifest  # noqa: E402
from .metrics import binarize, infer_example  # noqa: E402
from .models import DetectionTrack, ModelBundle  # noqa: E402
from .synth import EventAnnotation  # noqa: E402

log = logging.getLogger(__name__)

DB_FLOOR = -100.0
DPI = 100


def spectrogram_db(w: Waveform, frame: FrameSpec = FrameSpec()) -> np.ndarray:
    """Magnitude in dB, shape ``(F, T)``, floored at ``DB_FLOOR``."""

    magnitude = stft(w, frame).magnitude
    return np.maximum(20.0 * np.log10(np.maximum(magnitude, 1e-12)), DB_FLOOR).T


def plot_spectrogram(w: Waveform, path: Path, title: str, frame: FrameSpec = FrameSpec()) -> Path:
    db = spectrogram_db(w, frame)
    fig, ax = plt.subplots(figsize=(8, 3))
    image = ax.imshow(
        db,
        origin="lower",
        aspect="auto",
        cmap="magma",
        vmin=DB_FLOOR,
        vmax=max(float(db.max()), DB_FLOOR + 1.0),
        extent=(0.0, w.duration, 0.0, w.sample_rate / 2000.0),
    )
    ax.set_title(title)
    ax.set_xlabel("Time (s)")
    ax.set_ylabel("Frequency (kHz)")
    fig.colorbar(image, ax=ax, label="dB")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_detection(
    track: DetectionTrack,
    gt_events: Sequence[EventAnnotation],
    pred_events: Sequence[EventAnnotation],
    duration: float,
    path: Path,
    threshold: float = 0.5,
) -> Path:
    """Frame scores with reference (green) and predicted (blue) intervals shaded."""

    fig, ax = plt.subplots(figsize=(8, 2.5))
    times = track.start + np.arange(len(track)) / track.frame_rate
    ax.step(times, track.scores, where="post", color="black", linewidth=1.0, label="score")
    ax.axhline(threshold, color="grey", linestyle="--", linewidth=0.8)
    for i, e in enumerate(gt_events):
        ax.axvspan(e.onset, e.offset, ymin=0.5, ymax=1.0, color="tab:green", alpha=0.3, label="reference" if i == 0 else None)
    for i, e in enumerate(pred_events):
        ax.axvspan(e.onset, e.offset, ymin=0.0, ymax=0.5, color="tab:blue", alpha=0.3, label="predicted" if i == 0 else None)
    ax.set_xlim(0.0, duration)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("Time (s)")
    ax.set_ylabel("Activity")
    ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_example(
    manifest: Manifest,
    example_id: str,
    bundle: ModelBundle,
    cfg: ExperimentConfig,
    out_dir: Path,
) -> List[Path]:
    """Write mixture, target and extracted spectrograms plus the detection overlay."""

    record = manifest.find(example_id)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sr = bundle.synth.sample_rate
    mixture, target, reference = manifest.load_audio(record, sr)
    estimate, track = infer_example(bundle.eval(), mixture, reference, cfg, with_extraction=True)
    extracted = Waveform(estimate, sr)

    paths = [
        plot_spectrogram(mixture, out / f"{example_id}_mixture.png", "Mixture"),
        plot_spectrogram(target, out / f"{example_id}_target.png", "Target"),
        plot_spectrogram(extracted, out / f"{example_id}_extracted.png", "Extracted"),
    ]
    pred = binarize(track, cfg.eval.threshold, cfg.eval.median_window, record.class_id)
    paths.append(
        plot_detection(track, record.events, pred, mixture.duration, out / f"{example_id}_detection.png", cfg.eval.threshold)
    )
    log.info("Wrote %d figures for %s to %s", len(paths), example_id, out)
    return paths
