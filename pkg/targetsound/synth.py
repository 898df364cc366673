"""Annotated mixture synthesis: one target plus interferences over a background scene."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import signal

from .config import SynthConfig
from .dsp import Waveform, read_wav, resample, trim_silence
from .errors import BankTooSmall, DegenerateBackground, DegenerateForeground, NotFound, ShapeMismatch

log = logging.getLogger(__name__)

TOY_CLASSES = (
    "tone",
    "chirp",
    "noise_burst",
    "am_texture",
    "harmonic",
    "click_train",
    "fm_tone",
    "hiss",
)


@dataclass(frozen=True)
class AudioClip:
    waveform: Waveform
    class_id: int
    clip_id: str

    @property
    def duration(self) -> float:
        return self.waveform.duration


@dataclass(frozen=True)
class EventAnnotation:
    onset: float
    offset: float
    class_id: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.onset < self.offset:
            raise ValueError(f"Event needs 0 <= onset < offset, got [{self.onset}, {self.offset}]")

    def to_dict(self) -> Dict[str, float]:
        return {"onset": self.onset, "offset": self.offset}


@dataclass(frozen=True)
class InterferenceMeta:
    class_id: int
    snr_db: float
    onset: float
    clip_id: str = ""

    def to_dict(self) -> Dict[str, object]:
        return {"class_id": self.class_id, "snr_db": self.snr_db, "onset": self.onset, "clip_id": self.clip_id}


@dataclass(frozen=True)
class MixtureExample:
    """One synthesized training example.

    ``background`` and ``interferences`` keep the placed, gain-scaled
    components so the mixture can be decomposed exactly.
    """

    example_id: str
    mixture: Waveform
    target: Waveform
    reference: AudioClip
    target_events: Tuple[EventAnnotation, ...]
    interference_meta: Tuple[InterferenceMeta, ...]
    background_id: str
    class_id: int
    target_clip_id: str
    target_snr_db: float
    seed: int
    background: Waveform
    interferences: Tuple[Waveform, ...] = field(default_factory=tuple)


def example_rng(seed: int, index: int) -> np.random.Generator:
    """Random stream owned by one example, independent of execution order."""

    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def group_by_class(bank: Sequence[AudioClip]) -> Dict[int, List[AudioClip]]:
    groups: Dict[int, List[AudioClip]] = defaultdict(list)
    for clip in bank:
        groups[clip.class_id].append(clip)
    return dict(groups)


def fit_length(w: Waveform, n_samples: int, loop: bool = False) -> Waveform:
    """Cut ``w`` to ``n_samples`` or pad it, with zeros or by looping."""

    if len(w) >= n_samples:
        return Waveform(w.samples[:n_samples], w.sample_rate)
    if len(w) == 0:
        return Waveform(np.zeros(n_samples), w.sample_rate)
    if loop:
        repeats = int(math.ceil(n_samples / len(w)))
        return Waveform(np.tile(w.samples, repeats)[:n_samples], w.sample_rate)
    return Waveform(np.pad(w.samples, (0, n_samples - len(w))), w.sample_rate)


def scale_to_snr(fg: Waveform, bg_region: Waveform, snr_db: float) -> float:
    """Gain that puts ``fg`` at ``snr_db`` over the background under it."""

    if len(fg) != len(bg_region):
        raise ShapeMismatch(
            f"Foreground ({len(fg)}) and background region ({len(bg_region)}) differ in length"
        )
    fg_energy = float(np.dot(fg.samples, fg.samples))
    bg_energy = float(np.dot(bg_region.samples, bg_region.samples))
    if fg_energy == 0.0:
        raise DegenerateForeground("Foreground has zero power")
    if bg_energy == 0.0:
        raise DegenerateBackground("Background is silent under the foreground")
    return math.sqrt(bg_energy / fg_energy * 10.0 ** (snr_db / 10.0))


def prepare_foreground(clip: AudioClip, cfg: SynthConfig) -> Waveform:
    """Resample, strip silent zones and keep at most the first clip duration."""

    w = clip.waveform
    if w.sample_rate != cfg.sample_rate:
        w = resample(w, cfg.sample_rate)
    w = trim_silence(w, cfg.trim_threshold_db, cfg.trim_frame_ms)
    if len(w) == 0:
        raise DegenerateForeground(f"Clip {clip.clip_id} is silent after trimming")
    return Waveform(w.samples[: cfg.clip_samples], w.sample_rate)


def select_reference(
    bank: Sequence[AudioClip],
    class_id: int,
    exclude_clip_id: str,
    rng: np.random.Generator,
    n_samples: int = 160000,
) -> AudioClip:
    """Draw a same-class clip other than the target, padded or cut to ``n_samples``."""

    candidates = [c for c in bank if c.class_id == class_id and c.clip_id != exclude_clip_id]
    if not candidates:
        raise BankTooSmall(
            f"Class {class_id} has no clip besides {exclude_clip_id} to use as a reference"
        )
    chosen = candidates[int(rng.integers(len(candidates)))]
    return AudioClip(fit_length(chosen.waveform, n_samples), chosen.class_id, chosen.clip_id)


def _place(fg: Waveform, background: Waveform, cfg: SynthConfig, rng: np.random.Generator) -> Tuple[int, float, np.ndarray]:
    n_m = len(background)
    start = int(rng.integers(0, n_m - len(fg) + 1))
    snr_db = float(rng.uniform(*cfg.snr_range))
    region = Waveform(background.samples[start : start + len(fg)], background.sample_rate)
    gain = scale_to_snr(fg, region, snr_db)
    placed = np.zeros(n_m)
    placed[start : start + len(fg)] = gain * fg.samples
    return start, snr_db, placed


def synthesize_example(
    fg_bank: Sequence[AudioClip],
    bg_bank: Sequence[AudioClip],
    cfg: SynthConfig,
    rng: np.random.Generator,
    example_id: str = "",
    seed: int = 0,
) -> MixtureExample:
    """Mix one target and 1-3 interferences onto a background clip."""

    if not bg_bank:
        raise BankTooSmall("Background bank is empty")
    groups = group_by_class(fg_bank)
    eligible = sorted(c for c, clips in groups.items() if len(clips) >= 2)
    if not eligible:
        raise BankTooSmall("No class has the two clips needed for a target and a reference")

    class_id = eligible[int(rng.integers(len(eligible)))]
    target_clip = groups[class_id][int(rng.integers(len(groups[class_id])))]
    reference = select_reference(fg_bank, class_id, target_clip.clip_id, rng, cfg.reference_samples)

    bg_clip = bg_bank[int(rng.integers(len(bg_bank)))]
    bg_wave = bg_clip.waveform
    if bg_wave.sample_rate != cfg.sample_rate:
        bg_wave = resample(bg_wave, cfg.sample_rate)
    background = fit_length(bg_wave, cfg.clip_samples, loop=True)

    target_fg = prepare_foreground(target_clip, cfg)
    start, target_snr, target = _place(target_fg, background, cfg, rng)
    sr = cfg.sample_rate
    events = (EventAnnotation(start / sr, (start + len(target_fg)) / sr, class_id),)

    others = sorted(c for c in groups if c != class_id)
    n_lo, n_hi = cfg.n_interference_range
    n_interf = int(rng.integers(n_lo, n_hi + 1))
    if n_interf and not others:
        raise BankTooSmall("Bank holds no class other than the target for interferences")

    mixture = background.samples + target
    placed_interf = []
    meta = []
    for _ in range(n_interf):
        i_class = others[int(rng.integers(len(others)))]
        i_clip = groups[i_class][int(rng.integers(len(groups[i_class])))]
        i_fg = prepare_foreground(i_clip, cfg)
        i_start, i_snr, i_placed = _place(i_fg, background, cfg, rng)
        mixture = mixture + i_placed
        placed_interf.append(Waveform(i_placed, sr))
        meta.append(InterferenceMeta(i_class, i_snr, i_start / sr, i_clip.clip_id))

    return MixtureExample(
        example_id=example_id,
        mixture=Waveform(mixture, sr),
        target=Waveform(target, sr),
        reference=reference,
        target_events=events,
        interference_meta=tuple(meta),
        background_id=bg_clip.clip_id,
        class_id=class_id,
        target_clip_id=target_clip.clip_id,
        target_snr_db=target_snr,
        seed=seed,
        background=background,
        interferences=tuple(placed_interf),
    )


def _envelope(n: int, sr: int) -> np.ndarray:
    ramp = min(n // 4, int(0.01 * sr))
    env = np.ones(n)
    if ramp > 0:
        env[:ramp] = np.linspace(0.0, 1.0, ramp)
        env[-ramp:] = np.linspace(1.0, 0.0, ramp)
    return env


def _toy_timbre(class_id: int, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    if class_id == 0:
        x = np.sin(2 * np.pi * rng.uniform(300, 500) * t)
    elif class_id == 1:
        x = signal.chirp(t, f0=rng.uniform(400, 700), t1=t[-1], f1=rng.uniform(2500, 3500))
    elif class_id == 2:
        gate = (np.floor(t / rng.uniform(0.04, 0.07)) % 2 == 0).astype(float)
        x = rng.standard_normal(n) * (0.1 + 0.9 * gate)
    elif class_id == 3:
        sos = signal.butter(4, [1000, 2000], btype="bandpass", fs=sr, output="sos")
        band = signal.sosfilt(sos, rng.standard_normal(n))
        x = band * (1 + np.sin(2 * np.pi * rng.uniform(4, 8) * t))
    elif class_id == 4:
        f0 = rng.uniform(150, 250)
        x = sum(np.sin(2 * np.pi * f0 * k * t) / k for k in range(1, 7))
    elif class_id == 5:
        x = np.zeros(n)
        period = int(sr / rng.uniform(20, 40))
        x[::period] = 1.0
        x = signal.lfilter([1.0], [1.0, -0.995], x)
    elif class_id == 6:
        fm = rng.uniform(4, 7)
        x = np.sin(2 * np.pi * 1200 * t + (200 / fm) * np.sin(2 * np.pi * fm * t))
    else:
        sos = signal.butter(4, [3000, min(5000, 0.45 * sr)], btype="bandpass", fs=sr, output="sos")
        x = signal.sosfilt(sos, rng.standard_normal(n))
    return np.asarray(x, dtype=np.float64)


def make_toy_bank(cfg: SynthConfig, n_per_class: int, seed: int) -> List[AudioClip]:
    """Synthetic foreground bank: one distinct timbre per class in ``TOY_CLASSES``.

    Clips carry digital-zero heads and tails so silence trimming has work to do.
    """

    sr = cfg.sample_rate
    clips = []
    for class_id, name in enumerate(TOY_CLASSES):
        for k in range(n_per_class):
            rng = example_rng(seed, class_id * 10000 + k)
            n = int(rng.uniform(0.5, min(3.0, cfg.clip_seconds)) * sr)
            x = _toy_timbre(class_id, n, sr, rng) * _envelope(n, sr)
            x = x / np.max(np.abs(x)) * rng.uniform(0.3, 0.9)
            head = np.zeros(int(rng.uniform(0.05, 0.3) * sr))
            tail = np.zeros(int(rng.uniform(0.05, 0.3) * sr))
            samples = np.concatenate([head, x, tail])
            clips.append(AudioClip(Waveform(samples, sr), class_id, f"{name}-{k:03d}"))
    return clips


def make_toy_backgrounds(cfg: SynthConfig, n: int, seed: int) -> List[AudioClip]:
    """Coloured-noise scenes with a little mains hum, at least one clip long."""

    sr = cfg.sample_rate
    clips = []
    for k in range(n):
        rng = example_rng(seed, 900000 + k)
        length = int((cfg.clip_seconds + rng.uniform(0.0, 2.0)) * sr)
        noise = signal.lfilter([1.0], [1.0, -rng.uniform(0.8, 0.98)], rng.standard_normal(length))
        hum = 0.3 * np.sin(2 * np.pi * rng.choice([50.0, 60.0]) * np.arange(length) / sr)
        x = noise / np.std(noise) + hum
        x = x * (rng.uniform(0.02, 0.08) / np.std(x))
        clips.append(AudioClip(Waveform(x, sr), -1, f"bg-{k:03d}"))
    return clips


def load_bank(directory: Path, sample_rate: int) -> Tuple[List[AudioClip], List[str]]:
    """Read a ``<class_name>/*.wav`` tree; class ids follow sorted directory names."""

    root = Path(directory).expanduser()
    if not root.is_dir():
        raise NotFound(f"Sound bank directory not found: {directory}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    clips: List[AudioClip] = []
    for class_id, class_dir in enumerate(class_dirs):
        for wav in sorted(class_dir.glob("*.wav")):
            clips.append(AudioClip(read_wav(wav, sample_rate), class_id, f"{class_dir.name}/{wav.stem}"))
    log.info("Loaded %d clips in %d classes from %s", len(clips), len(class_dirs), root)
    return clips, [p.name for p in class_dirs]


def load_backgrounds(directory: Path, sample_rate: int) -> List[AudioClip]:
    root = Path(directory).expanduser()
    if not root.is_dir():
        raise NotFound(f"Background directory not found: {directory}")
    return [
        AudioClip(read_wav(wav, sample_rate), -1, wav.stem)
        for wav in sorted(root.rglob("*.wav"))
    ]
