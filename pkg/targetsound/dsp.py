"""Signal primitives shared by the rest of the package.

Everything here is a pure function of its inputs: STFT/iSTFT with centred
reflect padding, polyphase resampling, an energy-gate silence trimmer, SI-SDR
and WAV file I/O.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .errors import DegenerateReference, InputTooShort, ShapeMismatch

log = logging.getLogger(__name__)

SI_SDR_CLAMP_DB = 60.0
DEFAULT_SAMPLE_RATE = 16000
KAISER_BETA = 5.0


@dataclass(frozen=True)
class Waveform:
    """Mono audio. ``samples`` is a 1-D float64 array, possibly empty."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ShapeMismatch(f"Waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("Waveform contains NaN or infinite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"Sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FrameSpec:
    """STFT framing. Defaults are 32 ms / 8 ms Hann frames at 16 kHz."""

    window_size: int = 512
    hop_size: int = 128
    window_fn: str = "hann"

    def __post_init__(self) -> None:
        if self.window_size <= 0 or self.hop_size <= 0:
            raise ValueError("Window and hop sizes must be positive")
        if self.hop_size > self.window_size:
            raise ValueError(
                f"Hop size {self.hop_size} exceeds window size {self.window_size}"
            )
        if not signal.check_NOLA(self.window(), self.window_size, self.window_size - self.hop_size):
            raise ValueError(
                f"{self.window_fn} window of {self.window_size} samples cannot be "
                f"overlap-added back at hop {self.hop_size}"
            )

    @property
    def n_bins(self) -> int:
        return self.window_size // 2 + 1

    def window(self) -> np.ndarray:
        return signal.get_window(self.window_fn, self.window_size, fftbins=True).astype(np.float64)

    def n_frames(self, n_samples: int) -> int:
        """Frame count for a signal of ``n_samples`` under centred padding."""

        return 1 + n_samples // self.hop_size

    def frame_centers(self, n_samples: int) -> np.ndarray:
        """Sample index at the centre of every frame."""

        return np.arange(self.n_frames(n_samples)) * self.hop_size


@dataclass(frozen=True)
class Spectrogram:
    bins: np.ndarray
    frame: FrameSpec = field(default_factory=FrameSpec)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    @property
    def n_frames(self) -> int:
        return int(self.bins.shape[0])

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)


def stft(w: Waveform, spec: FrameSpec | None = None) -> Spectrogram:
    """Short-time Fourier transform, frames × bins.

    The signal is reflect-padded by half a window on both sides, so frame ``t``
    is centred on sample ``t * hop`` and ``T = 1 + N // hop``.
    """

    spec = spec or FrameSpec()
    n = len(w)
    if n < spec.window_size:
        raise InputTooShort(
            f"Signal of {n} samples is shorter than one {spec.window_size}-sample window"
        )
    half = spec.window_size // 2
    padded = np.pad(w.samples, (half, half), mode="reflect")
    frames = sliding_window_view(padded, spec.window_size)[:: spec.hop_size]
    bins = np.fft.rfft(frames * spec.window(), axis=-1)
    return Spectrogram(bins=bins, frame=spec, sample_rate=w.sample_rate)


def istft(s: Spectrogram, out_len: int) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`, trimmed or padded to ``out_len``."""

    spec = s.frame
    bins = np.asarray(s.bins)
    if bins.ndim != 2 or bins.shape[0] < 1 or bins.shape[1] != spec.n_bins:
        raise ShapeMismatch(
            f"Spectrogram of shape {bins.shape} does not match a "
            f"{spec.window_size}-sample frame ({spec.n_bins} bins expected)"
        )
    if out_len <= 0:
        raise ShapeMismatch(f"Output length must be positive, got {out_len}")

    window = spec.window()
    frames = np.fft.irfft(bins, n=spec.window_size, axis=-1) * window
    total = spec.window_size + (bins.shape[0] - 1) * spec.hop_size
    signal_sum = np.zeros(total)
    envelope = np.zeros(total)
    for t, frame in enumerate(frames):
        start = t * spec.hop_size
        signal_sum[start : start + spec.window_size] += frame
        envelope[start : start + spec.window_size] += window**2

    nonzero = envelope > 1e-11
    signal_sum[nonzero] /= envelope[nonzero]
    out = signal_sum[spec.window_size // 2 :][:out_len]
    if out.shape[0] < out_len:
        out = np.pad(out, (0, out_len - out.shape[0]))
    return Waveform(out, s.sample_rate)


def spectrogram_energy(s: Spectrogram) -> float:
    """Energy of the framed, windowed signal recovered from one-sided bins."""

    power = np.abs(s.bins) ** 2
    weights = np.full(power.shape[1], 2.0)
    weights[0] = 1.0
    if s.frame.window_size % 2 == 0:
        weights[-1] = 1.0
    return float(np.sum(power * weights) / s.frame.window_size)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited rate conversion with a Kaiser-windowed polyphase filter."""

    if target_rate <= 0:
        raise ValueError(f"Target rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)

    g = math.gcd(int(target_rate), w.sample_rate)
    up, down = int(target_rate) // g, w.sample_rate // g
    n_out = int(math.floor(len(w) * up / down + 0.5))
    if len(w) == 0:
        return Waveform(np.zeros(0), target_rate)
    y = signal.resample_poly(w.samples, up, down, window=("kaiser", KAISER_BETA), padtype="line")
    if y.shape[0] < n_out:
        y = np.pad(y, (0, n_out - y.shape[0]), mode="edge")
    return Waveform(y[:n_out], target_rate)


def trim_silence(w: Waveform, threshold_db: float = -45.0, frame_ms: float = 25.0) -> Waveform:
    """Drop frames whose RMS falls below ``threshold_db`` relative to the clip peak.

    Kept frames are concatenated in order. A clip with no energy at all comes
    back empty; deciding what to do with it is up to the caller.
    """

    if threshold_db >= 0:
        raise ValueError(f"threshold_db must be negative, got {threshold_db}")
    frame_len = max(1, int(round(w.sample_rate * frame_ms / 1000.0)))
    peak = float(np.max(np.abs(w.samples))) if len(w) else 0.0
    if peak == 0.0:
        return Waveform(np.zeros(0), w.sample_rate)

    floor = peak * 10.0 ** (threshold_db / 20.0)
    kept = []
    for start in range(0, len(w), frame_len):
        frame = w.samples[start : start + frame_len]
        rms = math.sqrt(float(np.mean(frame**2)))
        if rms > 0.0 and rms >= floor:
            kept.append(frame)
    if not kept:
        return Waveform(np.zeros(0), w.sample_rate)
    return Waveform(np.concatenate(kept), w.sample_rate)


def _as_array(x: Waveform | np.ndarray) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def si_sdr(estimate: Waveform | np.ndarray, reference: Waveform | np.ndarray) -> float:
    """Scale-invariant SDR in dB, clamped to ±60 dB.

    Both signals are made zero-mean first, so the value ignores positive
    rescaling and constant offsets of the estimate.
    """

    est = _as_array(estimate)
    ref = _as_array(reference)
    if est.shape != ref.shape:
        raise ShapeMismatch(f"Estimate {est.shape} and reference {ref.shape} differ in length")
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DegenerateReference("Reference is constant after zero-meaning")

    projection = (np.dot(est, ref) / ref_energy) * ref
    noise = est - projection
    target_power = float(np.dot(projection, projection))
    noise_power = float(np.dot(noise, noise))
    ceiling = 10.0 ** (SI_SDR_CLAMP_DB / 10.0)
    if noise_power == 0.0 and target_power == 0.0:
        return -SI_SDR_CLAMP_DB
    if noise_power == 0.0 or target_power >= ceiling * noise_power:
        return SI_SDR_CLAMP_DB
    if target_power <= noise_power / ceiling:
        return -SI_SDR_CLAMP_DB
    return 10.0 * math.log10(target_power / noise_power)


def read_wav(path: Path, target_rate: int | None = None) -> Waveform:
    """Load a mono WAV file, converting to ``target_rate`` when given."""

    data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    if data.shape[1] != 1:
        raise ShapeMismatch(f"{path} has {data.shape[1]} channels; only mono audio is supported")
    w = Waveform(data[:, 0], rate)
    if target_rate is not None and target_rate != rate:
        log.debug("Resampling %s from %d Hz to %d Hz", path, rate, target_rate)
        w = resample(w, target_rate)
    return w


def write_wav(path: Path, w: Waveform, subtype: str = "FLOAT") -> Path:
    """Write ``w`` as a mono WAV file (``FLOAT`` or ``PCM_16``)."""

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(target), w.samples, w.sample_rate, subtype=subtype)
    return target
