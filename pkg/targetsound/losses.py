"""Training objectives for extraction, detection and classification.

All losses take torch tensors whose last axis is time (waveforms, detection
tracks) or frequency (magnitude spectrograms, ``(..., T, F)``) and average
over any leading batch axis. Gradients come from autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .dsp import SI_SDR_CLAMP_DB, FrameSpec
from .errors import DegenerateReference, EmptyRegion, ShapeMismatch

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Balance of the composite extraction loss: ``fmse + alpha*tmse + beta*sisdr``,
    plus ``tau`` times the same loss restricted to the target region."""

    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 1.5

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "tau"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


@dataclass(frozen=True)
class LossTerms:
    """Which terms of the composite extraction loss are switched on."""

    fmse: bool = True
    tmse: bool = True
    sisdr: bool = True


@dataclass(frozen=True)
class RegionMask:
    """Target-active intervals (seconds) over a clip of ``n_samples``."""

    intervals: Tuple[Tuple[float, float], ...]
    n_samples: int
    sample_rate: int

    def __post_init__(self) -> None:
        ordered = tuple(sorted((float(a), float(b)) for a, b in self.intervals))
        duration = self.n_samples / self.sample_rate
        for (a, b), nxt in zip(ordered, ordered[1:] + ((math.inf, math.inf),)):
            if not 0.0 <= a < b <= duration + 1e-9:
                raise ValueError(f"Interval [{a}, {b}] is outside the {duration:g} s clip")
            if b > nxt[0]:
                raise ValueError(f"Intervals [{a}, {b}] and [{nxt[0]}, {nxt[1]}] overlap")
        object.__setattr__(self, "intervals", ordered)

    @classmethod
    def full(cls, n_samples: int, sample_rate: int) -> "RegionMask":
        return cls(((0.0, n_samples / sample_rate),), n_samples, sample_rate)

    @classmethod
    def from_events(cls, events: Sequence, n_samples: int, sample_rate: int) -> "RegionMask":
        return cls(tuple((e.onset, e.offset) for e in events), n_samples, sample_rate)

    def sample_mask(self) -> np.ndarray:
        """Sample ``i`` is in the region iff ``onset <= i / sr < offset``."""

        t = np.arange(self.n_samples) / self.sample_rate
        mask = np.zeros(self.n_samples, dtype=bool)
        for a, b in self.intervals:
            mask |= (t >= a) & (t < b)
        return mask

    def frame_mask(self, frame: FrameSpec) -> np.ndarray:
        """A frame is in the region iff its centre sample is; a centre past the end reads the last sample."""

        centers = frame.frame_centers(self.n_samples)
        samples = self.sample_mask()
        return samples[np.minimum(centers, self.n_samples - 1)]


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"Prediction {tuple(a.shape)} and target {tuple(b.shape)} differ in shape")


def stft_magnitude(y: torch.Tensor, frame: FrameSpec | None = None) -> torch.Tensor:
    """Magnitude spectrogram ``(..., T, F)`` with the same framing as :func:`targetsound.dsp.stft`."""

    frame = frame or FrameSpec()
    window = torch.as_tensor(frame.window(), dtype=y.dtype, device=y.device)
    spec = torch.stft(
        y.reshape(-1, y.shape[-1]),
        n_fft=frame.window_size,
        hop_length=frame.hop_size,
        win_length=frame.window_size,
        window=window,
        center=True,
        pad_mode="reflect",
        return_complex=True,
    )
    mag = spec.abs().transpose(-1, -2).contiguous()
    return mag.reshape(*y.shape[:-1], *mag.shape[-2:])


def freq_mse(s_hat: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Mean squared error between magnitude spectrograms, averaged over T·F."""

    _check_shapes(s_hat, s)
    return ((s - s_hat) ** 2).mean(dim=(-2, -1)).mean()


def time_mse(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _check_shapes(y_hat, y)
    return ((y - y_hat) ** 2).mean(dim=-1).mean()


def si_sdr(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-signal SI-SDR in dB, clamped to ±60 dB, differentiable inside the clamp."""

    _check_shapes(y_hat, y)
    est = y_hat - y_hat.mean(dim=-1, keepdim=True)
    ref = y - y.mean(dim=-1, keepdim=True)
    ref_energy = (ref * ref).sum(dim=-1, keepdim=True)
    if bool(torch.any(ref_energy == 0)):
        raise DegenerateReference("Reference is constant after zero-meaning")
    projection = (est * ref).sum(dim=-1, keepdim=True) / ref_energy * ref
    noise = est - projection
    target_power = (projection * projection).sum(dim=-1)
    noise_power = (noise * noise).sum(dim=-1)
    ceiling = 10.0 ** (SI_SDR_CLAMP_DB / 10.0)
    noise_power = torch.maximum(noise_power, target_power / ceiling).clamp_min(torch.finfo(y.dtype).tiny)
    target_power = torch.maximum(target_power, noise_power / ceiling)
    return 10.0 * torch.log10(target_power / noise_power)


def sisdr_loss(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Negative SI-SDR, so that minimizing it maximizes SI-SDR."""

    return -si_sdr(y_hat, y).mean()


def _combine(parts: Dict[str, torch.Tensor], weights: LossWeights, terms: LossTerms) -> torch.Tensor:
    total = None
    for key, on, scale in (
        ("fmse", terms.fmse, None),
        ("tmse", terms.tmse, weights.alpha),
        ("sisdr", terms.sisdr, weights.beta),
    ):
        if not on:
            continue
        term = parts[key] if scale is None else scale * parts[key]
        total = term if total is None else total + term
    if total is None:
        raise ValueError("No extraction loss term is enabled")
    return total


def _tse_parts(
    y_hat: torch.Tensor,
    y: torch.Tensor,
    s_hat: torch.Tensor,
    s: torch.Tensor,
    terms: LossTerms,
) -> Dict[str, torch.Tensor]:
    parts = {}
    if terms.fmse:
        parts["fmse"] = freq_mse(s_hat, s)
    if terms.tmse:
        parts["tmse"] = time_mse(y_hat, y)
    if terms.sisdr:
        parts["sisdr"] = sisdr_loss(y_hat, y)
    return parts


def tse_loss(
    y_hat: torch.Tensor,
    y: torch.Tensor,
    s_hat: Optional[torch.Tensor] = None,
    s: Optional[torch.Tensor] = None,
    weights: LossWeights = LossWeights(),
    terms: LossTerms = LossTerms(),
    frame: FrameSpec | None = None,
    parts: Optional[Dict[str, float]] = None,
) -> torch.Tensor:
    """Time-frequency extraction loss ``fmse + alpha*tmse + beta*sisdr``.

    Magnitude spectrograms are computed from the waveforms when not given.
    """

    _check_shapes(y_hat, y)
    if terms.fmse and (s_hat is None or s is None):
        s_hat, s = stft_magnitude(y_hat, frame), stft_magnitude(y, frame)
    pieces = _tse_parts(y_hat, y, s_hat, s, terms)
    total = _combine(pieces, weights, terms)
    if parts is not None:
        for key, value in pieces.items():
            parts[key] = float(value.detach())
    return total


def _as_masks(masks: Union[RegionMask, Sequence[RegionMask]], batch: int) -> Sequence[RegionMask]:
    if isinstance(masks, RegionMask):
        return [masks] * batch
    if len(masks) != batch:
        raise ShapeMismatch(f"Got {len(masks)} region masks for a batch of {batch}")
    return masks


def tse_loss_target(
    y_hat: torch.Tensor,
    y: torch.Tensor,
    masks: Union[RegionMask, Sequence[RegionMask]],
    weights: LossWeights = LossWeights(),
    terms: LossTerms = LossTerms(),
    frame: FrameSpec | None = None,
    s_hat: Optional[torch.Tensor] = None,
    s: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Extraction loss evaluated only where the target is active.

    Waveform terms see the region samples concatenated in order; the spectral
    term sees the frames whose centre lies in the region.
    """

    _check_shapes(y_hat, y)
    frame = frame or FrameSpec()
    batched_hat = y_hat.reshape(-1, y_hat.shape[-1])
    batched = y.reshape(-1, y.shape[-1])
    if terms.fmse:
        if s_hat is None or s is None:
            s_hat, s = stft_magnitude(batched_hat, frame), stft_magnitude(batched, frame)
        s_hat = s_hat.reshape(batched.shape[0], *s_hat.shape[-2:])
        s = s.reshape(batched.shape[0], *s.shape[-2:])

    losses = []
    for b, mask in enumerate(_as_masks(masks, batched.shape[0])):
        if mask.n_samples != batched.shape[-1]:
            raise ShapeMismatch(f"Region mask covers {mask.n_samples} samples, signal has {batched.shape[-1]}")
        samples = torch.as_tensor(mask.sample_mask(), device=y.device)
        frames = torch.as_tensor(mask.frame_mask(frame), device=y.device)
        if int(samples.sum()) < 2 or int(frames.sum()) < 1:
            raise EmptyRegion("Target region holds fewer than 2 samples or no frame centre")
        pieces = _tse_parts(
            batched_hat[b][samples],
            batched[b][samples],
            s_hat[b][frames] if terms.fmse else None,
            s[b][frames] if terms.fmse else None,
            terms,
        )
        losses.append(_combine(pieces, weights, terms))
    return torch.stack(losses).mean()


def tse_loss_weighted(
    y_hat: torch.Tensor,
    y: torch.Tensor,
    s_hat: Optional[torch.Tensor],
    s: Optional[torch.Tensor],
    masks: Union[RegionMask, Sequence[RegionMask]],
    weights: LossWeights = LossWeights(),
    terms: LossTerms = LossTerms(),
    frame: FrameSpec | None = None,
    parts: Optional[Dict[str, float]] = None,
) -> torch.Tensor:
    """Target-weighted loss: ``tse_loss + tau * tse_loss_target``."""

    if terms.fmse and (s_hat is None or s is None):
        s_hat, s = stft_magnitude(y_hat, frame), stft_magnitude(y, frame)
    total = tse_loss(y_hat, y, s_hat, s, weights, terms, frame, parts)
    if weights.tau == 0:
        if parts is not None:
            parts["target"] = 0.0
        return total
    target = tse_loss_target(y_hat, y, masks, weights, terms, frame, s_hat, s)
    if parts is not None:
        parts["target"] = float(target.detach())
    return total + weights.tau * target


def _binary_ce(p: torch.Tensor, y: torch.Tensor, reduction: str) -> torch.Tensor:
    _check_shapes(p, y)
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = y.to(p.dtype)
    per_item = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))
    if reduction == "sum":
        return per_item.sum(dim=-1).mean()
    if reduction == "mean":
        return per_item.mean(dim=-1).mean()
    raise ValueError(f"Unknown reduction {reduction!r}")


def tsd_bce(scores: torch.Tensor, labels: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Frame-level binary cross-entropy summed over frames (natural log)."""

    return _binary_ce(scores, labels, reduction)


def cls_ce(probs: torch.Tensor, labels: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Per-class binary cross-entropy summed over classes, against one-hot labels."""

    return _binary_ce(probs, labels, reduction)


def tse_joint_loss(
    y_hat: torch.Tensor,
    y: torch.Tensor,
    probs: torch.Tensor,
    onehot: torch.Tensor,
    masks: Union[RegionMask, Sequence[RegionMask]],
    weights: LossWeights = LossWeights(),
    terms: LossTerms = LossTerms(),
    frame: FrameSpec | None = None,
    reduction: str = "sum",
    parts: Optional[Dict[str, float]] = None,
) -> torch.Tensor:
    """Extraction objective with the auxiliary classification task."""

    weighted = tse_loss_weighted(y_hat, y, None, None, masks, weights, terms, frame, parts)
    cls = cls_ce(probs, onehot, reduction)
    if parts is not None:
        parts["cls"] = float(cls.detach())
    return weighted + cls


def tsd_joint_loss(
    scores: torch.Tensor,
    labels: torch.Tensor,
    probs: torch.Tensor,
    onehot: torch.Tensor,
    reduction: str = "sum",
    parts: Optional[Dict[str, float]] = None,
) -> torch.Tensor:
    """Detection objective with the auxiliary classification task."""

    bce = tsd_bce(scores, labels, reduction)
    cls = cls_ce(probs, onehot, reduction)
    if parts is not None:
        parts["bce"] = float(bce.detach())
        parts["cls"] = float(cls.detach())
    return bce + cls
