"""Networks for target sound extraction and detection.

Two branches share one layout: a conditional encoder turns the reference clip
into an embedding, a sound encoder turns the mixture into frame features, and
a head either extracts the target waveform or scores each frame. A small
classifier on the embedding provides the auxiliary class loss.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig, SynthConfig
from .dsp import FrameSpec
from .errors import ShapeMismatch
from .losses import stft_magnitude

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectionTrack:
    """Per-frame activity probabilities.

    Frame ``i`` is centred at ``start + (i + 0.5) / frame_rate`` seconds and
    covers one hop around that centre. ``duration``, when known, bounds the
    decoded intervals.
    """

    scores: np.ndarray
    frame_rate: float
    start: float = 0.0
    duration: Optional[float] = None

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1:
            raise ShapeMismatch(f"Detection track must be 1-D, got shape {scores.shape}")
        if np.any(scores < 0.0) or np.any(scores > 1.0):
            raise ValueError("Detection scores must lie in [0, 1]")
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return int(self.scores.shape[0])


def resample_frames(x: torch.Tensor, n_frames: int) -> torch.Tensor:
    """Linearly interpolate ``(..., T)`` frame values onto ``n_frames`` frames.

    Frame centres are matched end to end, so the first and last values are kept.
    """

    if x.shape[-1] < 1:
        raise ShapeMismatch("Cannot resample an empty track")
    if n_frames < 1:
        raise ShapeMismatch(f"Target frame count must be positive, got {n_frames}")
    if x.shape[-1] == n_frames:
        return x
    flat = x.reshape(-1, 1, x.shape[-1])
    if x.shape[-1] == 1:
        out = flat.expand(-1, -1, n_frames)
    else:
        out = F.interpolate(flat, size=n_frames, mode="linear", align_corners=True)
    return out.reshape(*x.shape[:-1], n_frames).clamp(0.0, 1.0)


class ConditionalEncoder(nn.Module):
    """Four conv blocks over a log-magnitude spectrogram, globally pooled to an embedding."""

    def __init__(self, cfg: ModelConfig, reference_samples: int) -> None:
        super().__init__()
        self.reference_samples = reference_samples
        self.frame = FrameSpec(cfg.con_n_fft, cfg.con_hop)
        blocks = []
        in_ch = 1
        for out_ch in cfg.con_channels:
            blocks += [
                nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(),
                nn.AvgPool2d(2, ceil_mode=True),
            ]
            in_ch = out_ch
        self.blocks = nn.Sequential(*blocks)
        self.project = nn.Linear(in_ch, cfg.embedding_dim)

    def forward(self, reference: torch.Tensor) -> torch.Tensor:
        if reference.shape[-1] != self.reference_samples:
            raise ShapeMismatch(
                f"Reference has {reference.shape[-1]} samples, expected {self.reference_samples}"
            )
        x = reference.reshape(-1, reference.shape[-1])
        spec = torch.log(stft_magnitude(x, self.frame) + 1e-6).unsqueeze(1)
        h = self.blocks(spec)
        pooled = h.mean(dim=(-2, -1))
        return self.project(pooled)


class SoundEncoder(nn.Module):
    """Learned filterbank: strided 1-D convolution followed by ReLU."""

    def __init__(self, n_filters: int, kernel_size: int, stride: int) -> None:
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride
        self.conv = nn.Conv1d(1, n_filters, kernel_size, stride=stride, bias=False)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.kernel_size:
            raise ShapeMismatch(f"Mixture of {n_samples} samples is shorter than one {self.kernel_size}-sample frame")
        return (n_samples - self.kernel_size) // self.stride + 1

    def frame_centers(self, n_samples: int, sample_rate: int) -> np.ndarray:
        """Centre of every frame in seconds."""

        idx = np.arange(self.n_frames(n_samples))
        return (idx * self.stride + self.kernel_size / 2.0) / sample_rate

    def span_start(self, sample_rate: int) -> float:
        """Time at which the hop around frame 0's centre begins."""

        return (self.kernel_size - self.stride) / (2.0 * sample_rate)

    def forward(self, mixture: torch.Tensor) -> torch.Tensor:
        self.n_frames(mixture.shape[-1])
        return F.relu(self.conv(mixture.reshape(-1, 1, mixture.shape[-1])))


class _ConditionedBlock(nn.Module):
    """Dilated depthwise-separable residual block with per-frame conditioning."""

    def __init__(self, channels: int, hidden: int, cond_dim: int, dilation: int) -> None:
        super().__init__()
        self.inp = nn.Conv1d(channels + cond_dim, hidden, 1)
        self.track = nn.Conv1d(1, hidden, 1, bias=False)
        self.act1 = nn.PReLU()
        self.norm1 = nn.GroupNorm(1, hidden)
        self.depthwise = nn.Conv1d(hidden, hidden, 3, padding=dilation, dilation=dilation, groups=hidden)
        self.act2 = nn.PReLU()
        self.norm2 = nn.GroupNorm(1, hidden)
        self.out = nn.Conv1d(hidden, channels, 1)

    def forward(self, x: torch.Tensor, cond: torch.Tensor, track: Optional[torch.Tensor]) -> torch.Tensor:
        h = self.inp(torch.cat([x, cond], dim=1))
        if track is not None:
            # [x | e | d] concatenation, with the d column kept as its own weight
            h = h + self.track(track.unsqueeze(1))
        h = self.norm1(self.act1(h))
        h = self.norm2(self.act2(self.depthwise(h)))
        return x + self.out(h)


class SoundExtractor(nn.Module):
    """Mask-based separator conditioned on the embedding and, optionally, a detection track."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.norm = nn.GroupNorm(1, cfg.tse_filters)
        self.bottleneck = nn.Conv1d(cfg.tse_filters, cfg.tse_bottleneck, 1)
        self.blocks = nn.ModuleList(
            _ConditionedBlock(cfg.tse_bottleneck, cfg.tse_hidden, cfg.embedding_dim, 2**i)
            for _ in range(cfg.tse_repeats)
            for i in range(cfg.tse_blocks)
        )
        self.mask = nn.Conv1d(cfg.tse_bottleneck, cfg.tse_filters, 1)
        self.decoder = nn.ConvTranspose1d(
            cfg.tse_filters, 1, cfg.tse_kernel, stride=cfg.tse_kernel // 2, bias=False
        )

    def forward(
        self,
        features: torch.Tensor,
        embedding: torch.Tensor,
        track: Optional[torch.Tensor],
        n_samples: int,
    ) -> torch.Tensor:
        n_t = features.shape[-1]
        if track is not None and track.shape[-1] != n_t:
            raise ShapeMismatch(f"Detection track has {track.shape[-1]} frames, features have {n_t}")
        cond = embedding.unsqueeze(-1).expand(-1, -1, n_t)
        x = self.bottleneck(self.norm(features))
        for block in self.blocks:
            x = block(x, cond, track)
        masked = features * torch.sigmoid(self.mask(x))
        wave = self.decoder(masked).squeeze(1)
        if wave.shape[-1] >= n_samples:
            return wave[..., :n_samples]
        return F.pad(wave, (0, n_samples - wave.shape[-1]))


class SoundDetector(nn.Module):
    """Convolutional-recurrent frame scorer conditioned on the embedding."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        ch = cfg.tsd_conv_channels
        self.conv = nn.Sequential(
            nn.Conv1d(cfg.tsd_filters + cfg.embedding_dim, ch, 3, padding=1, bias=False),
            nn.BatchNorm1d(ch),
            nn.ReLU(),
            nn.Conv1d(ch, ch, 3, padding=1, bias=False),
            nn.BatchNorm1d(ch),
            nn.ReLU(),
        )
        self.rnn = nn.GRU(ch, cfg.tsd_rnn_hidden, batch_first=True, bidirectional=True)
        self.head = nn.Linear(2 * cfg.tsd_rnn_hidden, 1)

    def forward(self, features: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        cond = embedding.unsqueeze(-1).expand(-1, -1, features.shape[-1])
        h = self.conv(torch.cat([features, cond], dim=1)).transpose(1, 2)
        h, _ = self.rnn(h)
        return torch.sigmoid(self.head(h)).squeeze(-1)


class SoundClassifier(nn.Module):
    """Independent per-class sigmoids on the embedding."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.linear = nn.Linear(cfg.embedding_dim, cfg.n_classes)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.linear(embedding))


class DetectionNet(nn.Module):
    def __init__(self, cfg: ModelConfig, reference_samples: int) -> None:
        super().__init__()
        self.conditional_encoder = ConditionalEncoder(cfg, reference_samples)
        self.sound_encoder = SoundEncoder(cfg.tsd_filters, cfg.tsd_kernel, cfg.tsd_stride)
        self.detector = SoundDetector(cfg)
        self.classifier = SoundClassifier(cfg)


class ExtractionNet(nn.Module):
    def __init__(self, cfg: ModelConfig, reference_samples: int) -> None:
        super().__init__()
        self.conditional_encoder = ConditionalEncoder(cfg, reference_samples)
        self.sound_encoder = SoundEncoder(cfg.tse_filters, cfg.tse_kernel, cfg.tse_kernel // 2)
        self.extractor = SoundExtractor(cfg)
        self.classifier = SoundClassifier(cfg)

    def extract(
        self,
        mixture: torch.Tensor,
        embedding: torch.Tensor,
        track: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Run encoder and extractor; ``track`` is resampled to the encoder's frames."""

        features = self.sound_encoder(mixture)
        if track is not None:
            track = resample_frames(track, features.shape[-1])
        return self.extractor(features, embedding, track, mixture.shape[-1])


@dataclass
class ModelBundle:
    """Both branches plus the descriptor and counters that travel with a checkpoint."""

    model: ModelConfig
    synth: SynthConfig
    tsd: DetectionNet
    tse: ExtractionNet
    step: int = 0
    stage: int = 0
    cycle: int = 0
    config_hash: str = ""
    history: Dict[str, float] = field(default_factory=dict)

    def networks(self) -> Dict[str, nn.Module]:
        """Parameter groups by network, as frozen or trained per stage."""

        return {
            "tsd.conditional_encoder": self.tsd.conditional_encoder,
            "tsd.sound_encoder": self.tsd.sound_encoder,
            "tsd.detector": self.tsd.detector,
            "tsd.classifier": self.tsd.classifier,
            "tse.conditional_encoder": self.tse.conditional_encoder,
            "tse.sound_encoder": self.tse.sound_encoder,
            "tse.extractor": self.tse.extractor,
            "tse.classifier": self.tse.classifier,
        }

    def state_dict(self) -> Dict[str, torch.Tensor]:
        state = {f"tsd.{k}": v for k, v in self.tsd.state_dict().items()}
        state.update({f"tse.{k}": v for k, v in self.tse.state_dict().items()})
        return state

    def load_state_dict(self, state: Dict[str, torch.Tensor]) -> None:
        for prefix, net in (("tsd.", self.tsd), ("tse.", self.tse)):
            net.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})

    def eval(self) -> "ModelBundle":
        self.tsd.eval()
        self.tse.eval()
        return self

    def descriptor(self) -> Dict[str, object]:
        n = self.synth.clip_samples
        return {
            "model": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(self.model).items()},
            "sample_rate": self.synth.sample_rate,
            "clip_seconds": self.synth.clip_seconds,
            "reference_seconds": self.synth.reference_seconds,
            "tsd_frames": self.tsd.sound_encoder.n_frames(n),
            "tse_frames": self.tse.sound_encoder.n_frames(n),
            "tsd_frame_rate": self.synth.sample_rate / self.tsd.sound_encoder.stride,
        }

    @property
    def tsd_frame_rate(self) -> float:
        return self.synth.sample_rate / self.tsd.sound_encoder.stride


def build_bundle(model: ModelConfig, synth: SynthConfig, seed: int) -> ModelBundle:
    """Fresh networks initialized from ``seed``."""

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        tsd = DetectionNet(model, synth.reference_samples)
        tse = ExtractionNet(model, synth.reference_samples)
    bundle = ModelBundle(model=model, synth=synth, tsd=tsd, tse=tse)
    log.debug("Built bundle with %d parameters", sum(p.numel() for n in bundle.networks().values() for p in n.parameters()))
    return bundle


def reinitialize(module: nn.Module, seed: int) -> None:
    """Reset every layer of ``module`` that knows how to reset itself."""

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for layer in module.modules():
            if hasattr(layer, "reset_parameters"):
                layer.reset_parameters()


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""

    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
