"""Dataset manifests: WAV files plus one JSON record per example."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from .config import SynthConfig, substream_seed
from .dsp import Waveform, read_wav, write_wav
from .errors import ManifestIntegrityError, NotFound
from .synth import AudioClip, EventAnnotation, InterferenceMeta, MixtureExample, example_rng, synthesize_example

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class ManifestRecord:
    example_id: str
    mixture_path: str
    target_path: str
    reference_path: str
    class_id: int
    events: Tuple[EventAnnotation, ...]
    interferences: Tuple[InterferenceMeta, ...]
    background_id: str
    seed: int
    target_clip_id: str = ""
    reference_clip_id: str = ""
    target_snr_db: Optional[float] = None

    def to_json(self) -> Dict[str, object]:
        return {
            "id": self.example_id,
            "mixture_path": self.mixture_path,
            "target_path": self.target_path,
            "reference_path": self.reference_path,
            "class_id": self.class_id,
            "events": [e.to_dict() for e in self.events],
            "interferences": [i.to_dict() for i in self.interferences],
            "background_id": self.background_id,
            "seed": self.seed,
            "target_clip_id": self.target_clip_id,
            "reference_clip_id": self.reference_clip_id,
            "target_snr_db": self.target_snr_db,
        }

    @classmethod
    def from_json(cls, raw: Dict[str, object]) -> "ManifestRecord":
        class_id = int(raw["class_id"])
        return cls(
            example_id=str(raw["id"]),
            mixture_path=str(raw["mixture_path"]),
            target_path=str(raw["target_path"]),
            reference_path=str(raw["reference_path"]),
            class_id=class_id,
            events=tuple(
                EventAnnotation(float(e["onset"]), float(e["offset"]), class_id) for e in raw["events"]
            ),
            interferences=tuple(
                InterferenceMeta(int(i["class_id"]), float(i["snr_db"]), float(i["onset"]), str(i.get("clip_id", "")))
                for i in raw.get("interferences", [])
            ),
            background_id=str(raw.get("background_id", "")),
            seed=int(raw.get("seed", 0)),
            target_clip_id=str(raw.get("target_clip_id", "")),
            reference_clip_id=str(raw.get("reference_clip_id", "")),
            target_snr_db=raw.get("target_snr_db"),
        )


@dataclass(frozen=True)
class Manifest:
    path: Path
    records: Tuple[ManifestRecord, ...] = field(default_factory=tuple)

    @property
    def root(self) -> Path:
        return self.path.parent

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def find(self, example_id: str) -> ManifestRecord:
        for record in self.records:
            if record.example_id == example_id:
                return record
        raise NotFound(f"Example {example_id!r} is not in {self.path}")

    def load_audio(self, record: ManifestRecord, sample_rate: Optional[int] = None) -> Tuple[Waveform, Waveform, Waveform]:
        """Return ``(mixture, target, reference)`` for one record."""

        return tuple(  # type: ignore[return-value]
            read_wav(self.root / rel, sample_rate)
            for rel in (record.mixture_path, record.target_path, record.reference_path)
        )


def _write_example(example: MixtureExample, out_dir: Path) -> ManifestRecord:
    paths = {}
    for kind, wave in (
        ("mixture", example.mixture),
        ("target", example.target),
        ("reference", example.reference.waveform),
    ):
        rel = Path("audio") / f"{example.example_id}_{kind}.wav"
        write_wav(out_dir / rel, wave, subtype="FLOAT")
        paths[kind] = rel.as_posix()
    return ManifestRecord(
        example_id=example.example_id,
        mixture_path=paths["mixture"],
        target_path=paths["target"],
        reference_path=paths["reference"],
        class_id=example.class_id,
        events=example.target_events,
        interferences=example.interference_meta,
        background_id=example.background_id,
        seed=example.seed,
        target_clip_id=example.target_clip_id,
        reference_clip_id=example.reference.clip_id,
        target_snr_db=example.target_snr_db,
    )


def write_manifest(records: Sequence[ManifestRecord], path: Path) -> Manifest:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
    return Manifest(target.resolve(), tuple(records))


def build_dataset(
    fg_bank: Sequence[AudioClip],
    bg_bank: Sequence[AudioClip],
    cfg: SynthConfig,
    n_examples: int,
    out_dir: Path,
    split: str = "train",
    threads: int = 1,
) -> Manifest:
    """Synthesize ``n_examples`` mixtures into ``out_dir`` and write their manifest.

    Each example draws from its own stream seeded by ``(split seed, index)``,
    so the output does not depend on ``threads``.
    """

    out = Path(out_dir).expanduser()
    out.mkdir(parents=True, exist_ok=True)
    split_seed = substream_seed(cfg.seed, f"synth:{split}")

    def make(index: int) -> ManifestRecord:
        example = synthesize_example(
            fg_bank,
            bg_bank,
            cfg,
            example_rng(split_seed, index),
            example_id=f"{split}-{index:05d}",
            seed=split_seed,
        )
        return _write_example(example, out)

    log.info("Synthesizing %d %s examples into %s", n_examples, split, out)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        records: List[ManifestRecord] = list(pool.map(make, range(n_examples)))
    manifest = write_manifest(records, out / MANIFEST_NAME)
    log.info("Wrote manifest %s", manifest.path)
    return manifest


def load_manifest(path: Path) -> Manifest:
    """Parse a manifest and check that every audio file it names exists."""

    manifest_path = Path(path).expanduser()
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise NotFound(f"Manifest not found: {path}")

    records = []
    with open(manifest_path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = ManifestRecord.from_json(json.loads(line))
            except (KeyError, ValueError, TypeError) as exc:
                raise ManifestIntegrityError(f"{manifest_path}:{line_no}: malformed record ({exc})") from exc
            for rel in (record.mixture_path, record.target_path, record.reference_path):
                if not (manifest_path.parent / rel).is_file():
                    raise ManifestIntegrityError(
                        f"Example {record.example_id}: audio file {rel} is missing"
                    )
            records.append(record)
    return Manifest(manifest_path.resolve(), tuple(records))
