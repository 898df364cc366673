"""Checkpoint archives: a ZIP holding a JSON descriptor and raw tensor blobs."""

from __future__ import annotations

import dataclasses
import json
import logging
import zipfile
from pathlib import Path
from typing import Dict

import numpy as np
import torch

from .config import SCHEMA_VERSION, ModelConfig, SynthConfig, config_from_dict
from .errors import CheckpointVersionError, ConfigError, NotFound
from .models import ModelBundle, build_bundle

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DESCRIPTOR_NAME = "descriptor.json"
TENSOR_DIR = "tensors"
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


def _clean_path(raw: Path) -> Path:
    return Path(raw).expanduser().resolve()


def save_bundle(bundle: ModelBundle, path: Path) -> Path:
    """Write ``bundle`` to ``path`` and return the archive location."""

    archive_path = _clean_path(path)
    archive_path.parent.mkdir(parents=True, exist_ok=True)

    tensors: Dict[str, Dict[str, object]] = {}
    blobs: Dict[str, bytes] = {}
    for name, tensor in bundle.state_dict().items():
        dtype = _DTYPES.get(tensor.dtype)
        if dtype is None:
            raise TypeError(f"Cannot archive tensor {name} of dtype {tensor.dtype}")
        array = tensor.detach().cpu().numpy().astype(dtype, copy=False)
        tensors[name] = {"dtype": dtype, "shape": list(array.shape)}
        blobs[name] = array.tobytes()

    descriptor = {
        "format_version": FORMAT_VERSION,
        "schema_version": SCHEMA_VERSION,
        "architecture": bundle.descriptor(),
        "synth": {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(bundle.synth).items()},
        "step": bundle.step,
        "stage": bundle.stage,
        "cycle": bundle.cycle,
        "config_hash": bundle.config_hash,
        "history": bundle.history,
        "tensors": tensors,
    }

    tmp_path = archive_path.with_suffix(archive_path.suffix + ".part")
    with zipfile.ZipFile(tmp_path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(DESCRIPTOR_NAME, json.dumps(descriptor, indent=2, sort_keys=True))
        for name, blob in blobs.items():
            zf.writestr(f"{TENSOR_DIR}/{name}.bin", blob)
    tmp_path.replace(archive_path)
    log.info("Saved checkpoint %s (stage %d, step %d)", archive_path, bundle.stage, bundle.step)
    return archive_path


def read_descriptor(path: Path) -> Dict[str, object]:
    archive_path = _clean_path(path)
    if not archive_path.exists():
        raise NotFound(f"Checkpoint not found: {path}")
    with zipfile.ZipFile(archive_path) as zf:
        descriptor = json.loads(zf.read(DESCRIPTOR_NAME).decode("utf-8"))
    version = descriptor.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path} uses checkpoint format {version}; this version reads format {FORMAT_VERSION}"
        )
    return descriptor


def load_bundle(path: Path) -> ModelBundle:
    """Rebuild the networks described in ``path`` and load their exact parameters."""

    descriptor = read_descriptor(path)
    arch = descriptor["architecture"]
    try:
        raw = {"model": arch["model"], "data": {"synth": descriptor["synth"]}}
        cfg = config_from_dict(raw)
    except (KeyError, ConfigError) as exc:
        raise CheckpointVersionError(f"{path} has an unreadable architecture descriptor: {exc}") from exc
    model: ModelConfig = cfg.model
    synth: SynthConfig = cfg.data.synth

    bundle = build_bundle(model, synth, seed=0)
    state = {}
    with zipfile.ZipFile(_clean_path(path)) as zf:
        for name, meta in descriptor["tensors"].items():
            blob = zf.read(f"{TENSOR_DIR}/{name}.bin")
            array = np.frombuffer(blob, dtype=meta["dtype"]).reshape(meta["shape"])
            state[name] = torch.from_numpy(array.astype(array.dtype.newbyteorder("="), copy=True))
    bundle.load_state_dict(state)
    bundle.step = int(descriptor.get("step", 0))
    bundle.stage = int(descriptor.get("stage", 0))
    bundle.cycle = int(descriptor.get("cycle", 0))
    bundle.config_hash = str(descriptor.get("config_hash", ""))
    bundle.history = dict(descriptor.get("history", {}))
    log.info("Loaded checkpoint %s (stage %d)", path, bundle.stage)
    return bundle.eval()
