"""Checkpoint archive: a JSON manifest plus one little-endian float32 blob.

The manifest indexes every tensor by name with dtype, shape, byte offset,
byte length and sha256; EMA copies are stored under ``ema::<name>``.
"""
import hashlib
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import torch

from .config import Config
from .errors import ChecksumError, ConfigMismatch, ParseError
from .file_manager import DatasetFileManager, check_version
from .logger import get_logger
from .models.base import BaseDenoiser
from .models.registry import build_model
from .schemas import TftConfig

logger = get_logger(__name__)

EMA_PREFIX = "ema::"
BLOB_DTYPE = "<f4"


@dataclass
class LoadedCheckpoint:
    model: BaseDenoiser
    manifest: Dict[str, Any]
    ema_applied: bool = False
    ema_state: Dict[str, torch.Tensor] = field(default_factory=dict, repr=False)

    @property
    def step(self) -> int:
        return int(self.manifest.get("step", 0))

    @property
    def metadata(self) -> Dict[str, Any]:
        return self.manifest.get("metadata", {})


def _tensor_bytes(tensor: torch.Tensor) -> bytes:
    return tensor.detach().cpu().to(torch.float32).numpy().astype(BLOB_DTYPE, copy=False).tobytes()


def save_checkpoint(directory: str, model: BaseDenoiser, step: int = 0,
                    ema_state: Optional[Dict[str, torch.Tensor]] = None,
                    run_config: Optional[Dict[str, Any]] = None,
                    metadata: Optional[Dict[str, Any]] = None) -> str:
    """Persist model (and EMA) tensors with the config needed to rebuild the model"""
    named = [(name, tensor) for name, tensor in model.state_dict().items()]
    if ema_state:
        named += [(EMA_PREFIX + name, tensor) for name, tensor in ema_state.items()]

    chunks: List[bytes] = []
    index = []
    offset = 0
    for name, tensor in named:
        data = _tensor_bytes(tensor)
        index.append({
            "name": name,
            "dtype": "float32",
            "shape": list(tensor.shape),
            "offset": offset,
            "nbytes": len(data),
            "sha256": hashlib.sha256(data).hexdigest(),
        })
        chunks.append(data)
        offset += len(data)

    manifest = {
        "format_version": Config.CHECKPOINT_FORMAT_VERSION,
        "model": model.config.model_dump(),
        "tap_layer": model.tap_layer,
        "run_config": run_config or {},
        "step": int(step),
        "ema": bool(ema_state),
        "tensors": index,
        "metadata": metadata or {},
    }
    DatasetFileManager.write_bytes(os.path.join(directory, Config.CHECKPOINT_BLOB), b"".join(chunks))
    DatasetFileManager.write_json(manifest, os.path.join(directory, Config.CHECKPOINT_MANIFEST))
    logger.info(f"💾 保存检查点: {directory} (step={step}, {len(index)} 个张量, {offset} 字节)")
    return directory


def read_manifest(directory: str) -> Dict[str, Any]:
    path = os.path.join(directory, Config.CHECKPOINT_MANIFEST)
    manifest = DatasetFileManager.read_json(path)
    if not isinstance(manifest, dict) or "tensors" not in manifest:
        raise ParseError("Checkpoint manifest lacks a tensor index", path=path)
    check_version(manifest.get("format_version"), Config.CHECKPOINT_FORMAT_VERSION)
    return manifest


def read_tensors(directory: str, manifest: Dict[str, Any]) -> Dict[str, torch.Tensor]:
    """Decode and checksum every indexed tensor"""
    with open(os.path.join(directory, Config.CHECKPOINT_BLOB), "rb") as file:
        blob = file.read()
    tensors = {}
    for entry in manifest["tensors"]:
        start, length = int(entry["offset"]), int(entry["nbytes"])
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        if length != expected:
            raise ChecksumError(f"Tensor {entry['name']} declares {length} bytes for shape {entry['shape']}")
        if start < 0 or start + length > len(blob):
            raise ChecksumError(f"Tensor {entry['name']} lies outside the {len(blob)}-byte blob (truncated?)")
        data = blob[start: start + length]
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise ChecksumError(f"Checksum mismatch for tensor {entry['name']}")
        array = np.frombuffer(data, dtype=BLOB_DTYPE).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.astype(np.float32))
    return tensors


def _shape_mismatches(expected: Dict[str, torch.Tensor], found: Dict[str, torch.Tensor]):
    mismatches = []
    for name, tensor in expected.items():
        if name not in found:
            mismatches.append((name, None, tuple(tensor.shape)))
        elif tuple(found[name].shape) != tuple(tensor.shape):
            mismatches.append((name, tuple(found[name].shape), tuple(tensor.shape)))
    for name, tensor in found.items():
        if name not in expected:
            mismatches.append((name, tuple(tensor.shape), None))
    return mismatches


def load_checkpoint(directory: str, config: Optional[TftConfig] = None, use_ema: bool = True) -> LoadedCheckpoint:
    """Rebuild the model and load its tensors.

    ``config`` overrides the stored architecture; a model whose tensor shapes
    differ from the archive fails with the full list of offending tensors.
    """
    manifest = read_manifest(directory)
    tensors = read_tensors(directory, manifest)
    config = config or TftConfig.model_validate(manifest["model"])
    model = build_model(config)

    weights = {k: v for k, v in tensors.items() if not k.startswith(EMA_PREFIX)}
    ema_state = {k[len(EMA_PREFIX):]: v for k, v in tensors.items() if k.startswith(EMA_PREFIX)}
    mismatches = _shape_mismatches(model.state_dict(), weights)
    if mismatches:
        raise ConfigMismatch(mismatches)
    model.load_state_dict(weights)

    applied = False
    if use_ema and ema_state:
        with torch.no_grad():
            params = dict(model.named_parameters())
            for name, value in ema_state.items():
                if name in params:
                    params[name].copy_(value)
        applied = True
    if manifest.get("tap_layer"):
        model.set_tap_layer(int(manifest["tap_layer"]))

    logger.info(f"📦 加载检查点: {directory} (step={manifest.get('step', 0)}, EMA={'是' if applied else '否'})")
    return LoadedCheckpoint(model=model, manifest=manifest, ema_applied=applied, ema_state=ema_state)


def encode_histogram(histogram: Dict[str, Dict[int, int]]) -> Dict[str, Dict[str, int]]:
    """JSON object keys must be strings"""
    return {domain: {str(n): int(c) for n, c in sorted(counts.items())} for domain, counts in histogram.items()}


def decode_histogram(metadata: Dict[str, Any], domain: str) -> Dict[int, int]:
    """Atom-count histogram of one domain stored in checkpoint metadata"""
    counts = metadata.get("atom_count_histogram", {}).get(domain, {})
    return {int(n): int(c) for n, c in counts.items()}
