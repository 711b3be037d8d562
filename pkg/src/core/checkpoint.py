"""Checkpoint format: a JSON manifest next to a blob of little-endian float32 tensors."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Tuple, Union

import numpy as np
import torch

from core.condense import CondensedLayer, drop_block
from core.errors import (
    ArgumentError,
    CheckpointVersionError,
    CorruptCheckpointError,
    MissingArtifactError,
)
from core.moe_model import ModelConfig, MoEModel

logger = logging.getLogger(__name__)

FORMAT_NAME = "condense-moe-checkpoint"
FORMAT_VERSION = 1
MANIFEST_FILE = "model.json"
BLOB_FILE = "model.bin"
BLOB_DTYPE = np.dtype("<f4")


def _tensor_bytes(param: torch.Tensor) -> bytes:
    return param.detach().cpu().contiguous().numpy().astype(BLOB_DTYPE, copy=False).tobytes()


def content_hash(items: List[Tuple[str, List[int], bytes]]) -> str:
    """SHA-256 over (name, shape, bytes) of every tensor in name order."""
    digest = hashlib.sha256()
    for name, shape, data in sorted(items, key=lambda item: item[0]):
        digest.update(name.encode("utf-8"))
        digest.update(json.dumps(shape).encode("ascii"))
        digest.update(data)
    return digest.hexdigest()


def _block_entries(model: MoEModel) -> List[Dict[str, Any]]:
    entries = []
    for block in model.blocks:
        layer = block.layer
        if layer.layer_kind == "condensed":
            entries.append(
                {
                    "layer_kind": "condensed",
                    "kept_experts": list(layer.kept_indices),
                    "origin": layer.origin,
                    "num_shared": len(layer.shared),
                    "fixed_gates": [float(g) for g in layer.fixed_gates.detach()],
                }
            )
        elif layer.layer_kind == "dropped":
            entries.append({"layer_kind": "dropped", "origin": layer.origin})
        else:
            entries.append({"layer_kind": "routed"})
    return entries


def save_checkpoint(model: MoEModel, path: Union[str, Path]) -> Path:
    """Write ``model.json`` and ``model.bin`` into the directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors: Dict[str, Dict[str, Any]] = {}
    items = []
    offset = 0
    chunks = []
    for name, param in model.named_parameters():
        if param.dtype != torch.float32:
            raise ArgumentError(f"checkpoint tensors must be float32; {name} is {param.dtype}")
        data = _tensor_bytes(param)
        shape = list(param.shape)
        tensors[name] = {"shape": shape, "offset": offset, "length": len(data)}
        items.append((name, shape, data))
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "blocks": _block_entries(model),
        "tensors": tensors,
        "blob": BLOB_FILE,
        "blob_size": offset,
        "content_hash": content_hash(items),
    }
    with open(path / BLOB_FILE, "wb") as f:
        for chunk in chunks:
            f.write(chunk)
    with open(path / MANIFEST_FILE, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info("saved checkpoint to %s (%d bytes)", path, offset)
    return path


def read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    """Read and check the manifest of a checkpoint directory."""
    manifest_path = Path(path) / MANIFEST_FILE
    if not manifest_path.exists():
        raise MissingArtifactError(f"checkpoint manifest not found: {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise CorruptCheckpointError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("format") != FORMAT_NAME:
        raise CorruptCheckpointError(f"not a checkpoint manifest: {manifest_path}")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {manifest.get('version')!r} "
            f"(expected {FORMAT_VERSION})"
        )
    return manifest


def _read_tensors(
    manifest: Mapping[str, Any], blob: bytes
) -> Dict[str, Tuple[List[int], bytes]]:
    tensors = {}
    for name, entry in manifest["tensors"].items():
        shape = [int(s) for s in entry["shape"]]
        offset = int(entry["offset"])
        length = int(entry["length"])
        expected = int(np.prod(shape, dtype=np.int64)) * BLOB_DTYPE.itemsize
        if length != expected:
            raise CorruptCheckpointError(f"tensor {name}: length {length} != {expected} bytes")
        if offset < 0 or offset + length > len(blob):
            raise CorruptCheckpointError(f"tensor {name} extends past the end of the blob")
        tensors[name] = (shape, blob[offset:offset + length])
    return tensors


def _skeleton(manifest: Mapping[str, Any]) -> MoEModel:
    config = ModelConfig.from_dict(manifest["config"])
    model = MoEModel(config)
    blocks = manifest["blocks"]
    if len(blocks) != config.num_blocks:
        raise CorruptCheckpointError("block list does not match the model config")
    for index, entry in enumerate(blocks):
        if entry["layer_kind"] == "condensed":
            layer = CondensedLayer(
                config.hidden_size,
                config.expert_inner,
                entry["kept_experts"],
                int(entry["num_shared"]),
                origin=int(entry.get("origin", index)),
                fixed_gates=entry.get("fixed_gates"),
            )
            model.set_moe_layer(index, layer)
        elif entry["layer_kind"] == "dropped":
            drop_block(model, index, int(entry.get("origin", index)))
        elif entry["layer_kind"] != "routed":
            raise CorruptCheckpointError(f"unknown layer kind {entry['layer_kind']!r}")
    return model


def load_checkpoint(path: Union[str, Path]) -> MoEModel:
    """Rebuild a model saved by ``save_checkpoint``; any inconsistency raises."""
    path = Path(path)
    manifest = read_manifest(path)
    blob_path = path / manifest.get("blob", BLOB_FILE)
    if not blob_path.exists():
        raise MissingArtifactError(f"checkpoint blob not found: {blob_path}")
    blob = blob_path.read_bytes()
    if len(blob) != int(manifest.get("blob_size", len(blob))):
        raise CorruptCheckpointError(
            f"blob is {len(blob)} bytes, manifest expects {manifest['blob_size']}"
        )
    tensors = _read_tensors(manifest, blob)
    items = [(name, shape, data) for name, (shape, data) in tensors.items()]
    if content_hash(items) != manifest.get("content_hash"):
        raise CorruptCheckpointError("content hash mismatch")

    model = _skeleton(manifest)
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        raise CorruptCheckpointError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
    with torch.no_grad():
        for name, (shape, data) in tensors.items():
            if list(params[name].shape) != shape:
                raise CorruptCheckpointError(f"tensor {name} has shape {shape}")
            values = np.frombuffer(data, dtype=BLOB_DTYPE).reshape(shape).astype(np.float32)
            params[name].copy_(torch.from_numpy(values))
    logger.info("loaded checkpoint from %s", path)
    return model


def checkpoint_bytes(path: Union[str, Path]) -> bytes:
    """Manifest and blob bytes concatenated (for byte-identity comparisons)."""
    path = Path(path)
    return (path / MANIFEST_FILE).read_bytes() + (path / BLOB_FILE).read_bytes()
