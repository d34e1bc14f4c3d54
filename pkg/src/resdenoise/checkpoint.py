"""Binary checkpoint format.

Layout::

    b"RUDN1"
    uint64 little-endian manifest length
    manifest: UTF-8 JSON (sorted keys, compact separators)
    raw little-endian float32 tensor data, concatenated

The manifest holds the format version, the model config, the extractor
settings, a tensor table (name, dtype, shape, role, byte offset into the
data section), optional Adam scalars and free-form training metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import FeatureExtractor, ModelConfig, ResUNet

MAGIC = b"RUDN1"
FORMAT_VERSION = 1
_DTYPE = "<f4"


class CheckpointError(ValueError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    tensors: dict  # name -> float32 array, parameters first then BN buffers
    extractor_seed: int = 0
    extractor_channels: tuple = (16, 32, 64)
    adam: AdamState | None = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ResUNet, extractor: FeatureExtractor | None = None, adam=None, metadata=None):
        tensors = {name: np.array(arr, dtype=np.float32) for name, arr in model.named_tensors()}
        ext_seed = extractor.seed if extractor else 0
        ext_ch = extractor.channels if extractor else (16, 32, 64)
        return cls(model.config, tensors, ext_seed, tuple(ext_ch), adam, dict(metadata or {}))

    def to_model(self, dtype=np.float32) -> ResUNet:
        model = ResUNet(self.model_config, dtype=dtype)
        load_into(model, self.tensors)
        return model

    def extractor(self, dtype=np.float32) -> FeatureExtractor:
        return FeatureExtractor(self.extractor_channels, self.extractor_seed, dtype)


def load_into(model: ResUNet, tensors: dict):
    """Copy arrays into a model, validating names and shapes."""
    expected = model.named_tensors()
    missing = [n for n, _ in expected if n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
    extra = set(tensors) - {n for n, _ in expected}
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensors: {', '.join(sorted(extra)[:5])}")
    for name, arr in expected:
        src = tensors[name]
        if src.shape != arr.shape:
            raise CheckpointError(f"tensor {name}: stored shape {src.shape} != model shape {arr.shape}")
        arr[...] = src


def save_checkpoint(ckpt: Checkpoint, path):
    entries, chunks = [], []
    offset = 0

    def put(name, arr, role):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "dtype": _DTYPE, "shape": list(arr.shape), "role": role, "offset": offset})
        chunks.append(data)
        offset += len(data)

    for name, arr in ckpt.tensors.items():
        put(name, arr, "model")
    adam = None
    if ckpt.adam is not None:
        a = ckpt.adam
        adam = {"beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "t": a.t}
        for name in sorted(a.m):
            put(name, a.m[name], "adam_m")
            put(name, a.v[name], "adam_v")
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "extractor": {"seed": ckpt.extractor_seed, "channels": list(ckpt.extractor_channels)},
        "tensors": entries,
        "adam": adam,
        "metadata": ckpt.metadata,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(text)) + text + b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror or exc}") from exc
    if raw[:5] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", raw[5:13])
    try:
        manifest = json.loads(raw[13:13 + n].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    data = raw[13 + n:]
    tensors, m, v = {}, {}, {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * count
        if e["dtype"] != _DTYPE or end > len(data):
            raise CheckpointError(f"{path}: tensor {e['name']} is truncated or has unsupported dtype")
        arr = np.frombuffer(data, dtype=_DTYPE, count=count, offset=e["offset"]).reshape(e["shape"])
        arr = arr.astype(np.float32)
        {"model": tensors, "adam_m": m, "adam_v": v}[e["role"]][e["name"]] = arr
    config = ModelConfig.from_dict(manifest["model_config"])
    adam = None
    if manifest["adam"] is not None:
        a = manifest["adam"]
        adam = AdamState(a["beta1"], a["beta2"], a["eps"], a["t"], m, v)
    ext = manifest["extractor"]
    ckpt = Checkpoint(config, tensors, ext["seed"], tuple(ext["channels"]), adam, manifest["metadata"])
    # validates every stored shape against the shapes the config implies
    ckpt.to_model()
    return ckpt
