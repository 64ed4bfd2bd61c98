"""Binary feature files (SMFD), checkpoints (SMCK) and flat key-value configs."""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

FEATURE_MAGIC = b"SMFD"
CHECKPOINT_MAGIC = b"SMCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class FormatError(ValueError):
    pass


@dataclass
class FeatureClip:
    features: np.ndarray  # (T, D) float32
    labels: Optional[np.ndarray] = None  # (T,) int
    mask: Optional[np.ndarray] = None  # (T,) {0, 1}
    n_classes: int = 0

    @property
    def T(self) -> int:
        return self.features.shape[0]


def write_features(path, clip: FeatureClip) -> None:
    feats = np.ascontiguousarray(clip.features, dtype="<f4")
    T, D = feats.shape
    has_labels = clip.labels is not None
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, T, D, clip.n_classes, int(has_labels)))
        fh.write(feats.tobytes())
        if has_labels:
            mask = np.ones(T) if clip.mask is None else clip.mask
            fh.write(np.asarray(clip.labels, dtype="<u2").tobytes())
            fh.write(np.asarray(mask, dtype="u1").tobytes())


def read_features(path) -> FeatureClip:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, T, D, C, flags = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    has_labels = bool(flags & 1)
    expected = _HEADER.size + 4 * T * D + (3 * T if has_labels else 0)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = _HEADER.size
    feats = np.frombuffer(raw, dtype="<f4", count=T * D, offset=off).reshape(T, D).astype(np.float32)
    off += 4 * T * D
    labels = mask = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<u2", count=T, offset=off).astype(np.int64)
        mask = np.frombuffer(raw, dtype="u1", count=T, offset=off + 2 * T).astype(np.uint8)
    return FeatureClip(feats, labels, mask, C)


def write_checkpoint(path, tensors: dict[str, torch.Tensor]) -> None:
    """Named f32 tensors: name length u16, name, rank u8, dims u32, data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, t in tensors.items():
            arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)) + key)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path) -> dict[str, torch.Tensor]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, off)
            name = raw[off + 2 : off + 2 + n].decode("utf-8")
            off += 2 + n
            (rank,) = struct.unpack_from("<B", raw, off)
            dims = struct.unpack_from(f"<{rank}I", raw, off + 1)
            off += 1 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            out[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated tensor table") from exc
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return out


def save_model(path, model, extra_meta: Optional[dict] = None) -> None:
    """Write the model's parameters plus its config as ``meta.*`` scalar tensors."""
    tensors = {k: v for k, v in model.state_dict().items()}
    meta = dict(model.cfg.to_dict())
    meta.update(extra_meta or {})
    for k, v in meta.items():
        tensors[f"meta.{k}"] = torch.tensor([float(v)])
    write_checkpoint(path, tensors)


def load_model(path, dtype=torch.float32):
    from .model import ModelConfig, SurgicalMamba

    tensors = read_checkpoint(path)
    meta = {k[5:]: float(v[0]) for k, v in tensors.items() if k.startswith("meta.")}
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name in meta:
            kwargs[f.name] = bool(meta[f.name]) if f.type in ("bool", bool) else int(meta[f.name])
    model = SurgicalMamba(ModelConfig(**kwargs))
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("meta.")})
    return model.to(dtype), meta


def read_kv(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_kv(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in values.items()))


def coerce_dataclass(cls, values: dict):
    """Build dataclass ``cls`` from string values, converting by field default type."""
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for k, v in values.items():
        if k not in known:
            raise FormatError(f"unknown {cls.__name__} key: {k}")
        default = getattr(cls(), k)
        if isinstance(default, bool):
            kwargs[k] = v.lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            kwargs[k] = int(v)
        elif isinstance(default, float):
            kwargs[k] = float(v)
        else:
            kwargs[k] = v
    return cls(**kwargs)
