"""Low-rank adapters: ``y = W0 x + scale * B (A x)`` with ``B`` zero at creation."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from ._io import atomic_write_bytes
from .errors import CompatibilityError, ConfigError, DataError, FormatError, RankError, ShapeError
from .model import ModelParams, fingerprint, lora_target_names

ADAPTER_MAGIC = b"EDLORA1\x00"
ADAPTER_VERSION = 1
STAGES = ("omni", "edit")


@dataclass
class LoraAdapter:
    rank: int
    alpha: float
    entries: dict  # target -> (A [r, k], B [d, r])
    stage: str = "edit"
    base_fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def scale(self):
        return self.alpha / self.rank

    @property
    def targets(self):
        return list(self.entries)

    def check_targets(self, params: ModelParams):
        for name, (A, B) in self.entries.items():
            key = name + ".weight"
            if key not in params.tensors:
                raise CompatibilityError(f"adapter target {name!r} is not a layer of this model")
            d, k = params.tensors[key].shape
            if A.shape != (self.rank, k) or B.shape != (d, self.rank):
                raise CompatibilityError(
                    f"adapter target {name!r}: A {A.shape}, B {B.shape} do not fit a {d}x{k} layer at rank {self.rank}"
                )

    def copy(self):
        return LoraAdapter(
            self.rank,
            self.alpha,
            {k: (np.array(a), np.array(b)) for k, (a, b) in self.entries.items()},
            self.stage,
            self.base_fingerprint,
            dict(self.meta),
        )


def create_adapter(params: ModelParams, targets=None, rank=4, alpha=None, seed=0, stage="edit") -> LoraAdapter:
    """Fresh adapter on ``targets`` (default: every attention/MLP matrix).

    ``A`` is Gaussian with std ``1/rank``; ``B`` is exactly zero. ``alpha``
    defaults to ``rank`` so the scale is 1.
    """
    if stage not in STAGES:
        raise ConfigError(f"stage must be one of {STAGES}, got {stage!r}")
    targets = lora_target_names(params.config) if targets is None else list(targets)
    if not targets:
        raise ConfigError("adapter needs at least one target layer")
    rng = np.random.default_rng(seed)
    dtype = params.dtype
    entries = {}
    for name in targets:
        key = name + ".weight"
        if key not in params.tensors:
            raise ConfigError(f"unknown adapter target {name!r}")
        d, k = params.tensors[key].shape
        if not 1 <= rank < min(d, k):
            raise RankError(f"rank {rank} must satisfy 1 <= r < min(d, k) = {min(d, k)} for {name!r}")
        A = rng.normal(0.0, 1.0 / rank, size=(rank, k)).astype(dtype)
        B = np.zeros((d, rank), dtype=dtype)
        entries[name] = (A, B)
    alpha = float(rank if alpha is None else alpha)
    return LoraAdapter(rank, alpha, entries, stage, fingerprint(params))


def lora_forward(entry, W0, x):
    """``W0 @ x + scale * B @ (A @ x)`` for ``x`` of shape ``[k]`` or ``[..., k]``.

    Differentiable in ``A`` and ``B``; ``W0`` is treated as a constant.
    """
    A, B, scale = entry
    A, B = nm.as_tensor(A), nm.as_tensor(B)
    W0 = nm.as_tensor(np.asarray(W0.data if isinstance(W0, nm.Tensor) else W0))
    x = nm.as_tensor(x)
    d, k = W0.shape
    if A.shape[1] != k or B.shape[0] != d or A.shape[0] != B.shape[1] or x.shape[-1] != k:
        raise ShapeError(f"lora shapes disagree: W0 {W0.shape}, A {A.shape}, B {B.shape}, x {x.shape}")
    vec = x.ndim == 1
    xr = nm.reshape(x, (1, k)) if vec else x
    y = nm.matmul(xr, nm.transpose(W0))
    delta = nm.matmul(nm.matmul(xr, nm.transpose(A)), nm.transpose(B))
    out = nm.add(y, nm.mul(delta, float(scale)))
    return nm.reshape(out, (d,)) if vec else out


def delta_weight(adapter: LoraAdapter, target):
    A, B = adapter.entries[target]
    return (adapter.scale * (B.astype(np.float64) @ A.astype(np.float64))).astype(A.dtype)


def merge(params: ModelParams, adapter: LoraAdapter, strict=True) -> ModelParams:
    """New params with ``W0 + scale * B A`` folded into every target.

    ``strict`` requires the adapter to have been created against exactly
    these weights.
    """
    adapter.check_targets(params)
    if strict and adapter.base_fingerprint != fingerprint(params):
        raise CompatibilityError(
            f"adapter was built for base {adapter.base_fingerprint}, not {fingerprint(params)}"
        )
    merged = params.copy()
    for target in adapter.entries:
        key = target + ".weight"
        merged.tensors[key] = (merged.tensors[key] + delta_weight(adapter, target)).astype(params.dtype)
    merged.meta.setdefault("lineage", []).append(
        {"stage": adapter.stage, "rank": adapter.rank, "base": adapter.base_fingerprint}
    )
    return merged


# ---------------------------------------------------------------- container


def adapter_bytes(adapter: LoraAdapter) -> bytes:
    meta = {
        "stage": adapter.stage,
        "rank": adapter.rank,
        "alpha": adapter.alpha,
        "fingerprint": adapter.base_fingerprint,
        "targets": adapter.targets,
        "meta": adapter.meta,
    }
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [ADAPTER_MAGIC, struct.pack("<II", ADAPTER_VERSION, len(header)), header]
    for name, (A, B) in adapter.entries.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, nm.write_tensor(A), nm.write_tensor(B)]
    return b"".join(parts)


def save_adapter(adapter: LoraAdapter, path):
    atomic_write_bytes(path, adapter_bytes(adapter))


def parse_adapter(buf: bytes) -> LoraAdapter:
    if buf[:8] != ADAPTER_MAGIC:
        raise FormatError("bad adapter magic", 0)
    if len(buf) < 16:
        raise FormatError("truncated adapter header", len(buf))
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != ADAPTER_VERSION:
        raise FormatError(f"unsupported adapter version {version}", 8)
    off = 16
    if off + hlen > len(buf):
        raise FormatError("truncated metadata block", off)
    try:
        meta = json.loads(buf[off : off + hlen].decode("utf-8"))
        rank, alpha, targets = int(meta["rank"]), float(meta["alpha"]), list(meta["targets"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"unreadable metadata block: {e}", off) from e
    off += hlen
    entries = {}
    for expected in targets:
        start = off
        if off + 2 > len(buf):
            raise FormatError("truncated target record", off)
        (n,) = struct.unpack_from("<H", buf, off)
        name = buf[off + 2 : off + 2 + n].decode("utf-8", errors="replace")
        if name != expected:
            raise FormatError(f"expected record {expected!r}, found {name!r}", start)
        A, off = nm.read_tensor(buf, off + 2 + n)
        B, off = nm.read_tensor(buf, off)
        if A.ndim != 2 or B.ndim != 2 or A.shape[0] != rank or B.shape[1] != rank:
            raise FormatError(f"{name!r}: A {A.shape} / B {B.shape} inconsistent with rank {rank}", start)
        entries[name] = (A, B)
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last record", off)
    return LoraAdapter(rank, alpha, entries, meta["stage"], meta["fingerprint"], meta.get("meta", {}))


def load_adapter(path, params: ModelParams = None) -> LoraAdapter:
    """Read an adapter; with ``params``, also verify it belongs to those weights."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise DataError(f"cannot read adapter {path}: {e}") from e
    adapter = parse_adapter(buf)
    if params is not None:
        adapter.check_targets(params)
        if adapter.base_fingerprint != fingerprint(params):
            raise CompatibilityError(f"adapter base {adapter.base_fingerprint} does not match checkpoint")
    return adapter
