"""Multi-modal DiT velocity predictor over ``[latent; image condition; text]`` tokens."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import numeric as nm
from ._io import atomic_write_bytes, fnv1a64
from .errors import (
    CompatibilityError,
    ConfigError,
    ContractError,
    FormatError,
    IntegrityError,
    PECloningError,
    ShapeError,
)
from .positional import RopeTable, TokenSeq, rotate_heads, text_positions

CKPT_MAGIC = b"PDCKPT1\x00"
CKPT_VERSION = 1
LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    heads: int = 4
    depth: int = 2
    mlp_ratio: int = 4
    vocab_size: int = 64
    patch: int = 4
    channels: int = 3
    max_text_len: int = 8
    rope_base: float = 10000.0
    codec_seed: int = 0
    pe_clone: bool = True

    def __post_init__(self):
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.head_dim % 4:
            raise ConfigError(f"head_dim={self.head_dim} must be divisible by 4")
        if self.d % 2:
            raise ConfigError("d must be even for the timestep features")
        for name in ("depth", "mlp_ratio", "vocab_size", "patch", "channels", "max_text_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def head_dim(self):
        return self.d // self.heads

    @property
    def token_dim(self):
        """Width of codec tokens; the model maps them in and out of ``d``."""
        return self.patch * self.patch * self.channels

    @property
    def hidden(self):
        return self.d * self.mlp_ratio

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Every parameter name and its shape; linear weights are ``[out, in]``."""
    d, T, h = cfg.d, cfg.token_dim, cfg.hidden
    shapes = {
        "embed_in.weight": (d, T),
        "embed_in.bias": (d,),
        "text_embed.weight": (cfg.vocab_size, d),
        "time_mlp.0.weight": (d, d),
        "time_mlp.0.bias": (d,),
        "time_mlp.2.weight": (d, d),
        "time_mlp.2.bias": (d,),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        shapes.update(
            {
                b + "norm1.weight": (d,),
                b + "norm1.bias": (d,),
                b + "attn.q.weight": (d, d),
                b + "attn.q.bias": (d,),
                b + "attn.k.weight": (d, d),
                b + "attn.k.bias": (d,),
                b + "attn.v.weight": (d, d),
                b + "attn.v.bias": (d,),
                b + "attn.o.weight": (d, d),
                b + "attn.o.bias": (d,),
                b + "norm2.weight": (d,),
                b + "norm2.bias": (d,),
                b + "mlp.fc1.weight": (h, d),
                b + "mlp.fc1.bias": (h,),
                b + "mlp.fc2.weight": (d, h),
                b + "mlp.fc2.bias": (d,),
                b + "adaln.weight": (6 * d, d),
                b + "adaln.bias": (6 * d,),
            }
        )
    shapes.update(
        {
            "final.adaln.weight": (2 * d, d),
            "final.adaln.bias": (2 * d,),
            "final.proj.weight": (T, d),
            "final.proj.bias": (T,),
        }
    )
    return shapes


def lora_target_names(cfg: ModelConfig) -> list[str]:
    """Default adapter targets: attention and MLP matrices of every block."""
    names = []
    for i in range(cfg.depth):
        for m in ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"):
            names.append(f"blocks.{i}.{m}")
    return names


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        audit_shapes(self.config, self.tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self):
        return ModelParams(
            self.config,
            {k: np.array(v) for k, v in self.tensors.items()},
            json.loads(json.dumps(self.meta)),
        )

    @property
    def dtype(self):
        return self.tensors["embed_in.weight"].dtype


def audit_shapes(cfg: ModelConfig, tensors):
    expected = param_shapes(cfg)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise IntegrityError(f"parameter set mismatch; missing={missing[:5]} unexpected={extra[:5]}")
    for name, shape in expected.items():
        if tuple(np.shape(tensors[name])) != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {np.shape(tensors[name])}")


def _is_zero_init(name):
    return name.endswith(".bias") or name.startswith("final.") or name.endswith("adaln.weight")


def init_params(cfg: ModelConfig, seed=0, dtype="f32", zero_gates=True) -> ModelParams:
    """Gaussian(0, 0.02) projections; zero biases, modulation and output head.

    With ``zero_gates=False`` every tensor is drawn at random instead, which
    gives a non-degenerate network for gradient checks.
    """
    rng = np.random.default_rng(seed)
    dt = nm.DTYPES[dtype]
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if ".norm" in name and name.endswith(".weight"):
            arr = np.ones(shape)
        elif zero_gates and _is_zero_init(name):
            arr = np.zeros(shape)
        elif ".norm" in name:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        if not zero_gates and (_is_zero_init(name) or ".norm" in name):
            arr = arr + rng.normal(0.0, 0.2, size=shape)
        tensors[name] = arr.astype(dt)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------- binding


class Weights:
    """Parameters (and optionally a LoRA adapter) bound as tensors for one pass.

    With a tape, base tensors are registered under their own names and adapter
    matrices under ``lora.<target>.A`` / ``lora.<target>.B``.
    """

    def __init__(self, params: ModelParams, tape=None, train_base=False, adapter=None, train_adapter=False):
        self.params = params
        self.config = params.config
        self.tape = tape
        if tape is None:
            self.w = {k: nm.as_tensor(v) for k, v in params.tensors.items()}
        else:
            self.w = {k: tape.param(k, v, trainable=train_base) for k, v in params.tensors.items()}
        self.lora = {}
        self.lora_scale = 0.0
        if adapter is not None:
            adapter.check_targets(params)
            self.lora_scale = adapter.scale
            for target, (A, B) in adapter.entries.items():
                if tape is None:
                    self.lora[target] = (nm.as_tensor(A), nm.as_tensor(B))
                else:
                    self.lora[target] = (
                        tape.param(f"lora.{target}.A", A, trainable=train_adapter),
                        tape.param(f"lora.{target}.B", B, trainable=train_adapter),
                    )
        self.rope = RopeTable(self.config.head_dim, self.config.rope_base)

    def linear(self, x, name):
        y = nm.add(nm.matmul(x, nm.transpose(self.w[name + ".weight"])), self.w[name + ".bias"])
        if name in self.lora:
            A, B = self.lora[name]
            delta = nm.matmul(nm.matmul(x, nm.transpose(A)), nm.transpose(B))
            y = nm.add(y, nm.mul(delta, self.lora_scale))
        return y


def bind(params, adapter=None) -> Weights:
    return params if isinstance(params, Weights) else Weights(params, adapter=adapter)


# ---------------------------------------------------------------- forward


def timestep_features(t, dim):
    """Sinusoidal features of ``t * 1000`` at ``dim / 2`` geometric frequencies, ``[cos | sin]``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise ContractError(f"timestep must lie in [0, 1], got {t}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = (t * 1000.0)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def timestep_embedding(weights: Weights, t):
    """Sinusoidal features through the two-layer time MLP: ``[B, d]``."""
    feats = nm.as_tensor(timestep_features(t, weights.config.d).astype(weights.params.dtype))
    h = nm.silu(weights.linear(feats, "time_mlp.0"))
    return weights.linear(h, "time_mlp.2")


@dataclass
class JointSequence:
    """``[z; c_I; c_T]`` along the token axis with the matching position list."""

    tokens: object  # Tensor [B, L, d]
    positions: np.ndarray
    segments: tuple  # (N, N, M)

    def __post_init__(self):
        n1, n2, m = self.segments
        L = n1 + n2 + m
        if self.tokens.shape[-2] != L or len(self.positions) != L:
            raise IntegrityError(
                f"segments {self.segments} do not match {self.tokens.shape[-2]} tokens / {len(self.positions)} positions"
            )


def mm_attention(weights: Weights, x, positions, block: int, return_weights=False):
    """Unmasked multi-head attention over the whole joint sequence.

    Queries and keys are rotated by each token's position; values are not.
    """
    cfg = weights.config
    x = nm.as_tensor(x)
    B, L, d = x.shape
    if len(positions) != L:
        raise IntegrityError(f"{len(positions)} positions for {L} tokens")
    H, hd = cfg.heads, cfg.head_dim
    pre = f"blocks.{block}.attn."

    def heads(t):
        return nm.transpose(nm.reshape(t, (B, L, H, hd)), (0, 2, 1, 3))

    q = rotate_heads(heads(weights.linear(x, pre + "q")), weights.rope, positions)
    k = rotate_heads(heads(weights.linear(x, pre + "k")), weights.rope, positions)
    v = heads(weights.linear(x, pre + "v"))
    logits = nm.mul(nm.matmul(q, nm.transpose(k)), 1.0 / math.sqrt(hd))
    attn = nm.softmax_rows(logits)
    out = nm.reshape(nm.transpose(nm.matmul(attn, v), (0, 2, 1, 3)), (B, L, d))
    out = weights.linear(out, pre + "o")
    return (out, attn) if return_weights else out


def _modulate(h, shift, scale):
    return nm.add(nm.mul(h, nm.add(scale, 1.0)), shift)


def dit_block(weights: Weights, seq: JointSequence, cond, block: int) -> JointSequence:
    """Pre-norm residual block with adaLN-zero modulation from ``cond`` ``[B, d]``.

    ``cond`` is the timestep embedding; it is passed through SiLU here.
    """
    cfg = weights.config
    cond = nm.as_tensor(cond)
    if cond.shape[-1] != cfg.d:
        raise ShapeError(f"timestep embedding width {cond.shape[-1]} != d={cfg.d}")
    B = seq.tokens.shape[0]
    pre = f"blocks.{block}."
    mod = weights.linear(nm.silu(cond), pre + "adaln")
    shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = (
        nm.reshape(m, (B, 1, cfg.d)) for m in nm.split(mod, 6, axis=-1)
    )
    x = seq.tokens
    h = nm.layer_norm(x, weights.w[pre + "norm1.weight"], weights.w[pre + "norm1.bias"], LN_EPS)
    attn = mm_attention(weights, _modulate(h, shift_a, scale_a), seq.positions, block)
    x = nm.add(x, nm.mul(gate_a, attn))
    h = nm.layer_norm(x, weights.w[pre + "norm2.weight"], weights.w[pre + "norm2.bias"], LN_EPS)
    h = _modulate(h, shift_m, scale_m)
    h = weights.linear(nm.gelu(weights.linear(h, pre + "mlp.fc1")), pre + "mlp.fc2")
    x = nm.add(x, nm.mul(gate_m, h))
    return JointSequence(x, seq.positions, seq.segments)


def check_cloned(cfg: ModelConfig, z: TokenSeq, c_I: TokenSeq):
    if len(z) != len(c_I):
        raise PECloningError(f"latent has {len(z)} tokens but condition has {len(c_I)}")
    if cfg.pe_clone and not np.array_equal(z.positions, c_I.positions):
        raise PECloningError("latent positions are not cloned from the condition tokens")


def _batched(tokens):
    t = nm.as_tensor(tokens)
    return (t, False) if t.ndim == 3 else (nm.reshape(t, (1,) + t.shape), True)


def build_joint(weights: Weights, z: TokenSeq, c_I: TokenSeq, c_T) -> JointSequence:
    cfg = weights.config
    check_cloned(cfg, z, c_I)
    zt, _ = _batched(z.tokens)
    ct, _ = _batched(c_I.tokens)
    if zt.shape != ct.shape:
        raise ShapeError(f"latent tokens {zt.shape} vs condition tokens {ct.shape}")
    B = zt.shape[0]
    if isinstance(c_T, TokenSeq):
        text, _ = _batched(c_T.tokens)
        text = nm.as_tensor(text.data.astype(weights.params.dtype)) if not text.requires_grad else text
    else:
        ids = np.asarray(c_T, dtype=np.int64)
        ids = np.broadcast_to(ids, (B, ids.shape[-1])) if ids.ndim == 1 else ids
        text = nm.embedding(weights.w["text_embed.weight"], ids)
    if text.shape[0] != B:
        if text.shape[0] == 1:
            text = nm.as_tensor(np.broadcast_to(text.data, (B,) + text.shape[1:]).copy())
        else:
            raise ShapeError(f"text batch {text.shape[0]} vs latent batch {B}")
    M = text.shape[1]
    x = nm.concat(
        [weights.linear(zt, "embed_in"), weights.linear(ct, "embed_in"), text],
        axis=1,
    )
    positions = np.concatenate([z.positions, c_I.positions, text_positions(M)])
    return JointSequence(x, positions, (len(z), len(c_I), M))


def forward_velocity(params, z: TokenSeq, t, c_I: TokenSeq, c_T, adapter=None):
    """Predicted velocity for the latent tokens, shape like ``z.tokens``.

    ``params`` is :class:`ModelParams` or prebound :class:`Weights`. ``c_T`` is
    either word ids (``[M]`` or ``[B, M]``) or an already-embedded text
    :class:`TokenSeq`. Outputs at condition and text positions are dropped.
    """
    w = bind(params, adapter)
    _, squeeze = _batched(z.tokens)
    seq = build_joint(w, z, c_I, c_T)
    B = seq.tokens.shape[0]
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if t.size == 1 and B > 1:
        t = np.full(B, float(t[0]))
    cond = timestep_embedding(w, t)
    for i in range(w.config.depth):
        seq = dit_block(w, seq, cond, i)
    N = seq.segments[0]
    latent = nm.slice_axis(seq.tokens, 0, N, axis=1)
    shift, scale = (nm.reshape(m, (B, 1, w.config.d)) for m in nm.split(w.linear(nm.silu(cond), "final.adaln"), 2))
    h = _modulate(nm.layer_norm(latent, eps=LN_EPS), shift, scale)
    out = w.linear(h, "final.proj")
    if squeeze:
        out = nm.reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------- checkpoint


def _header_json(params: ModelParams) -> bytes:
    return json.dumps(
        {"config": asdict(params.config), "meta": params.meta}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")


def checkpoint_bytes(params: ModelParams) -> bytes:
    header = _header_json(params)
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(header)), header]
    for name in param_shapes(params.config):
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(nm.write_tensor(params.tensors[name]))
    return b"".join(parts)


def fingerprint(params: ModelParams) -> str:
    """64-bit FNV-1a of the serialized checkpoint, as 16 hex digits."""
    return f"{fnv1a64(checkpoint_bytes(params)):016x}"


def save_checkpoint(params: ModelParams, path) -> str:
    data = checkpoint_bytes(params)
    atomic_write_bytes(path, data)
    return f"{fnv1a64(data):016x}"


def parse_checkpoint(buf: bytes) -> ModelParams:
    if buf[:8] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(buf) < 16:
        raise FormatError("truncated checkpoint header", len(buf))
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    off = 16
    if off + hlen > len(buf):
        raise FormatError("truncated config block", off)
    try:
        header = json.loads(buf[off : off + hlen].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"unreadable config block: {e}", off) from e
    off += hlen
    tensors = {}
    while off < len(buf):
        if off + 2 > len(buf):
            raise FormatError("truncated tensor name", off)
        (n,) = struct.unpack_from("<H", buf, off)
        if off + 2 + n > len(buf):
            raise FormatError("truncated tensor name", off)
        name = buf[off + 2 : off + 2 + n].decode("utf-8", errors="replace")
        arr, off = nm.read_tensor(buf, off + 2 + n)
        tensors[name] = arr
    try:
        return ModelParams(cfg, tensors, header.get("meta", {}))
    except (IntegrityError, ShapeError) as e:
        raise FormatError(f"checkpoint contents inconsistent with its config: {e}", off) from e


def load_checkpoint(path) -> ModelParams:
    from .errors import DataError

    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    return parse_checkpoint(buf)


def require_same_config(a: ModelConfig, b: ModelConfig):
    if a != b:
        raise CompatibilityError(f"model configs differ: {a} vs {b}")
