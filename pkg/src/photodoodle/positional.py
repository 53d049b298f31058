"""2D axial rotary position embedding and position cloning for condition tokens."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .errors import ConfigError, ShapeError

ROLES = ("latent", "image", "text")


@dataclass
class TokenSeq:
    """Tokens ``[L, d]`` (or batched ``[B, L, d]``) with one (i, j) grid position per token."""

    tokens: object
    positions: np.ndarray
    role: str = "latent"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 2)
        if self.role not in ROLES:
            raise ConfigError(f"unknown token role {self.role!r}")
        if self.tokens.shape[-2] != len(self.positions):
            raise ShapeError(f"{self.tokens.shape[-2]} tokens but {len(self.positions)} positions")

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True)
class RopeTable:
    head_dim: int
    base: float = 10000.0
    freqs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 4:
            raise ConfigError(f"head_dim must be a positive multiple of 4, got {self.head_dim}")
        pairs_per_axis = self.head_dim // 4
        k = np.arange(pairs_per_axis, dtype=np.float64)
        object.__setattr__(self, "freqs", self.base ** (-2.0 * k / (self.head_dim / 2)))

    def angles(self, positions):
        """Rotation angle per (position, pair slot): ``[L, head_dim // 2]``.

        The first half of the pair slots follows the row index, the second half the column.
        """
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        return np.concatenate([pos[:, :1] * self.freqs, pos[:, 1:] * self.freqs], axis=1)

    def cos_sin(self, positions, dtype=np.float64):
        ang = self.angles(positions)
        return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rotate(x, cos, sin):
    # x: [..., head_dim] with adjacent (even, odd) pairs; cos/sin broadcast to [..., head_dim/2]
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rope_rotate(table: RopeTable, vec, pos):
    """Rotate one head vector by the rotation for grid position ``pos``."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (table.head_dim,):
        raise ShapeError(f"expected vector of length {table.head_dim}, got shape {vec.shape}")
    cos, sin = table.cos_sin([pos])
    return _rotate(vec, cos[0], sin[0])


def rotate_heads(x, table: RopeTable, positions):
    """Differentiable RoPE on ``x`` shaped ``[B, H, L, head_dim]``; positions ``[L, 2]``."""
    x = nm.as_tensor(x)
    if x.shape[-1] != table.head_dim:
        raise ShapeError(f"head dim {x.shape[-1]} does not match rope table {table.head_dim}")
    cos, sin = table.cos_sin(positions, dtype=x.dtype)
    # inverse rotation is the transpose: negate sin
    return nm.record(_rotate(x.data, cos, sin), (x,), lambda g: (_rotate(g, cos, -sin),))


def apply_rope(table: RopeTable, seq: TokenSeq, heads: int) -> TokenSeq:
    """Rotate every head of every token by its stored position."""
    tokens = nm.as_tensor(seq.tokens)
    d = tokens.shape[-1]
    if heads <= 0 or d % heads:
        raise ConfigError(f"model dim {d} is not divisible by {heads} heads")
    if d // heads != table.head_dim:
        raise ConfigError(f"head dim {d // heads} does not match rope table {table.head_dim}")
    lead = tokens.shape[:-2]
    L = tokens.shape[-2]
    # [..., L, H, hd] -> [..., H, L, hd]
    x = nm.reshape(tokens, lead + (L, heads, table.head_dim))
    nlead = len(lead)
    perm = tuple(range(nlead)) + (nlead + 1, nlead, nlead + 2)
    x = nm.transpose(x, perm)
    x = rotate_heads(x, table, seq.positions)
    x = nm.reshape(nm.transpose(x, perm), lead + (L, d))
    out = x if isinstance(seq.tokens, nm.Tensor) else x.data
    return TokenSeq(out, seq.positions.copy(), seq.role)


def grid_positions(rows: int, cols: int) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ShapeError(f"grid must be at least 1x1, got {rows}x{cols}")
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.int64)


def clone_positions(src_grid) -> tuple[np.ndarray, np.ndarray]:
    """Latent and condition position lists for a ``(rows, cols)`` grid; identical by construction."""
    rows, cols = src_grid
    cond = grid_positions(rows, cols)
    return cond.copy(), cond


def offset_positions(cond_positions) -> np.ndarray:
    """Latent positions moved to a grid region disjoint from the condition's (no-cloning ablation)."""
    cond = np.asarray(cond_positions, dtype=np.int64)
    extent = cond.max(axis=0) + 1
    return cond + extent


def text_positions(m: int) -> np.ndarray:
    return np.zeros((m, 2), dtype=np.int64)
