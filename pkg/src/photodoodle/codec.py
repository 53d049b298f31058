"""Invertible patch codec, word vocabulary, and Netpbm image files.

The codec stands in for a VAE: each ``p x p x C`` patch is flattened and
multiplied by a seeded orthonormal matrix, so decoding is exact.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import numeric as nm
from .errors import DataError, FormatError, IntegrityError, ShapeError
from .positional import TokenSeq, grid_positions

PAD = "<pad>"
UNK = "<unk>"


def orthonormal_projection(dim: int, seed: int, dtype=np.float64) -> np.ndarray:
    """QR of a seeded Gaussian, sign-fixed so the result is unique for the seed."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    return q.astype(dtype)


class PatchCodec(TransformerMixin, BaseEstimator):
    """Exactly invertible linear patch codec.

    ``transform`` maps images ``[n, H, W, C]`` to tokens ``[n, N, p*p*C]``;
    ``inverse_transform`` undoes it. ``fit`` only builds the projection and
    records the grid shape, so it may be called on any image batch of the
    right geometry.
    """

    def __init__(self, patch_size=4, channels=3, seed=0, dtype="f32"):
        self.patch_size = patch_size
        self.channels = channels
        self.seed = seed
        self.dtype = dtype

    @property
    def dim(self):
        return self.patch_size * self.patch_size * self.channels

    def fit(self, X=None, y=None):
        self.projection_ = orthonormal_projection(self.dim, self.seed, nm.DTYPES[self.dtype])
        if X is not None:
            X = np.asarray(X)
            self._check_image_shape(X.shape[-3:])
            self.image_shape_ = tuple(X.shape[-3:])
        return self

    def _ensure(self):
        if not hasattr(self, "projection_"):
            self.fit()

    def _check_image_shape(self, shape):
        if len(shape) != 3 or shape[2] != self.channels:
            raise ShapeError(f"expected H x W x {self.channels} image, got shape {tuple(shape)}")
        h, w, _ = shape
        p = self.patch_size
        if h % p or w % p or h == 0 or w == 0:
            raise ShapeError(f"image {h}x{w} is not divisible by patch size {p}")

    def grid(self, image_shape):
        self._check_image_shape(image_shape)
        return image_shape[0] // self.patch_size, image_shape[1] // self.patch_size

    def patchify(self, images):
        x = np.asarray(images)
        self._check_image_shape(x.shape[-3:])
        p = self.patch_size
        lead = x.shape[:-3]
        h, w, c = x.shape[-3:]
        x = x.reshape(lead + (h // p, p, w // p, p, c))
        n = len(lead)
        x = np.moveaxis(x, n + 2, n + 1)  # [..., gh, gw, p, p, c]
        return x.reshape(lead + ((h // p) * (w // p), p * p * c))

    def unpatchify(self, flat, grid):
        p, c = self.patch_size, self.channels
        gh, gw = grid
        lead = flat.shape[:-2]
        x = flat.reshape(lead + (gh, gw, p, p, c))
        n = len(lead)
        x = np.moveaxis(x, n + 1, n + 2)  # [..., gh, p, gw, p, c]
        return x.reshape(lead + (gh * p, gw * p, c))

    def transform(self, X):
        self._ensure()
        flat = self.patchify(X).astype(self.projection_.dtype, copy=False)
        return flat @ self.projection_.T

    def inverse_transform(self, X, grid=None):
        self._ensure()
        X = np.asarray(X)
        if grid is None:
            check_is_fitted(self, "image_shape_")
            grid = self.grid(self.image_shape_)
        if X.shape[-2] != grid[0] * grid[1] or X.shape[-1] != self.dim:
            raise ShapeError(f"tokens of shape {X.shape} do not fit a {grid} grid of dim {self.dim}")
        return self.unpatchify(X @ self.projection_, grid)


def encode_image(codec: PatchCodec, img) -> TokenSeq:
    """Image ``[H, W, C]`` → image-condition :class:`TokenSeq` with grid positions."""
    img = np.asarray(img)
    grid = codec.grid(img.shape)
    return TokenSeq(codec.transform(img), grid_positions(*grid), role="image")


def decode_tokens(codec: PatchCodec, tokens: TokenSeq):
    """Inverse of :func:`encode_image`. Pixel values are not clamped here."""
    pos = tokens.positions
    if len(pos) == 0:
        raise IntegrityError("no tokens to decode")
    rows, cols = pos[:, 0].max() + 1, pos[:, 1].max() + 1
    expected = grid_positions(rows, cols)
    if pos.min() < 0 or len(pos) != len(expected) or not np.array_equal(pos, expected):
        raise IntegrityError(f"token positions do not form a full {rows}x{cols} grid")
    data = tokens.tokens.data if isinstance(tokens.tokens, nm.Tensor) else np.asarray(tokens.tokens)
    return codec.inverse_transform(data, grid=(rows, cols))


# ---------------------------------------------------------------- text


_WORD = re.compile(r"\S+")


def tokenize(text: str) -> list[str]:
    return [w.lower() for w in _WORD.findall(text)]


@dataclass(frozen=True)
class Vocab:
    words: tuple
    max_len: int = 8
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        words = tuple(self.words)
        if not words or words[0] != PAD or UNK not in words:
            raise ValueError("vocab must start with PAD and contain UNK")
        if len(words) > 256:
            raise ValueError(f"vocab holds at most 256 words, got {len(words)}")
        if len(set(words)) != len(words):
            raise ValueError("vocab words must be unique")
        object.__setattr__(self, "words", words)
        object.__setattr__(self, "index", {w: i for i, w in enumerate(words)})

    @classmethod
    def build(cls, words, max_len=8):
        seen = [PAD, UNK]
        for w in words:
            if w not in seen:
                seen.append(w)
        return cls(tuple(seen), max_len)

    @property
    def pad_id(self):
        return 0

    @property
    def unk_id(self):
        return self.index[UNK]

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def ids(self, text: str) -> np.ndarray:
        """Word ids padded/truncated to exactly ``max_len``."""
        out = np.zeros(self.max_len, dtype=np.int64)
        toks = tokenize(text)[: self.max_len]
        out[: len(toks)] = [self.index.get(w, self.unk_id) for w in toks]
        return out

    def save(self, path):
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, max_len=8):
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise DataError(f"cannot read vocab {path}: {e}") from e
        return cls(tuple(w for w in lines if w), max_len)


@dataclass(frozen=True)
class InstructionEncoder:
    """Maps instructions onto rows of an embedding table; text tokens sit at (0, 0)."""

    vocab: Vocab
    table: np.ndarray

    def __post_init__(self):
        if self.table.shape[0] != len(self.vocab):
            raise ShapeError(f"embedding table has {self.table.shape[0]} rows for {len(self.vocab)} words")


def encode_instruction(enc: InstructionEncoder, text: str) -> TokenSeq:
    ids = enc.vocab.ids(text)
    return TokenSeq(np.asarray(enc.table)[ids], np.zeros((len(ids), 2), dtype=np.int64), role="text")


# ---------------------------------------------------------------- netpbm


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img):
    """Binary P6, maxval 255; ``img`` is ``[H, W, 3]`` in [0, 1]."""
    arr = to_uint8(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"PPM needs an H x W x 3 image, got {arr.shape}")
    h, w, _ = arr.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def write_pgm(path, mask):
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"PGM needs an H x W array, got {arr.shape}")
    h, w = arr.shape
    data = np.where(arr > 0.5, 255, 0).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header", start)
        fields.append(buf[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, got {fields[0]!r}", 0)
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: non-integer header field", 0) from None
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}", 0)
    n = w * h * channels
    if len(buf) - pos != n:
        raise FormatError(f"{path}: expected {n} data bytes, found {len(buf) - pos}", pos)
    shape = (h, w, channels) if channels > 1 else (h, w)
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).reshape(shape)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    return (_read_netpbm(path, b"P5", 1) > 127).astype(np.float64)
