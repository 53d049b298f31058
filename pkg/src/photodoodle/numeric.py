"""Dense tensors with tape-based reverse-mode differentiation.

Arrays are numpy-backed. A :class:`Tape` records every operation whose inputs
depend on a trainable parameter registered on it; :func:`grad` replays the
record backwards. Tensors created without a tape are constants and never
record anything, so the same forward code serves training and inference.
"""

from __future__ import annotations

import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, FormatError, GradientCheckError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}


class Tensor:
    __slots__ = ("data", "tape", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, tape=None, requires_grad=False, name=None, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        # no-copy constructor for op outputs
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.tape = None
        t.requires_grad = False
        t.parents = ()
        t.backward_fn = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        kind = "param" if self.requires_grad and not self.parents else "tensor"
        return f"Tensor({kind}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered op record plus a name→parameter registry."""

    def __init__(self):
        self.records: list[Tensor] = []
        self.params: dict[str, Tensor] = {}

    def param(self, name, data, trainable=True, dtype=None):
        if name in self.params:
            raise ContractError(f"parameter {name!r} already registered on this tape")
        t = Tensor(data, tape=self, requires_grad=trainable, name=name, dtype=dtype)
        self.params[name] = t
        return t

    def __len__(self):
        return len(self.records)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return Tensor._wrap(np.array(arr))


def record(data, parents: Sequence[Tensor], backward: Callable):
    """Create an op output; ``backward(g)`` returns one gradient (or None) per parent.

    Public so that other modules can define fused primitives with hand-written
    backward passes.
    """
    out = Tensor._wrap(data)
    live = [p for p in parents if p.requires_grad]
    if not live:
        return out
    tape = live[0].tape
    for p in live[1:]:
        if p.tape is not tape:
            raise ContractError("operands belong to different tapes")
    out.tape = tape
    out.requires_grad = True
    out.parents = tuple(parents)
    out.backward_fn = backward
    tape.records.append(out)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_operands(a, b):
    a = as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    b = as_tensor(b, a.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from None
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _binary_operands(a, b)
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _binary_operands(a, b)
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _binary_operands(a, b)
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a):
    a = as_tensor(a)
    return record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def silu(a):
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return record(a.data * sig, (a,), lambda g: (g * sig * (1.0 + a.data * (1.0 - sig)),))


_GELU_C = math.sqrt(2.0 / math.pi)  # python float keeps f32 inputs in f32


def gelu(a):
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return record(0.5 * x * (1.0 + th), (a,), backward)


# ---------------------------------------------------------------- structural


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch mismatch: {a.shape} x {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return record(out, (a, b), backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Iterable[Tensor], axis=0):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, ts, backward)


def slice_axis(a, start, stop, axis=0):
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return record(np.ascontiguousarray(a.data[idx]), (a,), backward)


def split(a, sections, axis=-1):
    """Split into ``sections`` equal parts along ``axis``."""
    a = as_tensor(a)
    n = a.shape[axis]
    if n % sections:
        raise ShapeError(f"axis of length {n} does not split into {sections}")
    step = n // sections
    return [slice_axis(a, i * step, (i + 1) * step, axis=axis % a.ndim) for i in range(sections)]


def embedding(table, ids):
    """Row gather ``table[ids]``; gradient scatters back into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"token id out of range for table of {table.shape[0]} rows")

    def backward(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return record(table.data[ids], (table,), backward)


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax_rows(x):
    """Softmax over the last axis, max-subtracted."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax needs a non-empty last dimension, got shape {x.shape}")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record(s, (x,), backward)


def layer_norm(x, gamma=None, beta=None, eps=1e-6):
    """Normalize the last axis; optional per-feature affine ``gamma``/``beta``."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"layer_norm needs a non-empty last dimension, got shape {x.shape}")
    if eps < 0:
        raise ContractError(f"eps must be non-negative, got {eps}")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    # a constant row with eps=0 has no defined scale; map it to zero
    denom = np.sqrt(var + eps)
    rstd = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
    xhat = xc * rstd

    def backward_xhat(g):
        return (rstd / d) * (d * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True))

    normed = record(xhat, (x,), lambda g: (backward_xhat(g),))
    if gamma is not None:
        gamma = as_tensor(gamma, x.dtype)
        if gamma.shape != (d,):
            raise ShapeError(f"gamma shape {gamma.shape} does not match feature dim {d}")
        normed = mul(normed, gamma)
    if beta is not None:
        beta = as_tensor(beta, x.dtype)
        if beta.shape != (d,):
            raise ShapeError(f"beta shape {beta.shape} does not match feature dim {d}")
        normed = add(normed, beta)
    return normed


def mse(pred, target):
    return mean(square(sub(pred, target)))


# ---------------------------------------------------------------- gradients


def grad(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """dloss/dparam for every parameter registered on ``tape``.

    Frozen and unused parameters receive exact zeros.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.ndim > 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"loss must be a scalar tensor, got shape {shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        if loss.tape is not tape:
            raise ContractError("loss was not produced on this tape")
        grads[id(loss)] = np.ones(loss.shape, dtype=loss.dtype)
        for node in reversed(tape.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = {}
    for name, p in tape.params.items():
        g = grads.get(id(p)) if p.requires_grad else None
        out[name] = np.zeros(p.shape, dtype=p.dtype) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h=1e-6) -> float:
    """Max relative error between tape gradient and central differences of ``f`` at ``x``.

    ``f`` maps a tensor to a scalar tensor. Error per coordinate is
    ``|a - cd| / (|a| + |cd| + 1e-12)``.
    """
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    p = tape.param("x", x, dtype=np.float64)
    loss = f(p)
    analytic = grad(tape, loss)["x"]
    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fp = float(f(as_tensor(xp)).data)
        fm = float(f(as_tensor(xm)).data)
        if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(analytic.flat[i])):
            raise GradientCheckError(f"non-finite value at coordinate {i}", index=i)
        cd = (fp - fm) / (2.0 * h)
        a = analytic.flat[i]
        worst = max(worst, abs(a - cd) / (abs(a) + abs(cd) + 1e-12))
    return worst


# ---------------------------------------------------------------- serialization


def write_tensor(arr) -> bytes:
    """u32 rank, u32 dims, then little-endian f32 data."""
    arr = np.asarray(arr)
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def read_tensor(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    """Parse one tensor record at ``offset``; returns (array, next offset)."""
    start = offset
    if offset + 4 > len(buf):
        raise FormatError("truncated tensor header", start)
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if rank > 8:
        raise FormatError(f"implausible tensor rank {rank}", start)
    if offset + 4 * rank > len(buf):
        raise FormatError("truncated tensor dims", start)
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if offset + 4 * n > len(buf):
        raise FormatError("truncated tensor data", start)
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).astype(np.float32).reshape(dims)
    return arr, offset + 4 * n
