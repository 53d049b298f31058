"""Rectified-flow objective and the fixed-grid Euler sampler.

Path: ``z_t = (1 - t) x + t eps`` with constant velocity ``eps - x``; sampling
integrates from pure noise at ``t = 1`` down to ``t = 0``. The image-condition
tokens are never noised.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import numeric as nm
from .errors import ConfigError, ContractError, InvariantError, ShapeError
from .model import ModelParams, Weights, forward_velocity
from .positional import TokenSeq, offset_positions


def _check_t(t):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or not np.all(np.isfinite(t_arr)):
        raise ContractError(f"t must lie in [0, 1], got {t}")
    return t_arr


def _bcast_t(t_arr, x):
    # per-sample t [B] against x [B, ...]
    if t_arr.ndim == 0:
        return t_arr.astype(x.dtype)
    return t_arr.reshape(t_arr.shape + (1,) * (x.ndim - t_arr.ndim)).astype(x.dtype)


def interpolate(x, eps, t):
    x, eps = np.asarray(x), np.asarray(eps)
    if x.shape != eps.shape:
        raise ShapeError(f"x {x.shape} and eps {eps.shape} differ")
    t_arr = _check_t(t)
    if t_arr.ndim == 0:
        # endpoints are returned exactly
        if t_arr == 0.0:
            return x.copy()
        if t_arr == 1.0:
            return eps.copy()
    tb = _bcast_t(t_arr, x)
    return (1 - tb) * x + tb * eps


def target_velocity(x, eps):
    x, eps = np.asarray(x), np.asarray(eps)
    if x.shape != eps.shape:
        raise ShapeError(f"x {x.shape} and eps {eps.shape} differ")
    return eps - x


@dataclass
class FlowBatch:
    """One training batch. ``x``/``c_I``/``eps`` are ``[B, N, T]``; ``text`` holds word ids ``[B, M]``."""

    x: np.ndarray
    c_I: np.ndarray
    text: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    cond_positions: np.ndarray

    def __post_init__(self):
        if self.x.shape != self.c_I.shape or self.x.shape != self.eps.shape:
            raise ShapeError(f"x {self.x.shape}, c_I {self.c_I.shape}, eps {self.eps.shape} must agree")
        if self.t.shape != (self.x.shape[0],):
            raise ShapeError(f"need one timestep per sample, got t {self.t.shape}")
        _check_t(self.t)


def sample_timesteps(rng, n, schedule="uniform"):
    if schedule == "uniform":
        return rng.random(n)
    if schedule == "logit_normal":
        return 1.0 / (1.0 + np.exp(-rng.standard_normal(n)))
    raise ConfigError(f"unknown timestep schedule {schedule!r}")


def latent_positions(cond_positions, pe_clone=True):
    return np.array(cond_positions) if pe_clone else offset_positions(cond_positions)


def _as_velocity_fn(model, adapter=None):
    if isinstance(model, (ModelParams, Weights)):
        return lambda z, t, c_I, c_T: forward_velocity(model, z, t, c_I, c_T, adapter=adapter)
    if callable(model):
        return model
    raise ConfigError(f"model must be ModelParams, Weights, or a callable, got {type(model).__name__}")


def _pe_clone(model):
    if isinstance(model, (ModelParams, Weights)):
        return model.config.pe_clone
    return getattr(model, "pe_clone", True)


def cfm_loss(model, batch: FlowBatch, adapter=None):
    """Mean squared error between predicted and target velocity over latent tokens.

    ``model`` may be a plain callable ``(z, t, c_I, c_T) -> velocity`` for tests.
    """
    fn = _as_velocity_fn(model, adapter)
    z = interpolate(batch.x, batch.eps, batch.t)
    u = target_velocity(batch.x, batch.eps)
    zpos = latent_positions(batch.cond_positions, _pe_clone(model))
    zseq = TokenSeq(z, zpos, "latent")
    cseq = TokenSeq(batch.c_I, batch.cond_positions, "image")
    v = fn(zseq, batch.t, cseq, batch.text)
    return nm.mse(v, nm.as_tensor(u.astype(np.asarray(getattr(v, "data", v)).dtype)))


@dataclass
class SamplerConfig:
    steps: int = 20
    seed: int = 0
    record_trajectory: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"sampler needs at least one step, got {self.steps}")

    def timesteps(self):
        return 1.0 - np.arange(self.steps + 1) / self.steps


def initial_noise(shape, seed, dtype=np.float32):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


def _checksum(arr):
    return hashlib.blake2b(np.ascontiguousarray(arr).tobytes(), digest_size=16).hexdigest()


@dataclass
class SampleResult:
    latent: TokenSeq
    trajectory: list
    cond_checksums: list


def euler_sample(model, c_I: TokenSeq, c_T, cfg: SamplerConfig, adapter=None, return_details=False):
    """Integrate the learned velocity from seeded noise at t=1 to t=0.

    The latent starts with positions cloned from ``c_I`` (or offset away from
    them when the model was configured without cloning). ``c_I`` is checked
    to be bit-identical before and after every step.
    """
    fn = _as_velocity_fn(model, adapter)
    cond = np.asarray(c_I.tokens.data if isinstance(c_I.tokens, nm.Tensor) else c_I.tokens)
    frozen = cond.copy()
    frozen.flags.writeable = False
    cseq = TokenSeq(frozen, c_I.positions, "image")
    ref = _checksum(frozen)
    z = initial_noise(frozen.shape, cfg.seed, frozen.dtype)
    zpos = latent_positions(c_I.positions, _pe_clone(model))
    ts = cfg.timesteps()
    dt = 1.0 / cfg.steps
    trajectory = [z.copy()] if cfg.record_trajectory else []
    sums = [ref]
    for k in range(cfg.steps):
        v = fn(TokenSeq(z, zpos, "latent"), float(ts[k]), cseq, c_T)
        v = np.asarray(getattr(v, "data", v))
        z = (z - dt * v).astype(frozen.dtype)
        now = _checksum(cseq.tokens)
        sums.append(now)
        if now != ref:
            raise InvariantError(f"condition tokens changed during sampler step {k}")
        if cfg.record_trajectory:
            trajectory.append(z.copy())
    out = TokenSeq(z, zpos, "latent")
    if return_details:
        return SampleResult(out, trajectory, sums)
    return out
