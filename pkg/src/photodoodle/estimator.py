"""scikit-learn style front end: ``fit`` on image pairs, ``predict`` edited images.

``X`` is a batch of source images ``[n, H, W, 3]`` in ``[0, 1]``, ``y`` the
matching targets, and ``instructions`` one string per image.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import Corpus, default_vocab
from .errors import ConfigError, ShapeError
from .flow import SamplerConfig
from .lora import LoraAdapter
from .model import ModelConfig, ModelParams, load_checkpoint
from .pipeline import TrainConfig, edit_array, train_stage


def check_image_batch(X, name="X", channels=3):
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1, input_name=name)
    if X.ndim != 4 or X.shape[-1] != channels:
        raise ShapeError(f"{name} must be [n, H, W, {channels}], got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ConfigError(f"{name} pixel values must lie in [0, 1]")
    return X


def check_instructions(instructions, n):
    if isinstance(instructions, str):
        instructions = [instructions] * n
    instructions = [str(s) for s in instructions]
    if len(instructions) != n:
        raise ShapeError(f"got {len(instructions)} instructions for {n} images")
    return instructions


def check_pairs(X, y, instructions):
    X = check_image_batch(X)
    y = check_image_batch(y, "y")
    if X.shape != y.shape:
        raise ShapeError(f"X {X.shape} and y {y.shape} differ")
    return X, y, check_instructions(instructions, len(X))


@dataclass
class _Pair:
    src: np.ndarray
    tgt: np.ndarray
    instruction: str


def _corpus(X, y, instructions, kind):
    return Corpus([_Pair(s, t, i) for s, t, i in zip(X, y, instructions)], default_vocab(), kind)


class _EditorMixin:
    def _predict(self, params, adapter, X, instructions):
        X = check_image_batch(X)
        instructions = check_instructions(instructions, len(X))
        out = [
            edit_array(params, adapter, x, text, SamplerConfig(self.sampler_steps, self.seed + i))
            for i, (x, text) in enumerate(zip(X, instructions))
        ]
        return np.stack(out)

    def score(self, X, y, instructions):
        """Negative mean squared pixel error of the edits against ``y``."""
        y = check_image_batch(y, "y")
        return -float(np.mean((self.predict(X, instructions) - y) ** 2))


class OmniEditor(_EditorMixin, BaseEstimator):
    """General editor: trains base weights plus a high-rank adapter, then merges."""

    def __init__(
        self, d=64, heads=4, depth=2, patch=4, steps=5000, batch_size=8, rank=16,
        learning_rate=1e-4, sampler_steps=20, pe_clone=True, seed=0,
    ):
        self.d = d
        self.heads = heads
        self.depth = depth
        self.patch = patch
        self.steps = steps
        self.batch_size = batch_size
        self.rank = rank
        self.learning_rate = learning_rate
        self.sampler_steps = sampler_steps
        self.pe_clone = pe_clone
        self.seed = seed

    def fit(self, X, y, instructions):
        X, y, instructions = check_pairs(X, y, instructions)
        model = ModelConfig(d=self.d, heads=self.heads, depth=self.depth, patch=self.patch, pe_clone=self.pe_clone)
        cfg = TrainConfig("omni", self.steps, self.batch_size, self.learning_rate, self.rank, seed=self.seed)
        res = train_stage(cfg, _corpus(X, y, instructions, "general"), model_config=model)
        self.params_ = res.params
        self.losses_ = np.array(res.losses)
        return self

    def predict(self, X, instructions):
        check_is_fitted(self, "params_")
        return self._predict(self.params_, None, X, instructions)


class EditLoRA(_EditorMixin, BaseEstimator):
    """Low-rank style adapter trained on a frozen base.

    ``base`` is a fitted :class:`OmniEditor`, a :class:`ModelParams`, or a
    checkpoint path.
    """

    def __init__(
        self, base=None, steps=2000, batch_size=2, rank=4, alpha=None, learning_rate=1e-4,
        sampler_steps=20, allow_unmerged_base=False, seed=0,
    ):
        self.base = base
        self.steps = steps
        self.batch_size = batch_size
        self.rank = rank
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.sampler_steps = sampler_steps
        self.allow_unmerged_base = allow_unmerged_base
        self.seed = seed

    def _base_params(self) -> ModelParams:
        base = self.base
        if isinstance(base, OmniEditor):
            check_is_fitted(base, "params_")
            return base.params_
        if isinstance(base, ModelParams):
            return base
        if isinstance(base, (str, Path)):
            return load_checkpoint(base)
        raise ConfigError("EditLoRA needs a base: fitted OmniEditor, ModelParams or checkpoint path")

    def fit(self, X, y, instructions):
        X, y, instructions = check_pairs(X, y, instructions)
        cfg = TrainConfig(
            "edit", self.steps, self.batch_size, self.learning_rate, self.rank, self.alpha,
            seed=self.seed, allow_unmerged_base=self.allow_unmerged_base,
        )
        res = train_stage(cfg, _corpus(X, y, instructions, "style"), base=self._base_params())
        self.base_params_ = res.params
        self.adapter_: LoraAdapter = res.adapter
        self.losses_ = np.array(res.losses)
        return self

    def predict(self, X, instructions):
        check_is_fitted(self, "adapter_")
        return self._predict(self.base_params_, self.adapter_, X, instructions)
