"""Instruction-guided image editing with a small diffusion transformer.

Source-image tokens condition a flow-matching velocity model through joint
attention, sharing rotary positions with the latent tokens; a general editor
is trained first and a low-rank adapter then learns one editing style.
"""

from .errors import (
    CompatibilityError,
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    PECloningError,
    PhotoDoodleError,
)
from .estimator import EditLoRA, OmniEditor
from .model import ModelConfig, ModelParams, forward_velocity, init_params, load_checkpoint, save_checkpoint
from .pipeline import ExperimentConfig, TrainConfig, ablate, edit_image, evaluate, run_pipeline, train_stage

__version__ = "0.1.0"
