"""Generator domain adaptation from one reference image or a text prompt."""

from difa.core import AdaptConfig, Checkpoint, LayerRange, load_checkpoint, save_checkpoint
from difa.losses import (
    attentive_style_loss,
    combine_losses,
    global_direction_loss,
    lambda_scc_schedule,
    scc_loss,
)
from difa.latentstats import LatentQueue, build_mask, compute_delta_w, layers_for_ranges
from difa.trainer import AdaptSession, apply_edit, run, train_step

__all__ = [
    "AdaptConfig", "AdaptSession", "Checkpoint", "LatentQueue", "LayerRange", "apply_edit",
    "attentive_style_loss", "build_mask", "combine_losses", "compute_delta_w", "global_direction_loss",
    "lambda_scc_schedule", "layers_for_ranges", "load_checkpoint", "run", "save_checkpoint",
    "scc_loss", "train_step",
]
