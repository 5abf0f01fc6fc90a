"""Attention matcher with guidance-masked cross attention."""

from .layers import (
    MASKING_MODES,
    assignment,
    cross_attention_update,
    guidance_mask,
    guidance_similarity,
    log_assignment,
    matchability,
    select_matches,
    self_attention_update,
    similarity_matrix,
)
from .model import AssignmentResult, PairSample, forward, guidance_masks, loss_and_grads, nll_loss, unmatched_indices
from .params import MatcherParams, load_weights, save_weights
from .training import SGD, Adam, GuidedMatcher, TrainConfig, TrainResult, log_to_csv, train, validation_auc

__all__ = [
    "MASKING_MODES",
    "assignment",
    "cross_attention_update",
    "guidance_mask",
    "guidance_similarity",
    "log_assignment",
    "matchability",
    "select_matches",
    "self_attention_update",
    "similarity_matrix",
    "AssignmentResult",
    "PairSample",
    "forward",
    "guidance_masks",
    "loss_and_grads",
    "nll_loss",
    "unmatched_indices",
    "MatcherParams",
    "load_weights",
    "save_weights",
    "Adam",
    "GuidedMatcher",
    "SGD",
    "TrainConfig",
    "TrainResult",
    "train",
    "log_to_csv",
    "validation_auc",
]
