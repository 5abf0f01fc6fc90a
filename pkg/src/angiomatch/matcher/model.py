"""Full matcher forward pass, loss and gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..descriptors import DescriptorSet, positional_embedding
from .layers import (
    assignment,
    cross_attention_update,
    guidance_mask,
    guidance_similarity,
    log_assignment,
    matchability_logits,
    select_matches,
    self_attention_update,
    similarity_matrix,
)
from .params import MatcherParams

__all__ = [
    "AssignmentResult",
    "PairSample",
    "LOG_FLOOR",
    "guidance_masks",
    "forward_tensors",
    "forward",
    "nll_loss",
    "nll_loss_tensor",
    "loss_and_grads",
    "unmatched_indices",
]

LOG_FLOOR = 1e-30


@dataclass
class AssignmentResult:
    S: np.ndarray
    sigmaA: np.ndarray
    sigmaB: np.ndarray
    P: np.ndarray
    matches: np.ndarray  # (n, 3): i, j, P_ij
    tau: float

    def pairs(self) -> np.ndarray:
        return self.matches[:, :2].astype(np.int64)


@dataclass
class PairSample:
    """Descriptors of two views and the ground-truth index pairs linking them."""

    descA: DescriptorSet
    descB: DescriptorSet
    gt_matches: np.ndarray

    def __post_init__(self):
        gt = np.asarray(self.gt_matches, dtype=np.int64).reshape(-1, 2)
        if len(gt) and (gt[:, 0].max() >= len(self.descA) or gt[:, 1].max() >= len(self.descB) or gt.min() < 0):
            raise ValueError("ground-truth index out of range")
        self.gt_matches = gt


def unmatched_indices(gt_matches, M: int, N: int):
    """Indices of A and B points without a ground-truth partner."""
    gt = np.asarray(gt_matches, dtype=np.int64).reshape(-1, 2)
    a = np.ones(M, bool)
    b = np.ones(N, bool)
    a[gt[:, 0]] = False
    b[gt[:, 1]] = False
    return np.flatnonzero(a), np.flatnonzero(b)


def guidance_masks(descA: DescriptorSet, descB: DescriptorSet, k_percent: float):
    """Masks for A attending to B and for B attending to A, plus the similarity ``G``."""
    G = guidance_similarity(descA.global_, descB.global_)
    return guidance_mask(G, k_percent), guidance_mask(G.T, k_percent), G


def forward_tensors(values: dict, descA: DescriptorSet, descB: DescriptorSet, num_blocks: int, masks=None, masking="multiply"):
    """Run the network on one pair and return ``(S, zA, zB)``.

    ``values`` maps parameter names to arrays or tensors; the computation
    dtype follows the lift weights. ``masks`` is ``(mask_AB, mask_BA)`` or None.
    """
    lift = ad.as_tensor(values["lift.W"])
    dtype = lift.data.dtype
    pos = MatcherParams.group(values, "pos")

    def embed(desc):
        x = ad.matmul(ad.Tensor(np.asarray(desc.local, dtype=dtype)), values["lift.W"]) + values["lift.b"]
        p = positional_embedding(desc.keypoints, desc.image_size, {k: ad.as_tensor(v) for k, v in pos.items()})
        return x, p

    xA, pA = embed(descA)
    xB, pB = embed(descB)
    mAB, mBA = masks if masks is not None else (None, None)
    for l in range(num_blocks):
        sp = MatcherParams.block(values, l, "self")
        xA = self_attention_update(xA, pA, sp)
        xB = self_attention_update(xB, pB, sp)
        cp = MatcherParams.block(values, l, "cross")
        xA, xB = (
            cross_attention_update(xA, xB, cp, mAB, masking),
            cross_attention_update(xB, xA, cp, mBA, masking),
        )
    S = similarity_matrix(xA, xB, MatcherParams.group(values, "head"))
    mh = MatcherParams.group(values, "match")
    return S, matchability_logits(xA, mh), matchability_logits(xB, mh)


def forward(
    params: MatcherParams,
    descA: DescriptorSet,
    descB: DescriptorSet,
    guidance: bool = True,
    k_percent: float = 20.0,
    masking: str = "multiply",
    tau: float = 0.1,
) -> AssignmentResult:
    """Inference. Runs in the dtype of ``params`` (cast with :meth:`MatcherParams.astype`)."""
    if len(descA) == 0 or len(descB) == 0:
        M, N = len(descA), len(descB)
        return AssignmentResult(np.zeros((M, N)), np.zeros(M), np.zeros(N), np.zeros((M, N)), np.zeros((0, 3)), tau)
    masks = guidance_masks(descA, descB, k_percent)[:2] if guidance else None
    with ad.no_grad():
        S, zA, zB = forward_tensors(params.tensors, descA, descB, params.num_blocks, masks, masking)
        sA = ad.sigmoid(zA).data
        sB = ad.sigmoid(zB).data
    P = assignment(S.data, sA, sB)
    return AssignmentResult(S.data, sA, sB, P, select_matches(P, tau), tau)


def nll_loss(P, sigmaA, sigmaB, gt_matches, unmatchedA, unmatchedB) -> float:
    """Mean ``-log P`` over ground-truth pairs plus mean ``-log(1 - sigma)`` over unmatched points.

    ``unmatchedA``/``unmatchedB`` are index arrays. Each log argument is
    clamped at ``1e-30``; an empty group contributes zero.
    """
    P = np.asarray(P, dtype=float)
    gt = np.asarray(gt_matches, dtype=np.int64).reshape(-1, 2)
    loss = 0.0
    if len(gt):
        loss += float(np.mean(-np.log(np.maximum(P[gt[:, 0], gt[:, 1]], LOG_FLOOR))))
    s = np.concatenate([np.asarray(sigmaA, float)[np.asarray(unmatchedA, np.int64)], np.asarray(sigmaB, float)[np.asarray(unmatchedB, np.int64)]])
    if len(s):
        loss += float(np.mean(-np.log(np.maximum(1.0 - s, LOG_FLOOR))))
    return loss


def nll_loss_tensor(S, zA, zB, gt_matches, unmatchedA, unmatchedB):
    """Differentiable log-space form of :func:`nll_loss` from ``S`` and matchability logits."""
    gt = np.asarray(gt_matches, dtype=np.int64).reshape(-1, 2)
    floor = math.log(LOG_FLOOR)
    total = None
    if len(gt):
        logP = log_assignment(S, zA, zB)
        picked = ad.clamp_min(ad.gather_pairs(logP, gt[:, 0], gt[:, 1]), floor)
        total = -picked.mean()
    ua = np.asarray(unmatchedA, np.int64)
    ub = np.asarray(unmatchedB, np.int64)
    if len(ua) + len(ub):
        # log(1 - sigmoid(z)) = log_sigmoid(-z)
        neg = ad.concat([ad.gather_rows(-zA, ua), ad.gather_rows(-zB, ub)], axis=0)
        term = -ad.clamp_min(ad.log_sigmoid(neg), floor).mean()
        total = term if total is None else total + term
    if total is None:
        total = ad.Tensor(np.zeros((), dtype=ad.as_tensor(S).data.dtype))
    return total


def loss_and_grads(params: MatcherParams, sample: PairSample, guidance: bool = True, k_percent: float = 20.0, masking: str = "multiply"):
    """Loss of one pair and the gradient of every parameter (treating guidance masks as data)."""
    values = params.as_tensors(requires_grad=True)
    masks = guidance_masks(sample.descA, sample.descB, k_percent)[:2] if guidance else None
    S, zA, zB = forward_tensors(values, sample.descA, sample.descB, params.num_blocks, masks, masking)
    ua, ub = unmatched_indices(sample.gt_matches, len(sample.descA), len(sample.descB))
    loss = nll_loss_tensor(S, zA, zB, sample.gt_matches, ua, ub)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in values.items()}
    return float(loss.data), grads
