"""Matcher building blocks.

Functions accept numpy arrays or :class:`~angiomatch.autodiff.Tensor` and
return the same kind, so one implementation serves inference, training and
the formula tests. Feature rows are keypoints; linear maps are ``x @ W + b``.
"""

from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad
from ..exceptions import ZeroVector

__all__ = [
    "MASKING_MODES",
    "self_attention_update",
    "cross_attention_update",
    "guidance_similarity",
    "guidance_mask",
    "similarity_matrix",
    "matchability",
    "matchability_logits",
    "assignment",
    "log_assignment",
    "select_matches",
]

# "multiply": logits * mask, as in the masked attention formula as written.
# "exclude": masked logits set to -inf, i.e. conventional attention masking.
MASKING_MODES = ("multiply", "exclude")


def _wrap(*xs):
    tensor_in = any(isinstance(x, ad.Tensor) for x in xs)
    return tensor_in, [ad.as_tensor(x) if x is not None else None for x in xs]


def _out(t, tensor_in):
    return t if tensor_in else t.data


def _mlp(x, bp):
    h = ad.gelu(ad.matmul(x, bp["W1"]) + bp["b1"])
    return ad.matmul(h, bp["W2"]) + bp["b2"]


def self_attention_update(x, p, block_params):
    """Residual update of one image's features by attention over itself.

    Scores are ``(q_i + p_i) . (k_j + p_j) / sqrt(d)``; values carry no position.
    """
    tensor_in, (x, p) = _wrap(x, p)
    bp = {k: ad.as_tensor(v) for k, v in block_params.items()}
    d = x.shape[1]
    q = ad.matmul(x, bp["Wq"]) + p
    k = ad.matmul(x, bp["Wk"]) + p
    v = ad.matmul(x, bp["Wv"])
    a = ad.softmax(ad.matmul(q, k.T) * (1.0 / math.sqrt(d)), axis=1)
    m = ad.matmul(a, v)
    return _out(x + _mlp(ad.concat([x, m], axis=1), bp), tensor_in)


def cross_attention_update(xI, xS, block_params, mask=None, masking: str = "multiply"):
    """Residual update of ``xI`` by attention over the other image's ``xS``.

    ``mask`` (``|I| x |S|``, 0/1) is treated as data. In ``"multiply"`` mode
    the scaled logits are multiplied by it before the softmax, so masked
    entries sit at logit 0; ``"exclude"`` drops them from the softmax.
    """
    if masking not in MASKING_MODES:
        raise ValueError(f"masking must be one of {MASKING_MODES}")
    tensor_in, (xI, xS) = _wrap(xI, xS)
    bp = {k: ad.as_tensor(v) for k, v in block_params.items()}
    d = xI.shape[1]
    q = ad.matmul(xI, bp["Wq"])
    k = ad.matmul(xS, bp["Wk"])
    v = ad.matmul(xS, bp["Wv"])
    logits = ad.matmul(q, k.T) * (1.0 / math.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != logits.shape:
            raise ValueError(f"mask shape {mask.shape} does not match {logits.shape}")
        if masking == "multiply":
            logits = logits * mask.astype(logits.data.dtype)
        else:
            logits = ad.mask_fill(logits, mask.astype(bool), -np.inf)
    a = ad.softmax(logits, axis=1)
    m = ad.matmul(a, v)
    return _out(xI + _mlp(ad.concat([xI, m], axis=1), bp), tensor_in)


def guidance_similarity(gA, gB) -> np.ndarray:
    """Cosine similarity of global descriptors, clipped into ``[-1, 1]``."""
    gA = np.asarray(gA, dtype=float)
    gB = np.asarray(gB, dtype=float)
    na = np.linalg.norm(gA, axis=1)
    nb = np.linalg.norm(gB, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        side = "A" if np.any(na == 0) else "B"
        idx = int(np.flatnonzero((na if side == "A" else nb) == 0)[0])
        raise ZeroVector(f"global descriptor {idx} of image {side} is zero")
    G = (gA / na[:, None]) @ (gB / nb[:, None]).T
    return np.clip(G, -1.0, 1.0)


def guidance_mask(G, k_percent: float) -> np.ndarray:
    """Keep, per row, every entry at or above the ``ceil(k% * N)``-th largest value."""
    if not 0 < k_percent <= 100:
        raise ValueError("k_percent must lie in (0, 100]")
    G = np.asarray(G, dtype=float)
    N = G.shape[1]
    keep = min(max(int(math.ceil(k_percent / 100.0 * N - 1e-9)), 1), N)
    if keep == N:
        return np.ones(G.shape, dtype=np.uint8)
    thresh = -np.partition(-G, keep - 1, axis=1)[:, keep - 1 : keep]
    return (G >= thresh).astype(np.uint8)


def similarity_matrix(xA, xB, head_params):
    """``S_ij = f(xA_i) . f(xB_j)`` with the shared affine head ``f``."""
    tensor_in, (xA, xB) = _wrap(xA, xB)
    W, b = ad.as_tensor(head_params["W"]), ad.as_tensor(head_params["b"])
    fA = ad.matmul(xA, W) + b
    fB = ad.matmul(xB, W) + b
    return _out(ad.matmul(fA, fB.T), tensor_in)


def matchability_logits(x, head_params):
    tensor_in, (x,) = _wrap(x)
    w, b = ad.as_tensor(head_params["w"]), ad.as_tensor(head_params["b"])
    z = ad.matmul(x, w) + b
    return _out(z[:, 0], tensor_in)


def matchability(x, head_params):
    """Per-point probability that a partner exists in the other image."""
    z = matchability_logits(x, head_params)
    if isinstance(z, ad.Tensor):
        return ad.sigmoid(z)
    with ad.no_grad():
        return ad.sigmoid(ad.Tensor(z)).data


def assignment(S, sigmaA, sigmaB):
    """``P = sigmaA sigmaB^T * softmax over A (columns) * softmax over B (rows)``."""
    S = np.asarray(S)
    with ad.no_grad():
        col = ad.softmax(ad.Tensor(S), axis=0).data
        row = ad.softmax(ad.Tensor(S), axis=1).data
    return np.asarray(sigmaA)[:, None] * np.asarray(sigmaB)[None, :] * col * row


def log_assignment(S, zA, zB):
    """``log P`` from similarities and matchability logits, computed in log space."""
    tensor_in, (S, zA, zB) = _wrap(S, zA, zB)
    M, N = S.shape
    out = ad.log_softmax(S, axis=0) + ad.log_softmax(S, axis=1)
    out = out + ad.log_sigmoid(zA).reshape(M, 1) + ad.log_sigmoid(zB).reshape(1, N)
    return _out(out, tensor_in)


def select_matches(P, tau: float = 0.1) -> np.ndarray:
    """Cells above ``tau`` that are the strict maximum of their row and column.

    Returns an ``(n, 3)`` float array of ``(i, j, P_ij)`` sorted by ``i``.
    """
    P = np.asarray(P, dtype=float)
    if not 0 <= tau < 1:
        raise ValueError("tau must lie in [0, 1)")
    if P.size == 0:
        return np.zeros((0, 3))
    j = np.argmax(P, axis=1)
    rows = np.arange(P.shape[0])
    best = P[rows, j]
    row_unique = (P == best[:, None]).sum(axis=1) == 1
    col_best = P.max(axis=0)
    col_unique = (P == col_best[None, :]).sum(axis=0) == 1
    ok = row_unique & col_unique[j] & (best == col_best[j]) & (best > tau)
    i = rows[ok]
    return np.stack([i.astype(float), j[ok].astype(float), best[ok]], axis=1)
