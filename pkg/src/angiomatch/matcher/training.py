"""Training loop, optimizers and the estimator wrapper."""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .._seeding import derive_int, derive_rng
from ..exceptions import ConfigError, FormatError
from ..metrics import match_auc, match_errors
from .layers import MASKING_MODES
from .model import AssignmentResult, PairSample, forward, loss_and_grads
from .params import MatcherParams, load_weights, save_weights

__all__ = [
    "TrainConfig",
    "Adam",
    "SGD",
    "TrainResult",
    "subsample_pair",
    "train",
    "validation_auc",
    "GuidedMatcher",
    "log_to_csv",
]


@dataclass
class TrainConfig:
    num_blocks: int = 3
    dim: int = 64
    local_dim: int = 32
    lr: float = 1e-4
    epochs: int = 5
    batch_size: int = 4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_keypoints: int = 256
    guidance: bool = True
    k_percent: float = 20.0
    masking: str = "multiply"
    tau: float = 0.1
    max_steps: int = 0  # 0 means no cap

    def validate(self) -> "TrainConfig":
        checks = [
            (self.num_blocks >= 0, "num_blocks must be >= 0"),
            (self.dim >= 1, "dim must be >= 1"),
            (self.local_dim >= 1, "local_dim must be >= 1"),
            (self.lr > 0 and math.isfinite(self.lr), "lr must be a positive finite number"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.optimizer in ("adam", "sgd"), "optimizer must be 'adam' or 'sgd'"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas must lie in [0, 1)"),
            (self.eps > 0, "eps must be positive"),
            (self.max_keypoints >= 2, "max_keypoints must be >= 2"),
            (0 < self.k_percent <= 100, "k_percent must lie in (0, 100]"),
            (self.masking in MASKING_MODES, f"masking must be one of {MASKING_MODES}"),
            (0 <= self.tau < 1, "tau must lie in [0, 1)"),
            (self.max_steps >= 0, "max_steps must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


class Adam:
    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in sorted(grads):
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        out = {"t": np.array(self.t)}
        for k in self.m:
            out["m/" + k] = self.m[k]
            out["v/" + k] = self.v[k]
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v/")}


class SGD:
    def __init__(self, lr=1e-4):
        self.lr = lr
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for k in sorted(grads):
            params[k] -= self.lr * grads[k]

    def state(self) -> dict:
        return {"t": np.array(self.t)}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])


@dataclass
class TrainResult:
    params: MatcherParams
    log: list  # dicts with epoch, loss, val_match_auc
    steps: int


def subsample_pair(sample: PairSample, cap: int, rng) -> PairSample:
    """Limit both sides to ``cap`` keypoints, keeping partners of kept A points where possible."""
    M, N = len(sample.descA), len(sample.descB)
    if M <= cap and N <= cap:
        return sample
    selA = np.sort(rng.choice(M, size=min(M, cap), replace=False))
    partner = dict(zip(sample.gt_matches[:, 0].tolist(), sample.gt_matches[:, 1].tolist()))
    wanted = np.array([partner[i] for i in selA.tolist() if i in partner], dtype=np.int64)
    nb = min(N, cap)
    if len(wanted) >= nb:
        selB = np.sort(rng.choice(wanted, size=nb, replace=False))
    else:
        rest = np.setdiff1d(np.arange(N), wanted)
        extra = rng.choice(rest, size=nb - len(wanted), replace=False)
        selB = np.sort(np.concatenate([wanted, extra]))
    mapA = -np.ones(M, np.int64)
    mapA[selA] = np.arange(len(selA))
    mapB = -np.ones(N, np.int64)
    mapB[selB] = np.arange(len(selB))
    g = sample.gt_matches
    g = np.stack([mapA[g[:, 0]], mapB[g[:, 1]]], axis=1) if len(g) else g
    g = g[(g[:, 0] >= 0) & (g[:, 1] >= 0)] if len(g) else g
    return PairSample(sample.descA.subset(selA), sample.descB.subset(selB), g)


def validation_auc(params: MatcherParams, samples, config: TrainConfig, threshold: float = 3.0) -> float:
    """Pooled match AUC over ``samples`` at ``threshold`` px."""
    errs = []
    for s in samples:
        r = forward(params, s.descA, s.descB, config.guidance, config.k_percent, config.masking, config.tau)
        errs.append(match_errors(r.matches, s.gt_matches, s.descB.keypoints))
    e = np.concatenate(errs) if errs else np.zeros(0)
    return match_auc(e, threshold) if e.size else 0.0


def _make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return SGD(cfg.lr)


def _save_checkpoint(path, params, opt, epoch, step, log, rng, cfg):
    state = {"p/" + k: v for k, v in params.tensors.items()}
    state.update({"o/" + k: v for k, v in opt.state().items()})
    meta = {
        "epoch": epoch,
        "step": step,
        "log": log,
        "rng": rng.bit_generator.state,
        "config": asdict(cfg),
        "shape": [params.num_blocks, params.dim, params.local_dim],
    }
    state["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **state)
    os.replace(tmp, path)


def _load_checkpoint(path):
    try:
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode("utf-8"))
            params = {k[2:]: z[k].copy() for k in z.files if k.startswith("p/")}
            opt = {k[2:]: z[k].copy() for k in z.files if k.startswith("o/")}
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"unreadable checkpoint: {exc}", path) from exc
    return meta, params, opt


def train(samples, config: TrainConfig | None = None, seed: int = 0, params: MatcherParams | None = None,
          val_samples=None, checkpoint_path=None, resume: bool = False, on_step=None) -> TrainResult:
    """Mini-batch training on the assignment NLL.

    Each step averages gradients over ``batch_size`` pairs (fixed order) and
    applies one optimizer update. Pair order and keypoint subsampling come
    from a generator seeded by ``seed``, so identical inputs give identical
    weights. A checkpoint is written after every epoch when
    ``checkpoint_path`` is set; ``resume`` continues from it.
    ``on_step(step, loss)`` observes per-step losses.
    """
    cfg = (config or TrainConfig()).validate()
    samples = list(samples)
    if not samples:
        raise ConfigError("training set is empty")
    rng = derive_rng(seed, "train")
    if params is None:
        params = MatcherParams.init(cfg.num_blocks, cfg.dim, cfg.local_dim, seed=derive_int(seed, "init"))
    else:
        params = params.copy()
    opt = _make_optimizer(cfg)
    log: list = []
    start_epoch, step = 0, 0
    if resume and checkpoint_path is not None and os.path.exists(checkpoint_path):
        meta, ptensors, ostate = _load_checkpoint(checkpoint_path)
        nb, d, ld = meta["shape"]
        params = MatcherParams(nb, d, ld, ptensors)
        params.validate()
        opt.load_state(ostate)
        rng.bit_generator.state = meta["rng"]
        start_epoch, step, log = meta["epoch"], meta["step"], meta["log"]

    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            if cfg.max_steps and step >= cfg.max_steps:
                break
            batch = order[b0 : b0 + cfg.batch_size]
            acc = None
            bl = 0.0
            for k in batch:
                s = subsample_pair(samples[k], cfg.max_keypoints, rng)
                loss, grads = loss_and_grads(params, s, cfg.guidance, cfg.k_percent, cfg.masking)
                bl += loss
                if acc is None:
                    acc = grads
                else:
                    for name in acc:
                        acc[name] += grads[name]
            for name in acc:
                acc[name] /= len(batch)
            opt.step(params.tensors, acc)
            step += 1
            losses.append(bl / len(batch))
            if on_step is not None:
                on_step(step, losses[-1])
        val = validation_auc(params, val_samples, cfg) if val_samples else float("nan")
        log.append({"epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else float("nan"), "val_match_auc": val})
        if checkpoint_path is not None:
            _save_checkpoint(checkpoint_path, params, opt, epoch + 1, step, log, rng, cfg)
        if cfg.max_steps and step >= cfg.max_steps:
            break
    return TrainResult(params, log, step)


def log_to_csv(log) -> str:
    buf = io.StringIO()
    buf.write("epoch,loss,val_match_auc\n")
    for row in log:
        buf.write(f"{row['epoch']},{row['loss']:.8f},{row['val_match_auc']:.6f}\n")
    return buf.getvalue()


class GuidedMatcher(BaseEstimator):
    """Attention matcher with optional global-similarity guidance.

    ``fit(X)`` trains on a list of :class:`PairSample`; ``predict(X)`` maps a
    list of ``(descA, descB)`` to ``(n, 3)`` arrays of ``(i, j, P_ij)``.
    """

    def __init__(self, num_blocks=3, dim=64, guidance=True, k_percent=20.0, masking="multiply", tau=0.1,
                 lr=1e-4, epochs=5, batch_size=4, optimizer="adam", max_keypoints=256, max_steps=0,
                 seed=0, inference_dtype="float32"):
        self.num_blocks = num_blocks
        self.dim = dim
        self.guidance = guidance
        self.k_percent = k_percent
        self.masking = masking
        self.tau = tau
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.max_keypoints = max_keypoints
        self.max_steps = max_steps
        self.seed = seed
        self.inference_dtype = inference_dtype

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in names}).validate()

    def fit(self, X, y=None, X_val=None, checkpoint_path=None, resume=False):
        if self.inference_dtype not in ("float32", "float64"):
            raise ConfigError("inference_dtype must be 'float32' or 'float64'")
        res = train(X, self.train_config(), seed=self.seed, val_samples=X_val, checkpoint_path=checkpoint_path, resume=resume)
        self.params_ = res.params
        self.log_ = res.log
        self.n_steps_ = res.steps
        return self

    def _infer_params(self):
        check_is_fitted(self, "params_")
        dt = np.dtype(self.inference_dtype)
        cached = getattr(self, "_cast", None)
        if cached is None or cached[0] is not self.params_ or cached[1] != dt:
            self._cast = (self.params_, dt, self.params_.astype(dt))
        return self._cast[2]

    def match(self, descA, descB) -> AssignmentResult:
        return forward(self._infer_params(), descA, descB, self.guidance, self.k_percent, self.masking, self.tau)

    def predict(self, X):
        return [self.match(a, b).matches for a, b in X]

    def score(self, X, y=None) -> float:
        """Pooled match AUC at 3 px on a list of :class:`PairSample`."""
        check_is_fitted(self, "params_")
        return validation_auc(self._infer_params(), X, self.train_config())

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        meta = {k: v for k, v in self.get_params().items()}
        save_weights(path, self.params_, meta)

    @classmethod
    def load(cls, path, **overrides) -> "GuidedMatcher":
        params, meta = load_weights(path, with_metadata=True)
        kw = {}
        defaults = cls().get_params()
        for k, v in meta.items():
            if k not in defaults:
                continue
            d = defaults[k]
            try:
                kw[k] = (v == "True") if isinstance(d, bool) else type(d)(v)
            except ValueError as exc:
                raise FormatError(f"bad metadata value {k}={v}", path) from exc
        kw.update(overrides)
        kw["num_blocks"], kw["dim"] = params.num_blocks, params.dim
        est = cls(**kw)
        est.params_ = params
        est.log_ = []
        return est
