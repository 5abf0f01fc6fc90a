"""Mask-conditioned image synthesis.

Two generators live here. The diffusion part is a small, exact implementation
of the forward noising process and the learned-variance reverse step, driven
by any object with a ``predict(x_t, t, mask) -> (eps_hat, v_hat)`` method.
No image denoiser is trained; the bundled predictors are analytic or oracle
models that make the sampling equations testable. The pipeline's production
renderer is :func:`procedural_render`, a deterministic angiogram look-alike.

Time steps are 1-based: ``t`` runs over ``1..T`` and ``alpha_bar(0) == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .exceptions import InvalidT

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "forward_sample",
    "reverse_mean",
    "reverse_variance",
    "reverse_step",
    "generate",
    "Denoiser",
    "IdentityDenoiser",
    "MaskTemplateDenoiser",
    "AnalyticGaussianDenoiser",
    "procedural_render",
    "schedule_to_csv",
    "BETA_TILDE_FLOOR",
]

BETA_TILDE_FLOOR = 1e-20


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step ``alpha`` (index ``t-1`` holds step ``t``) and its cumulative products."""

    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "custom"

    @classmethod
    def from_alphas(cls, alpha, kind: str = "custom") -> "NoiseSchedule":
        a = np.asarray(alpha, dtype=float)
        if a.ndim != 1 or len(a) < 1:
            raise InvalidT("schedule needs at least one step")
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("alpha must lie in (0, 1]")
        return cls(alpha=a, alpha_bar=np.cumprod(a), kind=kind)

    @property
    def T(self) -> int:
        return len(self.alpha)

    @property
    def beta(self) -> np.ndarray:
        return 1.0 - self.alpha

    def __len__(self):
        return self.T

    def _check(self, t):
        if not 1 <= int(t) <= self.T:
            raise InvalidT(f"t={t} outside 1..{self.T}")
        return int(t)

    def a(self, t) -> float:
        return float(self.alpha[self._check(t) - 1])

    def abar(self, t) -> float:
        """``alpha_bar`` at step ``t``; ``abar(0) == 1``."""
        if int(t) == 0:
            return 1.0
        return float(self.alpha_bar[self._check(t) - 1])

    def b(self, t) -> float:
        return 1.0 - self.a(t)

    def beta_tilde(self, t, floor: float = BETA_TILDE_FLOOR) -> float:
        """Posterior variance ``(1-abar_{t-1}) / (1-abar_t) * beta_t``, floored."""
        t = self._check(t)
        denom = 1.0 - self.abar(t)
        bt = (1.0 - self.abar(t - 1)) / denom * self.b(t) if denom > 0 else 0.0
        return max(bt, floor)


def build_schedule(T: int = 256, kind: str = "cosine", max_beta: float = 0.999) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise InvalidT(f"T must be an integer >= 2, got {T}")
    T = int(T)
    if kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        beta = np.minimum(1.0 - f[1:] / f[:-1], max_beta)
    elif kind == "linear":
        scale = 1000.0 / T
        beta = np.minimum(np.linspace(scale * 1e-4, scale * 0.02, T), max_beta)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule.from_alphas(1.0 - beta, kind=kind)


def schedule_to_csv(schedule: NoiseSchedule) -> str:
    lines = ["t,alpha,alpha_bar,beta"]
    for t in range(1, schedule.T + 1):
        lines.append(f"{t},{schedule.a(t)!r},{schedule.abar(t)!r},{schedule.b(t)!r}")
    return "\n".join(lines) + "\n"


def forward_sample(x0, t, schedule: NoiseSchedule, seed=None, return_noise: bool = False):
    """Draw ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    x0 = np.asarray(x0, dtype=float)
    ab = schedule.abar(schedule._check(t))
    eps = np.random.default_rng(seed).standard_normal(x0.shape)
    xt = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    return (xt, eps) if return_noise else xt


def reverse_mean(x_t, t, eps_hat, schedule: NoiseSchedule):
    """``(x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)``."""
    a = schedule.a(t)
    ab = schedule.abar(t)
    x_t = np.asarray(x_t, dtype=float)
    coef = (1.0 - a) / math.sqrt(1.0 - ab) if ab < 1.0 else 0.0
    return (x_t - coef * np.asarray(eps_hat, dtype=float)) / math.sqrt(a)


def reverse_variance(t, v_theta, schedule: NoiseSchedule, floor: float = BETA_TILDE_FLOOR):
    """Log-space interpolation ``exp(v log beta_t + (1 - v) log beta_tilde_t)``.

    Written as ``beta**v * beta_tilde**(1-v)`` so a zero floor stays finite at
    the endpoints.
    """
    v = np.asarray(v_theta, dtype=float)
    if np.any((v < 0) | (v > 1)):
        raise ValueError("v_theta must lie in [0, 1]")
    beta = schedule.b(t)
    bt = schedule.beta_tilde(t, floor=floor)
    return np.power(beta, v) * np.power(bt, 1.0 - v)


def reverse_step(x_t, t, denoiser, mask, schedule: NoiseSchedule, seed=None, floor: float = BETA_TILDE_FLOOR):
    """One ancestral step ``x_{t-1} ~ N(mu, sigma^2)``; ``t == 1`` returns the mean."""
    eps_hat, v_hat = denoiser.predict(x_t, t, mask)
    mu = reverse_mean(x_t, t, eps_hat, schedule)
    if int(t) == 1:
        return mu
    var = reverse_variance(t, np.clip(v_hat, 0.0, 1.0), schedule, floor=floor)
    z = np.random.default_rng(seed).standard_normal(np.shape(mu))
    return mu + np.sqrt(var) * z


def generate(mask, denoiser, schedule: NoiseSchedule, seed=None, shape=None, on_step=None):
    """Run the reverse chain ``T -> 1`` from Gaussian noise.

    ``shape`` defaults to the mask's shape; ``on_step(t)`` is called once per step.
    """
    rng = np.random.default_rng(seed)
    shape = np.shape(mask) if shape is None else shape
    x = rng.standard_normal(shape)
    for t in range(schedule.T, 0, -1):
        x = reverse_step(x, t, denoiser, mask, schedule, seed=rng)
        if on_step is not None:
            on_step(t)
    return x


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------


class Denoiser:
    """Interface: ``predict(x_t, t, mask) -> (eps_hat, v_hat)`` with ``v_hat`` in ``[0, 1]``."""

    def predict(self, x_t, t, mask):  # pragma: no cover - interface
        raise NotImplementedError


class IdentityDenoiser(Denoiser):
    """Toy predictor that returns ``x_t`` as the noise estimate."""

    def __init__(self, v: float = 0.5):
        self.v = v

    def predict(self, x_t, t, mask):
        x_t = np.asarray(x_t, dtype=float)
        return x_t.copy(), np.full(x_t.shape, self.v)


class MaskTemplateDenoiser(Denoiser):
    """Oracle whose clean image is a fixed template of the mask.

    The template is ``background`` off the vessels and ``vessel`` on them, in
    the model's ``[-1, 1]`` intensity range.
    """

    def __init__(self, schedule: NoiseSchedule, background: float = 0.4, vessel: float = -0.6, v: float = 0.0):
        self.schedule = schedule
        self.background = background
        self.vessel = vessel
        self.v = v

    def template(self, mask):
        m = np.asarray(mask, dtype=float)
        return self.background + (self.vessel - self.background) * m

    def predict(self, x_t, t, mask):
        ab = self.schedule.abar(t)
        x_t = np.asarray(x_t, dtype=float)
        eps = (x_t - math.sqrt(ab) * self.template(mask)) / math.sqrt(max(1.0 - ab, 1e-300))
        return eps, np.full(x_t.shape, self.v)


class AnalyticGaussianDenoiser(Denoiser):
    """Bayes-optimal predictor for i.i.d. ``N(mean, std**2)`` data.

    ``eps_hat = E[eps | x_t]`` and ``v_hat`` is chosen so the interpolated
    variance equals the true posterior variance of ``x_{t-1}`` given ``x_t``
    (clipped to ``[0, 1]``).
    """

    def __init__(self, schedule: NoiseSchedule, mean: float = 0.0, std: float = 1.0):
        self.schedule = schedule
        self.mean = float(mean)
        self.std = float(std)

    def posterior_variance(self, t) -> float:
        s2 = self.std**2
        ab, ab_prev, a = self.schedule.abar(t), self.schedule.abar(t - 1), self.schedule.a(t)
        v_prev = ab_prev * s2 + 1.0 - ab_prev
        v_t = ab * s2 + 1.0 - ab
        return v_prev - a * v_prev**2 / v_t

    def predict(self, x_t, t, mask):
        ab = self.schedule.abar(t)
        x_t = np.asarray(x_t, dtype=float)
        eps = math.sqrt(1.0 - ab) * (x_t - math.sqrt(ab) * self.mean) / (ab * self.std**2 + 1.0 - ab)
        beta, bt = self.schedule.b(t), self.schedule.beta_tilde(t)
        target = self.posterior_variance(t)
        if beta > bt and target > 0:
            v = (math.log(target) - math.log(bt)) / (math.log(beta) - math.log(bt))
        else:
            v = 1.0
        return eps, np.full(x_t.shape, min(max(v, 0.0), 1.0))


# ---------------------------------------------------------------------------
# procedural renderer
# ---------------------------------------------------------------------------


def _smooth_field(rng, shape, cells):
    """Zero-mean, unit-std random field with about ``cells`` features across."""
    H, W = shape
    coarse = rng.standard_normal((cells + 3, cells + 3))
    f = ndimage.zoom(coarse, ((H + 2) / cells, (W + 2) / cells), order=3, mode="nearest")
    f = f[1 : H + 1, 1 : W + 1]
    return (f - f.mean()) / (f.std() + 1e-12)


def _catheter_path(rng, start, away, shape, step=1.5):
    """A gently curving polyline from ``start`` heading roughly along ``away`` until it leaves the raster."""
    H, W = shape
    d = away / (np.linalg.norm(away) + 1e-12)
    p = np.asarray(start, float)
    pts = [p.copy()]
    turn = 0.0
    for _ in range(4 * (H + W)):
        turn = 0.98 * turn + 0.0015 * rng.standard_normal()
        c, s = math.cos(turn * step), math.sin(turn * step)
        d = np.array([c * d[0] - s * d[1], s * d[0] + c * d[1]])
        p = p + step * d
        pts.append(p.copy())
        if not (-10 <= p[0] <= W + 10 and -10 <= p[1] <= H + 10):
            break
    return np.array(pts)


def procedural_render(mask, radii_map=None, seed=0, inlet=None, attenuation: float = 0.11, catheter: bool = True):
    """Render an 8-bit angiogram-like image for a vessel mask.

    Vessel darkening follows the chord length through a tube of the local
    projected radius (``radii_map``, px), so thicker vessels are darker. A
    catheter enters at ``inlet`` (default: the widest vessel pixel) from the
    side away from the vessel mass.
    """
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    rng = np.random.default_rng(seed)

    yy, xx = np.mgrid[0:H, 0:W]
    gx, gy = rng.normal(0, 0.05, 2)
    bg = (
        0.62
        + rng.uniform(-0.05, 0.05)
        + 0.06 * _smooth_field(rng, (H, W), 3)
        + 0.025 * _smooth_field(rng, (H, W), 10)
        + gx * (xx / W - 0.5)
        + gy * (yy / H - 0.5)
    )

    atten = np.zeros((H, W))
    if mask.any():
        rmap = np.asarray(radii_map, float) if radii_map is not None else None
        dist = ndimage.distance_transform_edt(mask)
        r = rmap if rmap is not None else ndimage.grey_dilation(dist, size=(5, 5))
        r = np.maximum(r, dist)
        off = np.maximum(r - dist + 0.5, 0.0)
        chord = 2.0 * np.sqrt(np.maximum(r * r - off * off, 0.25))
        atten = np.where(mask, 1.0 - np.exp(-attenuation * chord), 0.0)

        if catheter:
            if inlet is None:
                src = rmap if rmap is not None else dist
                iy, ix = np.unravel_index(np.argmax(np.where(mask, src, -1)), mask.shape)
                inlet = np.array([ix, iy], float)
            ys, xs = np.nonzero(mask)
            away = np.asarray(inlet, float) - np.array([xs.mean(), ys.mean()])
            if np.linalg.norm(away) < 1e-6:
                away = rng.standard_normal(2)
            path = _catheter_path(rng, inlet, away + rng.normal(0, 0.2, 2) * np.linalg.norm(away), (H, W))
            cat = np.zeros((H, W), bool)
            ip = np.round(path).astype(int)
            keep = (ip[:, 0] >= 0) & (ip[:, 0] < W) & (ip[:, 1] >= 0) & (ip[:, 1] < H)
            cat[ip[keep, 1], ip[keep, 0]] = True
            cat = ndimage.binary_dilation(cat, iterations=1)
            atten = np.maximum(atten, np.where(cat, 0.3, 0.0))

    img = bg * (1.0 - atten)
    img = ndimage.gaussian_filter(img, 0.7)
    # signal-dependent grain
    img = img + np.sqrt(np.clip(img, 0, None)) * 0.02 * rng.standard_normal((H, W))
    gain, gamma = rng.uniform(0.9, 1.1), rng.uniform(0.85, 1.15)
    img = gain * np.clip(img, 0.0, 1.0) ** gamma
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
