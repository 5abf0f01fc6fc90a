"""Dense feature maps, bilinear sampling and keypoint embeddings.

The local extractor is a fixed bank of 32 filters: oriented gradient energy
in 8 directions, a difference of Gaussians and a dark-ridge (vesselness)
response, each at 3 scales, plus two smoothed intensity channels. Responses
are average pooled over ``stride x stride`` cells, so cell ``(i, j)`` covers
pixels ``[s*j, s*j + s)`` horizontally and has its center at
``s*j + (s-1)/2``. The learned lift into the matcher's width lives in the
matcher parameters.

The global provider summarizes where a pixel sits relative to the whole
vessel tree. Random Fourier features of coordinates normalized by the
tree's mass centroid and spread are mixed with heavily pooled vesselness.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from . import autodiff as ad
from .exceptions import FormatError, OutOfBounds

__all__ = [
    "FeatureMap",
    "DescriptorSet",
    "LOCAL_CHANNELS",
    "GLOBAL_DIM",
    "extract_local_features",
    "extract_global_features",
    "ContextFeatureProvider",
    "sample_bilinear",
    "normalize_keypoints",
    "positional_embedding",
    "describe",
    "DescriptorExtractor",
    "write_feature_map",
    "read_feature_map",
]

LOCAL_CHANNELS = 32
GLOBAL_DIM = 64
LOCAL_SCALES = (1.0, 2.0, 4.0)
_GRADIENT_CHANNELS = slice(0, 24)


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray  # (channels, height, width)
    stride: int

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.data.ndim != 3:
            raise ValueError("feature map data must be (channels, height, width)")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class DescriptorSet:
    """Per-keypoint descriptors of one image.

    ``local`` rows are unit-normalized filter-bank vectors; ``global_`` rows
    are context vectors. Positional embeddings depend on learned weights and
    are computed by the matcher from ``keypoints`` and ``image_size``.
    """

    keypoints: np.ndarray
    local: np.ndarray
    global_: np.ndarray
    image_size: tuple

    def __post_init__(self):
        n = len(self.keypoints)
        if len(self.local) != n or len(self.global_) != n:
            raise ValueError("keypoints, local and global descriptors differ in length")

    def __len__(self):
        return len(self.keypoints)

    def subset(self, idx) -> "DescriptorSet":
        idx = np.asarray(idx, dtype=np.int64)
        return DescriptorSet(self.keypoints[idx], self.local[idx], self.global_[idx], self.image_size)


def _as_float_image(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("expected a 2D grayscale raster")
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def _pool(channels: np.ndarray, stride: int) -> np.ndarray:
    """Mean over non-overlapping ``stride`` cells; ragged edges are edge-padded."""
    C, H, W = channels.shape
    h, w = -(-H // stride), -(-W // stride)
    if h * stride != H or w * stride != W:
        channels = np.pad(channels, ((0, 0), (0, h * stride - H), (0, w * stride - W)), mode="edge")
    return channels.reshape(C, h, stride, w, stride).mean(axis=(2, 4))


def _hessian_ridge(img, sigma):
    """Largest Hessian eigenvalue times sigma^2; positive on dark tubes."""
    hxx = ndimage.gaussian_filter(img, sigma, order=(0, 2))
    hyy = ndimage.gaussian_filter(img, sigma, order=(2, 0))
    hxy = ndimage.gaussian_filter(img, sigma, order=(1, 1))
    lam = 0.5 * (hxx + hyy) + np.sqrt(0.25 * (hxx - hyy) ** 2 + hxy**2)
    return sigma * sigma * lam


def _scale_space(img, sigma):
    """Gaussian-smoothed image and its first and second derivatives, from shared 1D passes."""
    g = ndimage.gaussian_filter1d
    ty = [g(img, sigma, axis=0, order=o) for o in (0, 1, 2)]
    return {
        "L": g(ty[0], sigma, axis=1, order=0),
        "Lx": g(ty[0], sigma, axis=1, order=1),
        "Lxx": g(ty[0], sigma, axis=1, order=2),
        "Ly": g(ty[1], sigma, axis=1, order=0),
        "Lxy": g(ty[1], sigma, axis=1, order=1),
        "Lyy": g(ty[2], sigma, axis=1, order=0),
    }


def extract_local_features(image, stride: int = 4) -> FeatureMap:
    img = _as_float_image(image).astype(np.float32)
    angles = np.arange(8) * (np.pi / 4)
    cos, sin = np.cos(angles), np.sin(angles)
    spaces = {s: _scale_space(img, s) for s in LOCAL_SCALES}
    coarse = ndimage.gaussian_filter(img, 2 * LOCAL_SCALES[-1])
    grad, dog, ridge = [], [], []
    for k, s in enumerate(LOCAL_SCALES):
        sp = spaces[s]
        gx, gy = sp["Lx"] * s, sp["Ly"] * s
        for c, sn in zip(cos, sin):
            grad.append(np.maximum(c * gx + sn * gy, 0.0))
        wider = spaces[LOCAL_SCALES[k + 1]]["L"] if k + 1 < len(LOCAL_SCALES) else coarse
        dog.append(sp["L"] - wider)
        hxx, hyy, hxy = sp["Lxx"], sp["Lyy"], sp["Lxy"]
        lam = 0.5 * (hxx + hyy) + np.sqrt(0.25 * (hxx - hyy) ** 2 + hxy**2)
        ridge.append(np.maximum(s * s * lam, 0.0))
    intensity = [spaces[1.0]["L"] - 0.5, spaces[4.0]["L"] - 0.5]
    stack = np.stack(grad + dog + ridge + intensity)
    assert stack.shape[0] == LOCAL_CHANNELS
    return FeatureMap(_pool(stack, stride).astype(np.float64), stride)


class ContextFeatureProvider:
    """Large receptive field context features (stride 16, 64 channels).

    Channel layout: one constant channel, 5 pooled vesselness channels, the
    squashed centroid-normalized cell position (2 channels) and 56 random
    Fourier features of that position, each weighted by the pooled vessel
    density around the cell. Without any vessel response every channel is
    spatially constant.
    """

    def __init__(self, stride: int = 16, dim: int = GLOBAL_DIM, length_scale: float = 0.6, seed: int = 0):
        if dim < 16:
            raise ValueError("dim must be at least 16")
        self.stride = stride
        self.dim = dim
        self.length_scale = length_scale
        self.seed = seed
        n_rff = dim - 8
        rng = np.random.default_rng(seed)
        self._omega = rng.standard_normal((n_rff, 2)) / length_scale
        self._phase = rng.uniform(0, 2 * np.pi, n_rff)

    def __call__(self, image) -> FeatureMap:
        img = _as_float_image(image)
        # vesselness at half resolution keeps the heavy filters cheap
        half = img[::2, ::2] if min(img.shape) >= 32 else img
        f = img.shape[0] / half.shape[0]
        ves = np.maximum(np.maximum(_hessian_ridge(half, 1.5), _hessian_ridge(half, 3.0)), 0.0)
        cell = self.stride / f
        pooled = [ndimage.gaussian_filter(ves, s * cell) for s in (1.0, 2.0, 4.0)]
        H, W = img.shape
        h, w = -(-H // self.stride), -(-W // self.stride)
        # sample the pooled maps at cell centers
        cy = (np.arange(h) * self.stride + (self.stride - 1) / 2) / f
        cx = (np.arange(w) * self.stride + (self.stride - 1) / 2) / f
        cyi = np.clip(np.round(cy).astype(int), 0, half.shape[0] - 1)
        cxi = np.clip(np.round(cx).astype(int), 0, half.shape[1] - 1)
        grids = [p[np.ix_(cyi, cxi)] for p in pooled]

        total = ves.sum()
        out = np.zeros((self.dim, h, w))
        out[0] = 1.0
        if total <= 1e-12 * ves.size:
            return FeatureMap(out, self.stride)
        peak = [g.max() for g in grids]
        for k, (g, m) in enumerate(zip(grids, peak)):
            out[1 + k] = g / m if m > 0 else 0.0
        dens = grids[1] / peak[1] if peak[1] > 0 else np.zeros_like(grids[1])
        out[4] = np.sqrt(dens)
        out[5] = dens**2
        # mass centroid and spread of the vessel response, in pixels
        yy, xx = np.mgrid[0 : ves.shape[0], 0 : ves.shape[1]]
        wgt = ves / total
        c = np.array([(wgt * xx).sum(), (wgt * yy).sum()])
        spread = math.sqrt(max((wgt * ((xx - c[0]) ** 2 + (yy - c[1]) ** 2)).sum(), 1e-12))
        gx = (cx[None, :] - c[0]) / spread
        gy = (cy[:, None] - c[1]) / spread
        out[6] = np.broadcast_to(np.tanh(gx), (h, w))
        out[7] = np.broadcast_to(np.tanh(gy), (h, w))
        u = np.stack(np.broadcast_arrays(gx, gy), axis=-1)  # (h, w, 2)
        z = np.cos(u @ self._omega.T + self._phase)  # (h, w, n_rff)
        out[8:] = np.moveaxis(z, -1, 0) * math.sqrt(2.0 / z.shape[-1]) * (0.25 + dens)[None]
        return FeatureMap(out, self.stride)


_DEFAULT_PROVIDER = None


def extract_global_features(image, provider=None) -> FeatureMap:
    global _DEFAULT_PROVIDER
    if provider is None:
        if _DEFAULT_PROVIDER is None:
            _DEFAULT_PROVIDER = ContextFeatureProvider()
        provider = _DEFAULT_PROVIDER
    return provider(image)


def sample_bilinear(fmap: FeatureMap, keypoints, image_size=None) -> np.ndarray:
    """Interpolate per-keypoint vectors; rows follow ``keypoints``.

    ``image_size`` ``(W, H)`` sets the valid raster; it defaults to the map
    extent times the stride. Keypoints between the outer cell centers and the
    raster border take the border cell values.
    """
    kp = np.asarray(keypoints, dtype=float).reshape(-1, 2)
    s = fmap.stride
    W, H = image_size if image_size is not None else (fmap.width * s, fmap.height * s)
    bad = (kp[:, 0] < 0) | (kp[:, 0] > W - 1) | (kp[:, 1] < 0) | (kp[:, 1] > H - 1) | ~np.isfinite(kp).all(axis=1)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise OutOfBounds(f"keypoint {i} at {kp[i].tolist()} lies outside the {W}x{H} raster")
    gx = np.clip((kp[:, 0] - (s - 1) / 2) / s, 0.0, fmap.width - 1)
    gy = np.clip((kp[:, 1] - (s - 1) / 2) / s, 0.0, fmap.height - 1)
    x0 = np.minimum(np.floor(gx).astype(np.int64), max(fmap.width - 2, 0))
    y0 = np.minimum(np.floor(gy).astype(np.int64), max(fmap.height - 2, 0))
    x1 = np.minimum(x0 + 1, fmap.width - 1)
    y1 = np.minimum(y0 + 1, fmap.height - 1)
    fx, fy = gx - x0, gy - y0
    d = fmap.data
    out = (
        d[:, y0, x0] * ((1 - fx) * (1 - fy))
        + d[:, y0, x1] * (fx * (1 - fy))
        + d[:, y1, x0] * ((1 - fx) * fy)
        + d[:, y1, x1] * (fx * fy)
    )
    return out.T.copy()


def normalize_keypoints(keypoints, image_size) -> np.ndarray:
    """Map pixel coordinates to ``[-1, 1]^2``; the raster center goes to the origin."""
    kp = np.asarray(keypoints, dtype=float).reshape(-1, 2)
    W, H = image_size
    scale = np.array([2.0 / max(W - 1, 1), 2.0 / max(H - 1, 1)])
    return kp * scale - 1.0


def positional_embedding(keypoints, image_size, mlp_params):
    """Two-layer GELU MLP of the normalized coordinates.

    ``mlp_params`` maps ``W1 (2, d)``, ``b1``, ``W2 (d, d)``, ``b2`` to arrays
    or :class:`~angiomatch.autodiff.Tensor`; with tensors the result is
    differentiable with respect to them.
    """
    u = normalize_keypoints(keypoints, image_size)
    W1, b1, W2, b2 = (mlp_params[k] for k in ("W1", "b1", "W2", "b2"))
    tensors = any(isinstance(v, ad.Tensor) for v in (W1, b1, W2, b2))
    if not tensors:
        W1, b1, W2, b2 = (np.asarray(v) for v in (W1, b1, W2, b2))
        u = u.astype(W1.dtype, copy=False)
        with ad.no_grad():
            h = ad.gelu(ad.Tensor(u @ W1 + b1))
        return h.data @ W2 + b2
    dtype = next(v.data.dtype for v in (W1, b1, W2, b2) if isinstance(v, ad.Tensor))
    h = ad.gelu(ad.matmul(ad.Tensor(u.astype(dtype, copy=False)), W1) + b1)
    return ad.matmul(h, W2) + b2


def _unit_rows(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def describe(image, keypoints, local_stride: int = 4, provider=None, local_map=None, global_map=None) -> DescriptorSet:
    """Sample local and global descriptors at ``keypoints`` of one image."""
    img = np.asarray(image)
    size = (img.shape[1], img.shape[0])
    kp = np.asarray(keypoints, dtype=float).reshape(-1, 2)
    lm = local_map if local_map is not None else extract_local_features(img, local_stride)
    gm = global_map if global_map is not None else extract_global_features(img, provider)
    loc = _unit_rows(sample_bilinear(lm, kp, size))
    glo = sample_bilinear(gm, kp, size)
    return DescriptorSet(kp, loc, glo, size)


class DescriptorExtractor(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``transform([(image, keypoints), ...]) -> [DescriptorSet, ...]``."""

    def __init__(self, local_stride: int = 4, global_provider=None):
        self.local_stride = local_stride
        self.global_provider = global_provider

    def fit(self, X=None, y=None):
        if int(self.local_stride) < 1:
            raise ValueError("local_stride must be >= 1")
        return self

    def transform(self, X):
        return [describe(img, kp, self.local_stride, self.global_provider) for img, kp in X]


# ---------------------------------------------------------------------------
# binary dump
# ---------------------------------------------------------------------------

_FMAP_MAGIC = b"AMFM"
_FMAP_HEADER = struct.Struct("<4sIIII")


def write_feature_map(path, fmap: FeatureMap) -> None:
    """Header ``(magic, channels, h, w, stride)`` then little-endian float32 data."""
    with open(path, "wb") as fh:
        fh.write(_FMAP_HEADER.pack(_FMAP_MAGIC, fmap.channels, fmap.height, fmap.width, fmap.stride))
        fh.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())


def read_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _FMAP_HEADER.size:
        raise FormatError("truncated feature map header", path)
    magic, c, h, w, s = _FMAP_HEADER.unpack_from(raw)
    if magic != _FMAP_MAGIC:
        raise FormatError("not a feature map file (bad magic)", path)
    body = raw[_FMAP_HEADER.size :]
    if len(body) != 4 * c * h * w:
        raise FormatError(f"expected {4 * c * h * w} data bytes, found {len(body)}", path)
    data = np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float64)
    return FeatureMap(data, s)
