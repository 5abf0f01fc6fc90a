"""Synthetic two-view scenes shared by the geometry and acceptance tests."""

import numpy as np
from scipy.spatial.transform import Rotation


def ransac_scene(seed, noise=1.0, outlier_frac=0.3, n=50, f=500.0, size=(640, 480)):
    """Points filling camera A's image at depths 3-10, second camera 5-15 deg away.

    Returns ``(ptsA, ptsB, K, R_true)``; a fraction of B points is replaced by
    uniform outliers.
    """
    rng = np.random.default_rng(seed)
    W, H = size
    K = np.array([[f, 0, (W - 1) / 2], [0, f, (H - 1) / 2], [0, 0, 1.0]])
    uv = rng.uniform((0, 0), (W - 1, H - 1), (n, 2))
    z = rng.uniform(3, 10, n)
    X = np.c_[(uv - K[:2, 2]) / f * z[:, None], z]
    axis = rng.normal(size=3)
    R = Rotation.from_rotvec(axis / np.linalg.norm(axis) * np.radians(rng.uniform(5, 15))).as_matrix()
    c = rng.normal(size=3)
    c /= np.linalg.norm(c)
    t = -R @ c
    Xb = X @ R.T + t
    b = (Xb @ K.T)[:, :2] / Xb[:, 2:3]
    a = uv + rng.normal(0, noise, uv.shape)
    b = b + rng.normal(0, noise, b.shape)
    k = int(round(outlier_frac * n))
    idx = rng.choice(n, k, replace=False)
    b[idx] = rng.uniform((0, 0), (W, H), (k, 2))
    return a, b, K, R
