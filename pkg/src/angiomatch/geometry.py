"""C-arm camera model, projection, epipolar geometry and robust relative pose.

World frame
-----------
Trees live in a patient-aligned frame centred on the C-arm isocenter:

* ``x`` points to the patient's left,
* ``y`` points cranial (towards the head),
* ``z`` points anterior, i.e. along the beam of the AP view (source behind the
  patient, detector in front).

A camera maps world points with ``X_cam = R @ X_world + t``. At zero
angulation ``R`` is the identity, so the AP camera frame coincides with the
world frame and image columns grow towards patient-left, image rows towards
cranial.

LAO/RAO is a rotation of the C-arm about the patient's long axis ``y``
(positive = LAO, detector swings to the patient's left). CRA/CAU then tilts the
arm about its own lateral axis (positive = CRA, detector tilts towards the
head). As camera-to-world rotations this is ``Ry(lao) @ Rx(-cra)``; the
world-to-camera rotation is its transpose, ``Rx(cra) @ Ry(-lao)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .exceptions import (
    DegenerateGeometry,
    FormatError,
    InsufficientMatches,
    NoConsensus,
    NonPositiveDepth,
)

__all__ = [
    "CArmAngulation",
    "CameraModel",
    "EssentialEstimate",
    "angulation_to_extrinsics",
    "make_camera",
    "project_points",
    "fundamental_from_cameras",
    "relative_pose",
    "epipolar_distances",
    "epipolar_distance",
    "estimate_pose_ransac",
    "rotation_error",
    "view_separation",
    "camera_to_text",
    "camera_from_text",
]

DEFAULT_SID = 1000.0
DEFAULT_SOD = 800.0
DEFAULT_PIXEL_SPACING = 0.3
DEFAULT_IMAGE_SIZE = (512, 512)


def _rot_x(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class CArmAngulation:
    """Gantry angles in degrees; positive ``lao_rao`` is LAO, positive ``cra_cau`` is CRA."""

    lao_rao: float
    cra_cau: float

    def __post_init__(self):
        for name in ("lao_rao", "cra_cau"):
            v = float(getattr(self, name))
            if not -180.0 <= v <= 180.0:
                raise ValueError(f"{name}={v} outside [-180, 180]")
            object.__setattr__(self, name, v)

    def __str__(self):
        h = f"LAO {self.lao_rao:g}" if self.lao_rao >= 0 else f"RAO {-self.lao_rao:g}"
        v = f"CRA {self.cra_cau:g}" if self.cra_cau >= 0 else f"CAU {-self.cra_cau:g}"
        return f"{h} / {v}"


@dataclass(frozen=True, eq=False)
class CameraModel:
    rotation: np.ndarray
    translation: np.ndarray
    source_to_detector: float = DEFAULT_SID
    source_to_isocenter: float = DEFAULT_SOD
    pixel_spacing: float = DEFAULT_PIXEL_SPACING
    principal_point: np.ndarray = field(default_factory=lambda: np.array([255.5, 255.5]))
    image_size: tuple = DEFAULT_IMAGE_SIZE
    angulation: CArmAngulation | None = None

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("rotation must be a proper orthonormal matrix")
        if not self.source_to_detector > self.source_to_isocenter > 0:
            raise ValueError("need SID > SOD > 0")
        if not self.pixel_spacing > 0:
            raise ValueError("pixel_spacing must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "principal_point", np.asarray(self.principal_point, dtype=float).reshape(2))
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @property
    def focal_px(self) -> float:
        return self.source_to_detector / self.pixel_spacing

    @property
    def intrinsics(self) -> np.ndarray:
        f = self.focal_px
        cx, cy = self.principal_point
        return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Source position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit beam direction (source to detector) in world coordinates."""
        return self.rotation[2].copy()

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and self.source_to_detector == other.source_to_detector
            and self.source_to_isocenter == other.source_to_isocenter
            and self.pixel_spacing == other.pixel_spacing
            and np.array_equal(self.principal_point, other.principal_point)
            and self.image_size == other.image_size
        )


@dataclass
class EssentialEstimate:
    essential: np.ndarray
    rotation: np.ndarray
    translation_dir: np.ndarray
    inlier_mask: np.ndarray
    num_iterations: int


def angulation_to_extrinsics(ang: CArmAngulation, sod: float = DEFAULT_SOD):
    """World-to-camera ``(R, t)`` for a C-arm angulation.

    The isocenter lands on the optical axis at depth ``sod``.
    """
    R = _rot_x(ang.cra_cau) @ _rot_y(-ang.lao_rao)
    t = np.array([0.0, 0.0, float(sod)])
    return R, t


def make_camera(
    ang: CArmAngulation,
    sid: float = DEFAULT_SID,
    sod: float = DEFAULT_SOD,
    pixel_spacing: float = DEFAULT_PIXEL_SPACING,
    image_size=DEFAULT_IMAGE_SIZE,
    principal_point=None,
) -> CameraModel:
    R, t = angulation_to_extrinsics(ang, sod)
    w, h = image_size
    if principal_point is None:
        principal_point = ((w - 1) / 2.0, (h - 1) / 2.0)
    return CameraModel(
        rotation=R,
        translation=t,
        source_to_detector=float(sid),
        source_to_isocenter=float(sod),
        pixel_spacing=float(pixel_spacing),
        principal_point=np.asarray(principal_point, dtype=float),
        image_size=(int(w), int(h)),
        angulation=ang,
    )


def project_points(cam: CameraModel, pts3d, return_depth: bool = False):
    """Pinhole projection of world points (mm) to pixel coordinates.

    Raises :class:`NonPositiveDepth` if any point is at or behind the source.
    """
    X = np.asarray(pts3d, dtype=float).reshape(-1, 3)
    Xc = X @ cam.rotation.T + cam.translation
    z = Xc[:, 2]
    if np.any(z <= 0):
        bad = int(np.flatnonzero(z <= 0)[0])
        raise NonPositiveDepth(f"point {bad} has depth {z[bad]:.6g} mm")
    uv = cam.focal_px * Xc[:, :2] / z[:, None] + cam.principal_point
    if return_depth:
        return uv, z
    return uv


def relative_pose(camA: CameraModel, camB: CameraModel):
    """``(R, t)`` taking camera-A coordinates to camera-B coordinates."""
    R = camB.rotation @ camA.rotation.T
    t = camB.translation - R @ camA.translation
    return R, t


def _skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def fundamental_from_cameras(camA: CameraModel, camB: CameraModel) -> np.ndarray:
    """Fundamental matrix with ``x_B^T F x_A = 0``, scaled to unit Frobenius norm."""
    R, t = relative_pose(camA, camB)
    scale = max(np.linalg.norm(camA.translation), np.linalg.norm(camB.translation), 1.0)
    if np.linalg.norm(t) <= 1e-9 * scale:
        raise DegenerateGeometry("cameras share a center; relative translation is zero")
    E = _skew(t / np.linalg.norm(t)) @ R
    F = np.linalg.inv(camB.intrinsics).T @ E @ np.linalg.inv(camA.intrinsics)
    return F / np.linalg.norm(F)


def _homog(pts) -> np.ndarray:
    p = np.asarray(pts, dtype=float).reshape(-1, 2)
    return np.hstack([p, np.ones((len(p), 1))])


def epipolar_distances(F, ptsA, ptsB):
    """One-sided distances ``(d_A, d_B)`` in pixels.

    ``d_B`` is the distance of each B point to the epipolar line ``F x_A``;
    ``d_A`` the distance of each A point to ``F^T x_B``.
    """
    xa, xb = _homog(ptsA), _homog(ptsB)
    F = np.asarray(F, dtype=float)
    lb = xa @ F.T
    la = xb @ F
    num = np.abs(np.sum(xb * lb, axis=1))
    d_b = num / np.hypot(lb[:, 0], lb[:, 1])
    d_a = num / np.hypot(la[:, 0], la[:, 1])
    return d_a, d_b


def epipolar_distance(F, ptA, ptB):
    """Symmetric epipolar distance: mean of the two one-sided distances.

    Accepts single points or ``(n, 2)`` arrays; returns a float or an array.
    """
    d_a, d_b = epipolar_distances(F, ptA, ptB)
    d = 0.5 * (d_a + d_b)
    if np.ndim(ptA) == 1:
        return float(d[0])
    return d


def rotation_error(R_est, R_true) -> float:
    """Geodesic angle between two rotations, degrees in ``[0, 180]``."""
    c = (np.trace(np.asarray(R_est).T @ np.asarray(R_true)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def view_separation(a: CArmAngulation, b: CArmAngulation) -> float:
    """Angle in degrees between the beam directions of two angulations."""
    Ra, _ = angulation_to_extrinsics(a, 1.0)
    Rb, _ = angulation_to_extrinsics(b, 1.0)
    c = float(np.dot(Ra[2], Rb[2]))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


# ---------------------------------------------------------------------------
# essential matrix estimation
# ---------------------------------------------------------------------------


def _hartley(x):
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return T


def _rank2(M):
    U, S, Vt = np.linalg.svd(M)
    return U @ np.diag([S[0], S[1], 0.0]) @ Vt


def _project_essential(E):
    U, S, Vt = np.linalg.svd(E)
    s = (S[0] + S[1]) / 2.0
    return U @ np.diag([s, s, 0.0]) @ Vt


def eight_point_essential(xa, xb) -> np.ndarray:
    """Normalized 8-point estimate of E from normalized image coordinates (n >= 8)."""
    Ta, Tb = _hartley(xa), _hartley(xb)
    pa = _homog(xa) @ Ta.T
    pb = _homog(xb) @ Tb.T
    A = np.einsum("ni,nj->nij", pb, pa).reshape(-1, 9)
    _, _, Vt = np.linalg.svd(A)
    # Hartley-space matrix is only rank 2; equal singular values are imposed after denormalizing
    En = _rank2(Vt[-1].reshape(3, 3))
    E = _project_essential(Tb.T @ En @ Ta)
    return E / np.linalg.norm(E)


def _triangulate(R, t, xa, xb):
    """Linear triangulation in camera-A coordinates; returns (n, 3) points."""
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t[:, None]])
    rows = np.stack(
        [
            xa[:, 0, None] * P1[2] - P1[0],
            xa[:, 1, None] * P1[2] - P1[1],
            xb[:, 0, None] * P2[2] - P2[0],
            xb[:, 1, None] * P2[2] - P2[1],
        ],
        axis=1,
    )
    _, _, Vt = np.linalg.svd(rows)
    X = Vt[:, -1, :]
    w = X[:, 3]
    w = np.where(np.abs(w) < 1e-300, 1e-300, w)
    return X[:, :3] / w[:, None]


def decompose_essential(E, xa, xb):
    """Pick the (R, t) among the four decompositions of E by cheirality.

    Majority vote on positive depth in both cameras; ties go to the candidate
    with the smallest reprojection residual.
    """
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    best = None
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            X = _triangulate(R, t, xa, xb)
            Xb = X @ R.T + t
            votes = int(np.sum((X[:, 2] > 0) & (Xb[:, 2] > 0)))
            with np.errstate(divide="ignore", invalid="ignore"):
                ra = X[:, :2] / X[:, 2:3] - xa
                rb = Xb[:, :2] / Xb[:, 2:3] - xb
            resid = float(np.nansum(ra**2) + np.nansum(rb**2))
            key = (-votes, resid)
            if best is None or key < best[0]:
                best = (key, R, t)
    return best[1], best[2] / np.linalg.norm(best[2])


def _sampson_residuals(F, pa, pb):
    ha, hb = _homog(pa), _homog(pb)
    Fa = ha @ F.T
    Ftb = hb @ F
    num = np.einsum("ni,ni->n", hb, Fa)
    den = Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Ftb[:, 0] ** 2 + Ftb[:, 1] ** 2
    return num / np.sqrt(den + 1e-300)


def _refine_pose(R, t, pa, pb, Ka_inv, Kb_inv):
    """Minimize the Sampson error over rotation and unit translation."""
    t = t / np.linalg.norm(t)
    # tangent basis of the translation sphere at t
    helper = np.eye(3)[np.argmin(np.abs(t))]
    u = np.cross(t, helper)
    u /= np.linalg.norm(u)
    v = np.cross(t, u)

    def unpack(p):
        Rn = Rotation.from_rotvec(p[:3]).as_matrix() @ R
        tn = t + p[3] * u + p[4] * v
        return Rn, tn / np.linalg.norm(tn)

    def resid(p):
        Rn, tn = unpack(p)
        F = Kb_inv.T @ _skew(tn) @ Rn @ Ka_inv
        return _sampson_residuals(F, pa, pb)

    if len(pa) < 6:
        return R, t
    sol = least_squares(resid, np.zeros(5), method="lm", x_scale=1.0, max_nfev=200)
    return unpack(sol.x)


def estimate_pose_ransac(
    matchesA,
    matchesB,
    intrinsicsA,
    intrinsicsB,
    threshold: float = 1.0,
    max_iters: int = 2000,
    seed: int = 0,
    confidence: float = 0.99,
) -> EssentialEstimate:
    """Relative pose from pixel correspondences with RANSAC around the 8-point solver.

    Inliers have symmetric epipolar distance below ``threshold`` pixels. The
    iteration budget shrinks adaptively once the running inlier ratio makes a
    clean sample likely at ``confidence``. The winning hypothesis is refit on
    its inliers before decomposition.
    """
    pa = np.asarray(matchesA, dtype=float).reshape(-1, 2)
    pb = np.asarray(matchesB, dtype=float).reshape(-1, 2)
    n = len(pa)
    if n != len(pb):
        raise ValueError("matchesA and matchesB differ in length")
    if n < 8:
        raise InsufficientMatches(f"need at least 8 matches, got {n}")
    Ka = intrinsicsA.intrinsics if isinstance(intrinsicsA, CameraModel) else np.asarray(intrinsicsA, float)
    Kb = intrinsicsB.intrinsics if isinstance(intrinsicsB, CameraModel) else np.asarray(intrinsicsB, float)
    Ka_inv, Kb_inv = np.linalg.inv(Ka), np.linalg.inv(Kb)
    xa = (_homog(pa) @ Ka_inv.T)[:, :2]
    xb = (_homog(pb) @ Kb_inv.T)[:, :2]

    def inliers_of(E):
        F = Kb_inv.T @ E @ Ka_inv
        with np.errstate(divide="ignore", invalid="ignore"):
            d = epipolar_distance(F, pa, pb)
        return np.nan_to_num(d, nan=np.inf) < threshold

    rng = np.random.default_rng(seed)
    best_mask, best_count, best_E = None, -1, None
    budget = max_iters
    it = 0
    while it < budget:
        it += 1
        idx = rng.choice(n, size=8, replace=False)
        try:
            E = eight_point_essential(xa[idx], xb[idx])
        except np.linalg.LinAlgError:
            continue
        mask = inliers_of(E)
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count, best_E = mask, count, E
            w = count / n
            if w >= 1.0:
                budget = it
            elif w > 0:
                denom = math.log(1.0 - w**8)
                if denom < 0:
                    budget = min(budget, int(math.ceil(math.log(1.0 - confidence) / denom)))
    if best_count < 8:
        raise NoConsensus(f"best hypothesis has {max(best_count, 0)} inliers")

    E_ref = eight_point_essential(xa[best_mask], xb[best_mask])
    ref_mask = inliers_of(E_ref)
    if ref_mask.sum() >= best_count:
        best_E, best_mask = E_ref, ref_mask
    R, t = decompose_essential(best_E, xa[best_mask], xb[best_mask])
    # alternate Sampson refinement of (R, t) with re-selection of the consensus set
    for _ in range(3):
        R_new, t_new = _refine_pose(R, t, pa[best_mask], pb[best_mask], Ka_inv, Kb_inv)
        E_new = _skew(t_new) @ R_new
        new_mask = inliers_of(E_new)
        if new_mask.sum() < best_mask.sum():
            break
        grew = new_mask.sum() > best_mask.sum()
        R, t, best_E, best_mask = R_new, t_new, E_new / np.linalg.norm(E_new), new_mask
        if not grew:
            break
    return EssentialEstimate(
        essential=best_E,
        rotation=R,
        translation_dir=t,
        inlier_mask=best_mask,
        num_iterations=it,
    )


# ---------------------------------------------------------------------------
# text record
# ---------------------------------------------------------------------------

_CAM_KEYS = ("lao_rao", "cra_cau", "sid", "sod", "pixel_spacing", "principal_x", "principal_y", "width", "height")


def camera_to_text(cam: CameraModel) -> str:
    """Serialize a camera built from an angulation as ``key=value`` lines."""
    if cam.angulation is None:
        raise ValueError("only angulation-based cameras have a text record")
    vals = {
        "lao_rao": cam.angulation.lao_rao,
        "cra_cau": cam.angulation.cra_cau,
        "sid": cam.source_to_detector,
        "sod": cam.source_to_isocenter,
        "pixel_spacing": cam.pixel_spacing,
        "principal_x": cam.principal_point[0],
        "principal_y": cam.principal_point[1],
        "width": int(cam.image_size[0]),
        "height": int(cam.image_size[1]),
    }
    vals = {k: v if isinstance(v, int) else float(v) for k, v in vals.items()}
    return "".join(f"{k}={vals[k]!r}\n" for k in _CAM_KEYS)


def camera_from_text(text: str, path=None) -> CameraModel:
    vals = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"expected key=value, got {raw!r}", path, lineno)
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            vals[k] = float(v)
        except ValueError:
            raise FormatError(f"non-numeric value for {k!r}", path, lineno) from None
    missing = [k for k in _CAM_KEYS if k not in vals]
    if missing:
        raise FormatError(f"missing keys {missing}", path)
    return make_camera(
        CArmAngulation(vals["lao_rao"], vals["cra_cau"]),
        sid=vals["sid"],
        sod=vals["sod"],
        pixel_spacing=vals["pixel_spacing"],
        image_size=(int(vals["width"]), int(vals["height"])),
        principal_point=(vals["principal_x"], vals["principal_y"]),
    )
