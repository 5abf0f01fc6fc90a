"""Procedural coronary centerline trees and paired projections with exact correspondences.

Trees are grown on a sphere that stands in for the epicardial surface: every
step turns the running direction by a smoothly varying curvature, is projected
onto the local tangent plane and re-snapped onto the sphere. Side branches
leave their parent at a random angle inside the tangent plane. The finished
tree is shifted so its bounding box is centred on the isocenter.

View angles follow fixed per-class base views perturbed on a 5 degree grid;
pairs are all within-class view pairs at least ``min_separation`` degrees apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import CArmAngulation, CameraModel, project_points, view_separation

__all__ = [
    "VesselClass",
    "VesselTree",
    "TreeParams",
    "DEFAULT_TREE_PARAMS",
    "DEFAULT_ANGLE_TABLE",
    "PERTURBATION_PATTERNS",
    "ProjectedView",
    "ViewPair",
    "generate_tree",
    "sample_view_angles",
    "make_pairs",
    "project_view",
    "project_pair",
    "pair_from_views",
    "rasterize_tree",
]


class VesselClass(str, Enum):
    LAD = "LAD"
    LCX = "LCX"
    RCA = "RCA"

    def __str__(self):
        return self.value


@dataclass
class VesselTree:
    points: np.ndarray
    radii: np.ndarray
    parent_index: np.ndarray
    bifurcation_indices: np.ndarray
    vessel_class: VesselClass

    def __len__(self):
        return len(self.points)

    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in range(len(self))]
        for i, p in enumerate(self.parent_index):
            if p >= 0:
                kids[p].append(i)
        return kids

    def edges(self) -> np.ndarray:
        """``(child, parent)`` index pairs, one per non-root point."""
        child = np.flatnonzero(self.parent_index >= 0)
        return np.stack([child, self.parent_index[child]], axis=1)

    def validate(self) -> None:
        """Raise ``ValueError`` if any structural invariant is broken."""
        n = len(self)
        if self.points.shape != (n, 3) or self.radii.shape != (n,) or self.parent_index.shape != (n,):
            raise ValueError("inconsistent array shapes")
        roots = np.flatnonzero(self.parent_index < 0)
        if len(roots) != 1:
            raise ValueError(f"expected a single root, found {len(roots)}")
        # parents preceding children rules out cycles
        for i, p in enumerate(self.parent_index):
            if p >= i:
                raise ValueError(f"parent of {i} is {p}; parents must precede children")
        if np.any(self.radii <= 0):
            raise ValueError("radii must be positive")
        e = self.edges()
        if np.any(self.radii[e[:, 0]] > self.radii[e[:, 1]]):
            raise ValueError("radius increases from parent to child")
        step = np.linalg.norm(self.points[e[:, 0]] - self.points[e[:, 1]], axis=1)
        if np.any(step < 0.2) or np.any(step > 1.0):
            raise ValueError(f"point spacing {step.min():.3f}..{step.max():.3f} outside [0.2, 1.0] mm")
        kids = self.children()
        for b in self.bifurcation_indices:
            if len(kids[b]) < 2:
                raise ValueError(f"bifurcation {b} has {len(kids[b])} children")


@dataclass(frozen=True)
class TreeParams:
    trunk_length: tuple = (80.0, 140.0)
    bifurcations: tuple = (4, 7)
    root_radius: tuple = (1.6, 2.0)
    trunk_end_fraction: tuple = (0.35, 0.5)
    branch_length: tuple = (20.0, 55.0)
    branch_radius_fraction: tuple = (0.55, 0.75)
    branch_angle_deg: tuple = (35.0, 75.0)
    heart_radius: tuple = (40.0, 50.0)
    step: float = 0.8
    curvature_scale: float = 0.035
    curvature_corr: float = 0.97
    min_radius: float = 0.35
    second_order_prob: float = 0.3


DEFAULT_TREE_PARAMS = {
    VesselClass.LAD: TreeParams(root_radius=(1.7, 2.1)),
    VesselClass.LCX: TreeParams(trunk_length=(80.0, 120.0), root_radius=(1.5, 1.9)),
    VesselClass.RCA: TreeParams(trunk_length=(100.0, 140.0), bifurcations=(2, 4), root_radius=(1.8, 2.2), second_order_prob=0.0),
}


def _unit(v):
    return v / np.linalg.norm(v)


def _tangent(v, normal):
    return v - np.dot(v, normal) * normal


def _grow(start, direction, n_steps, r0, r1, rng, params: TreeParams, sphere_radius):
    pts = np.empty((n_steps, 3))
    p = np.asarray(start, float)
    normal = _unit(p)
    d = _unit(_tangent(direction, normal))
    kappa = np.zeros(3)
    rho = params.curvature_corr
    for k in range(n_steps):
        kappa = rho * kappa + params.curvature_scale * math.sqrt(1.0 - rho * rho) * rng.standard_normal(3)
        kappa = kappa - np.dot(kappa, d) * d
        d = _unit(d + kappa * params.step)
        d = _unit(_tangent(d, normal))
        p = p + params.step * d
        p = sphere_radius * _unit(p)
        normal = _unit(p)
        pts[k] = p
    radii = np.linspace(r0, r1, n_steps)
    return pts, radii


def generate_tree(vessel_class, seed: int, params: TreeParams | None = None) -> VesselTree:
    """Grow a centerline tree; identical ``(vessel_class, seed)`` give identical trees."""
    vc = VesselClass(vessel_class)
    params = params or DEFAULT_TREE_PARAMS[vc]
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(list(VesselClass).index(vc),)))
    rs = rng.uniform(*params.heart_radius)

    root = rs * _unit(rng.standard_normal(3))
    d0 = _unit(_tangent(rng.standard_normal(3), _unit(root)))
    trunk_len = rng.uniform(*params.trunk_length)
    n_trunk = int(round(trunk_len / params.step))
    r_root = rng.uniform(*params.root_radius)
    r_end = max(params.min_radius, r_root * rng.uniform(*params.trunk_end_fraction))

    # first point sits on the sphere; growth starts from it
    tp, tr = _grow(root, d0, n_trunk - 1, r_root, r_end, rng, params, rs)
    points = [np.vstack([root, tp])]
    radii = [np.concatenate([[r_root], tr])]
    parents = [np.arange(-1, n_trunk - 1)]
    polylines = [np.arange(n_trunk)]  # global indices of each polyline
    depth = [0]
    total = n_trunk
    bifs: list[int] = []

    n_bif = int(rng.integers(params.bifurcations[0], params.bifurcations[1] + 1))
    all_pts = lambda: np.vstack(points)  # noqa: E731
    attempts = 0
    while len(bifs) < n_bif:
        attempts += 1
        if attempts > 500:
            raise RuntimeError("could not place bifurcations")  # pragma: no cover
        if len(polylines) > 1 and rng.random() < params.second_order_prob:
            pl_idx = int(rng.integers(1, len(polylines)))
        else:
            pl_idx = 0
        pl = polylines[pl_idx]
        if len(pl) < 24:
            continue
        lo, hi = 6, len(pl) - 8
        pos = int(rng.integers(lo, hi))
        attach = int(pl[pos])
        if any(abs(int(np.flatnonzero(pl == b)[0]) - pos) < 10 for b in bifs if b in pl):
            continue
        P = all_pts()
        R = np.concatenate(radii)
        here = P[attach]
        ahead = P[pl[pos + 1]]
        tdir = _unit(ahead - here)
        normal = _unit(here)
        side = np.cross(normal, tdir)
        ang = math.radians(rng.uniform(*params.branch_angle_deg)) * (1 if rng.random() < 0.5 else -1)
        bdir = math.cos(ang) * tdir + math.sin(ang) * side
        scale_len = 1.0 if depth[pl_idx] == 0 else 0.6
        blen = rng.uniform(*params.branch_length) * scale_len
        nb = max(12, int(round(blen / params.step)))
        rb0 = min(R[attach], max(params.min_radius, R[attach] * rng.uniform(*params.branch_radius_fraction)))
        rb1 = max(params.min_radius, rb0 * rng.uniform(0.45, 0.7))
        rb1 = min(rb1, rb0)
        bp, br = _grow(here, bdir, nb, rb0, rb1, rng, params, rs)
        idx = np.arange(total, total + nb)
        par = np.concatenate([[attach], idx[:-1]])
        points.append(bp)
        radii.append(br)
        parents.append(par)
        polylines.append(idx)
        depth.append(depth[pl_idx] + 1)
        total += nb
        bifs.append(attach)

    P = np.vstack(points)
    center = 0.5 * (P.min(axis=0) + P.max(axis=0))
    tree = VesselTree(
        points=P - center,
        radii=np.concatenate(radii),
        parent_index=np.concatenate(parents).astype(np.int64),
        bifurcation_indices=np.array(sorted(bifs), dtype=np.int64),
        vessel_class=vc,
    )
    return tree


# ---------------------------------------------------------------------------
# view protocol
# ---------------------------------------------------------------------------

PERTURBATION_STEP = 5.0

# offsets in units of PERTURBATION_STEP, as (lao_rao, cra_cau)
PERTURBATION_PATTERNS = {
    "grid": [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)],
    "plus": [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)],
    "diag": [(0, 0), (-1, -1), (1, 1), (-1, 1), (1, -1)],
    "row": [(-1, 0), (0, 0), (1, 0)],
    "col": [(0, -1), (0, 0), (0, 1)],
    "single": [(0, 0)],
}

# Base views (lao_rao, cra_cau, pattern). Standard projections per territory:
# LAD under cranial tilt, LCX under caudal tilt, RCA from LAO/RAO. With a
# 25 degree minimum separation these give 110 + 132 LCA and 108 RCA pairs.
DEFAULT_ANGLE_TABLE = {
    VesselClass.LAD: [(45.0, 25.0, "grid"), (-30.0, 20.0, "diag"), (0.0, 30.0, "diag")],
    VesselClass.LCX: [(-30.0, -20.0, "grid"), (0.0, -40.0, "grid"), (0.0, -30.0, "row"), (-45.0, -15.0, "col")],
    VesselClass.RCA: [(30.0, 0.0, "grid"), (-30.0, 0.0, "grid"), (45.0, 0.0, "col")],
}


def sample_view_angles(vessel_class, table=None, step: float = PERTURBATION_STEP) -> list[CArmAngulation]:
    """Expand the base views of a class by their perturbation patterns."""
    table = DEFAULT_ANGLE_TABLE if table is None else table
    rows = table[VesselClass(vessel_class)]
    out = []
    for lao, cra, pattern in rows:
        for dl, dc in PERTURBATION_PATTERNS[pattern]:
            out.append(CArmAngulation(lao + dl * step, cra + dc * step))
    return out


def make_pairs(views, min_separation: float = 25.0) -> list[tuple[int, int]]:
    """All ``(i, j)``, ``i < j``, whose beam directions differ by at least ``min_separation`` degrees."""
    pairs = []
    for i in range(len(views)):
        for j in range(i + 1, len(views)):
            if view_separation(views[i], views[j]) >= min_separation:
                pairs.append((i, j))
    return pairs


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


@dataclass
class ProjectedView:
    """One rendered view of a tree.

    ``keypoints`` are the in-raster projections in tree order and
    ``point_ids[k]`` is the tree index of keypoint ``k``.
    """

    camera: CameraModel
    keypoints: np.ndarray
    point_ids: np.ndarray
    visible: np.ndarray
    mask: np.ndarray
    radius_map: np.ndarray
    image: np.ndarray | None = None
    root_px: np.ndarray | None = None


@dataclass
class ViewPair:
    imageA: np.ndarray
    imageB: np.ndarray
    camA: CameraModel
    camB: CameraModel
    keypointsA: np.ndarray
    keypointsB: np.ndarray
    gt_matches: np.ndarray
    visibleA: np.ndarray
    visibleB: np.ndarray
    maskA: np.ndarray = field(repr=False, default=None)
    maskB: np.ndarray = field(repr=False, default=None)
    point_idsA: np.ndarray = field(repr=False, default=None)
    point_idsB: np.ndarray = field(repr=False, default=None)


def rasterize_tree(tree: VesselTree, cam: CameraModel, uv=None, depth=None, min_radius_px: float = 0.75):
    """Binary silhouette and per-pixel projected radius (px) of a tree.

    Every parent-child segment is drawn as a capsule whose radius is the
    vessel radius magnified to the detector, floored at ``min_radius_px`` so
    thin branches stay 8-connected.
    """
    if uv is None:
        uv, depth = project_points(cam, tree.points, return_depth=True)
    W, H = cam.image_size
    mask = np.zeros((H, W), dtype=bool)
    rmap = np.zeros((H, W), dtype=float)
    r_px = np.maximum(tree.radii * cam.focal_px / depth, min_radius_px)
    e = tree.edges()
    if len(e) == 0:
        return mask, rmap
    p0, p1 = uv[e[:, 1]], uv[e[:, 0]]
    r0, r1 = r_px[e[:, 1]], r_px[e[:, 0]]
    lo = np.floor(np.minimum(p0, p1) - np.maximum(r0, r1)[:, None]).astype(np.int64)
    hi = np.ceil(np.maximum(p0, p1) + np.maximum(r0, r1)[:, None]).astype(np.int64)
    box = int((hi - lo).max()) + 1
    off = np.arange(box)
    # segments are processed in chunks over a shared box of pixel offsets
    for c in range(0, len(e), 256):
        sl = slice(c, c + 256)
        xs = lo[sl, 0, None, None] + off[None, None, :]
        ys = lo[sl, 1, None, None] + off[None, :, None]
        a, seg = p0[sl], p1[sl] - p0[sl]
        L2 = np.einsum("ij,ij->i", seg, seg)
        dxa = xs - a[:, 0, None, None]
        dya = ys - a[:, 1, None, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            s = (dxa * seg[:, 0, None, None] + dya * seg[:, 1, None, None]) / L2[:, None, None]
        s = np.clip(np.nan_to_num(s, nan=0.0), 0.0, 1.0)
        dx = dxa - s * seg[:, 0, None, None]
        dy = dya - s * seg[:, 1, None, None]
        r = r0[sl, None, None] + s * (r1[sl] - r0[sl])[:, None, None]
        inside = (dx * dx + dy * dy <= r * r) & (xs >= 0) & (xs < W) & (ys >= 0) & (ys < H)
        k, iy, ix = np.nonzero(inside)
        yy, xx = ys[k, iy, 0], xs[k, 0, ix]
        mask[yy, xx] = True
        np.maximum.at(rmap, (yy, xx), r[k, iy, ix])
    return mask, rmap


def project_view(tree: VesselTree, cam: CameraModel, render=None) -> ProjectedView:
    """Project a tree through one camera.

    A point is visible iff its projection falls inside the raster
    ``[0, W-1] x [0, H-1]``; overlapping vessels do not hide keypoints.
    ``render`` is an optional ``(mask, radius_map, root_px) -> image`` callable.
    """
    uv, depth = project_points(cam, tree.points, return_depth=True)
    W, H = cam.image_size
    visible = (uv[:, 0] >= 0) & (uv[:, 0] <= W - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= H - 1)
    ids = np.flatnonzero(visible)
    mask, rmap = rasterize_tree(tree, cam, uv, depth)
    root = int(np.flatnonzero(tree.parent_index < 0)[0])
    view = ProjectedView(
        camera=cam,
        keypoints=uv[ids],
        point_ids=ids,
        visible=visible,
        mask=mask,
        radius_map=rmap,
        root_px=uv[root],
    )
    if render is not None:
        view.image = render(mask, rmap, uv[root])
    return view


def pair_from_views(va: ProjectedView, vb: ProjectedView) -> ViewPair:
    """Ground truth links keypoints that project the same tree point."""
    common, ia, ib = np.intersect1d(va.point_ids, vb.point_ids, assume_unique=True, return_indices=True)
    gt = np.stack([ia, ib], axis=1).astype(np.int64) if len(common) else np.zeros((0, 2), np.int64)
    img_a = va.image if va.image is not None else (va.mask * 255).astype(np.uint8)
    img_b = vb.image if vb.image is not None else (vb.mask * 255).astype(np.uint8)
    return ViewPair(
        imageA=img_a,
        imageB=img_b,
        camA=va.camera,
        camB=vb.camera,
        keypointsA=va.keypoints,
        keypointsB=vb.keypoints,
        gt_matches=gt,
        visibleA=va.visible,
        visibleB=vb.visible,
        maskA=va.mask,
        maskB=vb.mask,
        point_idsA=va.point_ids,
        point_idsB=vb.point_ids,
    )


def project_pair(tree: VesselTree, camA: CameraModel, camB: CameraModel, image_size=None, render=None) -> ViewPair:
    """Project a tree through two cameras and link keypoints sharing a 3D source."""
    if image_size is not None:
        size = (int(image_size[0]), int(image_size[1]))
        if camA.image_size != size or camB.image_size != size:
            raise ValueError(f"camera image sizes {camA.image_size}, {camB.image_size} differ from {size}")
    return pair_from_views(project_view(tree, camA, render), project_view(tree, camB, render))
