"""Synthetic dataset generation and its on-disk layout.

Layout under the dataset root::

    manifest.txt
    subject_<id>/<class>/view_<k>.pgm      rendered 8-bit image
    subject_<id>/<class>/view_<k>.cam      camera record (key=value)
    subject_<id>/<class>/view_<k>.kp.csv   idx,x,y,point_id
    subject_<id>/<class>/pairs.csv         viewA,viewB
    subject_<id>/<class>/gt_<a>_<b>.csv    idxA,idxB,xA,yA,xB,yB

Seeds: the tree of (subject s, class c) uses ``derive_int(seed, "tree", s, c)``
and the render of view k uses ``derive_int(seed, "render", s, c, k)``, so any
subject can be produced alone or in parallel with identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._seeding import derive_int
from .exceptions import FormatError
from .geometry import CameraModel, camera_from_text, camera_to_text, make_camera
from .imagesynth import procedural_render
from .vesselgen import (
    DEFAULT_ANGLE_TABLE,
    VesselClass,
    generate_tree,
    make_pairs,
    pair_from_views,
    project_view,
    sample_view_angles,
)

__all__ = [
    "GenerationConfig",
    "ClassViews",
    "generate_subject",
    "write_dataset",
    "read_manifest",
    "load_dataset",
    "DatasetView",
    "DatasetClass",
    "write_pgm",
    "read_pgm",
    "write_keypoints",
    "read_keypoints",
    "read_gt",
    "write_csv_rows",
]

GENERATOR_VERSION = "1"


@dataclass(frozen=True)
class GenerationConfig:
    subjects: int = 1
    seed: int = 0
    classes: tuple = ("LAD", "LCX", "RCA")
    min_separation: float = 25.0
    image_size: int = 512
    pixel_spacing: float = 0.3
    sid: float = 1000.0
    sod: float = 800.0
    angle_table: dict | None = None

    def table(self) -> dict:
        return self.angle_table if self.angle_table is not None else DEFAULT_ANGLE_TABLE

    def digest(self) -> str:
        items = [
            f"subjects={self.subjects}",
            f"seed={self.seed}",
            f"classes={','.join(self.classes)}",
            f"min_separation={self.min_separation!r}",
            f"image_size={self.image_size}",
            f"pixel_spacing={self.pixel_spacing!r}",
            f"sid={self.sid!r}",
            f"sod={self.sod!r}",
            f"angle_table={sorted((str(k), v) for k, v in self.table().items())!r}",
        ]
        return hashlib.sha256("\n".join(items).encode()).hexdigest()[:16]


@dataclass
class ClassViews:
    vessel_class: VesselClass
    views: list  # ProjectedView with image
    pairs: list  # (i, j)
    tree: object = field(default=None, repr=False)


def _class_index(vc) -> int:
    return list(VesselClass).index(VesselClass(vc))


def generate_subject(subject: int, cfg: GenerationConfig) -> list:
    """Trees, rendered views and view pairs of every configured class for one subject."""
    out = []
    for name in cfg.classes:
        vc = VesselClass(name)
        c = _class_index(vc)
        tree = generate_tree(vc, derive_int(cfg.seed, "tree", subject, c))
        angs = sample_view_angles(vc, cfg.table())
        views = []
        for k, ang in enumerate(angs):
            cam = make_camera(ang, sid=cfg.sid, sod=cfg.sod, pixel_spacing=cfg.pixel_spacing, image_size=(cfg.image_size, cfg.image_size))
            rseed = derive_int(cfg.seed, "render", subject, c, k)
            views.append(project_view(tree, cam, render=lambda m, r, root, s=rseed: procedural_render(m, r, s, inlet=root)))
        out.append(ClassViews(vc, views, make_pairs(angs, cfg.min_separation), tree))
    return out


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_pgm(path, image) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("PGM output needs a 2D uint8 raster")
    Image.fromarray(img).save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise FormatError(f"expected 8-bit grayscale, found mode {im.mode}", path)
            return np.array(im)
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"unreadable image: {exc}", path) from exc


def write_csv_rows(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def _read_csv(path, header):
    """Rows of a headered CSV as lists of strings; errors carry 1-based line numbers."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"cannot read: {exc}", path) from exc
    if not rows or [c.strip() for c in rows[0]] != list(header):
        raise FormatError(f"expected header {','.join(header)}", path, 1)
    out = []
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise FormatError(f"expected {len(header)} fields, found {len(row)}", path, ln)
        out.append((ln, row))
    return out


def _num(value, kind, path, line):
    try:
        v = kind(value)
    except ValueError:
        raise FormatError(f"not a valid {kind.__name__}: {value!r}", path, line) from None
    if kind is float and not np.isfinite(v):
        raise FormatError(f"non-finite value {value!r}", path, line)
    return v


def write_keypoints(path, keypoints, point_ids=None) -> None:
    kp = np.asarray(keypoints, dtype=float).reshape(-1, 2)
    ids = np.arange(len(kp)) if point_ids is None else np.asarray(point_ids)
    write_csv_rows(path, ("idx", "x", "y", "point_id"), [(i, repr(float(x)), repr(float(y)), int(p)) for i, ((x, y), p) in enumerate(zip(kp, ids))])


def read_keypoints(path):
    """``(keypoints (n, 2), point_ids (n,))``; rows must be numbered 0..n-1.

    A file with only ``x,y`` columns is also accepted (point ids default to
    the row index).
    """
    try:
        with open(path, encoding="utf-8") as fh:
            first = fh.readline().strip()
    except OSError as exc:
        raise FormatError(f"cannot read: {exc}", path) from exc
    if [c.strip() for c in first.split(",")] == ["x", "y"]:
        rows = _read_csv(path, ("x", "y"))
        kp = np.array([[_num(r[0], float, path, ln), _num(r[1], float, path, ln)] for ln, r in rows]).reshape(-1, 2)
        return kp, np.arange(len(kp))
    rows = _read_csv(path, ("idx", "x", "y", "point_id"))
    kp, ids = [], []
    for k, (ln, r) in enumerate(rows):
        if _num(r[0], int, path, ln) != k:
            raise FormatError(f"keypoint index {r[0]} out of sequence (expected {k})", path, ln)
        kp.append((_num(r[1], float, path, ln), _num(r[2], float, path, ln)))
        ids.append(_num(r[3], int, path, ln))
    return np.array(kp, dtype=float).reshape(-1, 2), np.array(ids, dtype=np.int64)


def read_gt(path) -> np.ndarray:
    rows = _read_csv(path, ("idxA", "idxB", "xA", "yA", "xB", "yB"))
    return np.array([[_num(r[0], int, path, ln), _num(r[1], int, path, ln)] for ln, r in rows], dtype=np.int64).reshape(-1, 2)


def _write_subject(root: Path, subject: int, classes) -> int:
    n = 0
    for cv in classes:
        d = root / f"subject_{subject:03d}" / cv.vessel_class.value
        d.mkdir(parents=True, exist_ok=True)
        for k, v in enumerate(cv.views):
            write_pgm(d / f"view_{k:02d}.pgm", v.image)
            (d / f"view_{k:02d}.cam").write_text(camera_to_text(v.camera), encoding="utf-8")
            write_keypoints(d / f"view_{k:02d}.kp.csv", v.keypoints, v.point_ids)
        write_csv_rows(d / "pairs.csv", ("viewA", "viewB"), cv.pairs)
        for a, b in cv.pairs:
            p = pair_from_views(cv.views[a], cv.views[b])
            ka, kb = p.keypointsA, p.keypointsB
            rows = [
                (int(i), int(j), repr(float(ka[i, 0])), repr(float(ka[i, 1])), repr(float(kb[j, 0])), repr(float(kb[j, 1])))
                for i, j in p.gt_matches
            ]
            write_csv_rows(d / f"gt_{a:02d}_{b:02d}.csv", ("idxA", "idxB", "xA", "yA", "xB", "yB"), rows)
        n += len(cv.pairs)
    return n


def _gen_task(args):
    subject, cfg = args
    return generate_subject(subject, cfg)


def write_dataset(out_dir, cfg: GenerationConfig, jobs: int = 1) -> dict:
    """Generate ``cfg.subjects`` subjects under ``out_dir`` and write the manifest.

    Subjects are generated by up to ``jobs`` worker processes; files are
    written by the calling process in subject order.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    tasks = [(s, cfg) for s in range(cfg.subjects)]
    per_class = {c: 0 for c in cfg.classes}
    total = 0
    views = 0

    def consume(s, classes):
        nonlocal total, views
        total += _write_subject(root, s, classes)
        for cv in classes:
            per_class[cv.vessel_class.value] += len(cv.pairs)
            views += len(cv.views)

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for (s, _), classes in zip(tasks, ex.map(_gen_task, tasks)):
                consume(s, classes)
    else:
        for t in tasks:
            consume(t[0], _gen_task(t))

    manifest = {
        "generator_version": GENERATOR_VERSION,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "subjects": cfg.subjects,
        "classes": ",".join(cfg.classes),
        "min_separation": repr(cfg.min_separation),
        "image_size": cfg.image_size,
        "pixel_spacing": repr(cfg.pixel_spacing),
        "num_views": views,
        "num_pairs": total,
    }
    for c, n in per_class.items():
        manifest[f"num_pairs_{c}"] = n
    (root / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()), encoding="utf-8")
    return manifest


def read_manifest(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.txt"
    out = {}
    try:
        lines = p.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read manifest: {exc}", p) from exc
    for ln, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError("expected key=value", p, ln)
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


@dataclass
class DatasetView:
    image_path: Path
    camera: CameraModel
    keypoints: np.ndarray
    point_ids: np.ndarray

    def image(self) -> np.ndarray:
        return read_pgm(self.image_path)


@dataclass
class DatasetClass:
    subject: int
    vessel_class: str
    directory: Path
    views: list
    pairs: list

    def gt(self, a: int, b: int) -> np.ndarray:
        return read_gt(self.directory / f"gt_{a:02d}_{b:02d}.csv")


def load_dataset(root, subjects=None) -> list:
    """Index a dataset directory into :class:`DatasetClass` records (images load lazily)."""
    root = Path(root)
    if not (root / "manifest.txt").exists():
        raise FormatError("missing manifest.txt", root)
    out = []
    for sd in sorted(root.glob("subject_*")):
        try:
            sid = int(sd.name.split("_", 1)[1])
        except ValueError:
            raise FormatError("bad subject directory name", sd) from None
        if subjects is not None and sid not in subjects:
            continue
        for cd in sorted(p for p in sd.iterdir() if p.is_dir()):
            views = []
            k = 0
            while (cd / f"view_{k:02d}.pgm").exists():
                cam_path = cd / f"view_{k:02d}.cam"
                cam = camera_from_text(cam_path.read_text(encoding="utf-8"), path=cam_path)
                kp, ids = read_keypoints(cd / f"view_{k:02d}.kp.csv")
                views.append(DatasetView(cd / f"view_{k:02d}.pgm", cam, kp, ids))
                k += 1
            rows = _read_csv(cd / "pairs.csv", ("viewA", "viewB"))
            pairs = [(_num(r[0], int, cd / "pairs.csv", ln), _num(r[1], int, cd / "pairs.csv", ln)) for ln, r in rows]
            out.append(DatasetClass(sid, cd.name, cd, views, pairs))
    return out
