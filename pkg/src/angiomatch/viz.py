"""Match overlays and PCA false-color rasters as PNG files."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .evaluation import pca_rgb
from .metrics import symmetric_epipolar_errors

__all__ = ["match_overlay", "save_match_overlay", "save_pca_png"]

GREEN = (0, 220, 0)
RED = (230, 40, 40)


def _rgb(image) -> Image.Image:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return Image.fromarray(img).convert("RGB")


def match_overlay(imageA, imageB, kpA, kpB, matches, correct=None, F=None) -> Image.Image:
    """Side-by-side views with matched keypoints as green dots joined by lines.

    ``correct`` (bool per match) draws wrong matches in red. With a
    fundamental matrix ``F`` the mean symmetric epipolar error is printed.
    """
    a, b = _rgb(imageA), _rgb(imageB)
    canvas = Image.new("RGB", (a.width + b.width, max(a.height, b.height)))
    canvas.paste(a, (0, 0))
    canvas.paste(b, (a.width, 0))
    draw = ImageDraw.Draw(canvas)
    m = np.asarray(matches, dtype=float).reshape(-1, 3) if len(matches) else np.zeros((0, 3))
    idx = m[:, :2].astype(np.int64)
    pa = np.asarray(kpA, dtype=float)[idx[:, 0]] if len(idx) else np.zeros((0, 2))
    pb = np.asarray(kpB, dtype=float)[idx[:, 1]] if len(idx) else np.zeros((0, 2))
    ok = np.ones(len(idx), bool) if correct is None else np.asarray(correct, bool)
    for (xa, ya), (xb, yb), good in zip(pa.tolist(), pb.tolist(), ok.tolist()):
        color = GREEN if good else RED
        xb += a.width
        draw.line([(xa, ya), (xb, yb)], fill=color, width=1)
        for x, y in ((xa, ya), (xb, yb)):
            draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=GREEN)
    label = f"{len(idx)} matches"
    if F is not None and len(idx):
        label += f", mean epipolar error {float(np.mean(symmetric_epipolar_errors(F, pa, pb))):.2f} px"
    draw.rectangle([0, 0, 8 + 6 * len(label), 14], fill=(0, 0, 0))
    draw.text((4, 2), label, fill=(255, 255, 255))
    return canvas


def save_match_overlay(path, *args, **kwargs) -> None:
    match_overlay(*args, **kwargs).save(path, format="PNG")


def save_pca_png(path, fmap, upscale: int = 1) -> None:
    """PNG of the top three principal components; raises DegenerateCovariance on constant maps."""
    img = Image.fromarray(pca_rgb(fmap), "RGB")
    if upscale > 1:
        img = img.resize((img.width * upscale, img.height * upscale), Image.NEAREST)
    img.save(path, format="PNG")
