"""Flat ``key=value`` pipeline configuration.

A config file holds one ``key=value`` per line; ``#`` starts a comment.
Command-line ``--key value`` overrides are applied on top, and every value
is checked against its documented range.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .exceptions import ConfigError
from .matcher.layers import MASKING_MODES
from .vesselgen import PERTURBATION_PATTERNS, VesselClass

__all__ = ["PipelineConfig", "load_config", "parse_config_text", "parse_subjects", "read_angle_table"]


@dataclass(frozen=True)
class PipelineConfig:
    # paths
    data_dir: str = "data"
    out_dir: str = "out"
    weights: str = "weights.amw"
    angle_table: str = ""  # empty: built-in table
    # generation
    subjects: int = 25
    classes: str = "LAD,LCX,RCA"
    min_separation: float = 25.0
    image_size: int = 512
    pixel_spacing: float = 0.3
    # matcher
    num_blocks: int = 3
    dim: int = 64
    tau: float = 0.1
    k_percent: float = 20.0
    guidance: bool = True
    masking: str = "multiply"
    lr: float = 1e-4
    epochs: int = 5
    batch_size: int = 4
    optimizer: str = "adam"
    max_keypoints: int = 256
    max_steps: int = 0
    # splits and sampling
    train_subjects: str = "0-19"
    test_subjects: str = "20-24"
    max_train_pairs: int = 2000
    max_eval_pairs: int = 0  # 0 means all
    # evaluation
    match_thresholds: str = "1,3"
    pose_thresholds: str = "15,30"
    ransac_threshold: float = 1.0
    compute_pose: bool = True
    methods: str = "guided,mnn"

    def validate(self) -> "PipelineConfig":
        try:
            classes = [VesselClass(c).value for c in self.class_list()]
        except ValueError as exc:
            raise ConfigError(f"unknown vessel class in {self.classes!r}") from exc
        checks = [
            (self.subjects >= 0, "subjects must be >= 0"),
            (len(classes) > 0, "classes must not be empty"),
            (0 <= self.min_separation < 180, "min_separation must lie in [0, 180)"),
            (self.image_size >= 32, "image_size must be >= 32"),
            (self.pixel_spacing > 0, "pixel_spacing must be positive"),
            (self.num_blocks >= 0, "num_blocks must be >= 0"),
            (self.dim >= 1, "dim must be >= 1"),
            (0 <= self.tau < 1, "tau must lie in [0, 1)"),
            (0 < self.k_percent <= 100, "k_percent must lie in (0, 100]"),
            (self.masking in MASKING_MODES, f"masking must be one of {', '.join(MASKING_MODES)}"),
            (self.lr > 0 and math.isfinite(self.lr), "lr must be positive"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.optimizer in ("adam", "sgd"), "optimizer must be adam or sgd"),
            (self.max_keypoints >= 2, "max_keypoints must be >= 2"),
            (self.max_steps >= 0, "max_steps must be >= 0"),
            (self.max_train_pairs >= 0, "max_train_pairs must be >= 0"),
            (self.max_eval_pairs >= 0, "max_eval_pairs must be >= 0"),
            (self.ransac_threshold > 0, "ransac_threshold must be positive"),
            (all(t > 0 for t in self.match_threshold_list()), "match thresholds must be positive"),
            (all(0 < t <= 180 for t in self.pose_threshold_list()), "pose thresholds must lie in (0, 180]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        parse_subjects(self.train_subjects)
        parse_subjects(self.test_subjects)
        for m in self.method_list():
            if m not in ("guided", "unguided", "mnn", "mnn-global"):
                raise ConfigError(f"unknown method {m!r}")
        return self

    def class_list(self) -> list:
        return [c.strip() for c in self.classes.split(",") if c.strip()]

    def method_list(self) -> list:
        return [m.strip() for m in self.methods.split(",") if m.strip()]

    def match_threshold_list(self) -> list:
        return _floats(self.match_thresholds, "match_thresholds")

    def pose_threshold_list(self) -> list:
        return _floats(self.pose_thresholds, "pose_thresholds")

    def to_text(self) -> str:
        return "".join(f"{f.name}={_render(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        return replace(self, **_coerce_all(overrides)).validate()


def _floats(text, name):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"{name} must be a comma separated list of numbers") from exc


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(key, value):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if kind == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r} (expected {kind})") from exc
    return text


def _coerce_all(d):
    return {k: _coerce(k, v) for k, v in d.items()}


def parse_config_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_config_text(text))
    values.update(overrides or {})
    return PipelineConfig().with_overrides(values)


def parse_subjects(spec: str) -> list:
    """``"0-19"`` or ``"0,3,5-7"`` to a sorted list of subject indices."""
    out = set()
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                a, b = (int(x) for x in part.split("-", 1))
                if b < a:
                    raise ValueError(part)
                out.update(range(a, b + 1))
            else:
                out.add(int(part))
        except ValueError as exc:
            raise ConfigError(f"bad subject list {spec!r}") from exc
    if any(s < 0 for s in out):
        raise ConfigError(f"negative subject index in {spec!r}")
    return sorted(out)


def read_angle_table(path) -> dict:
    """Angle table file: lines ``CLASS lao cra pattern``, ``#`` comments allowed."""
    table: dict = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read angle table {path}: {exc}") from exc
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].split()
        if not line:
            continue
        try:
            vc, lao, cra, pattern = line
            vc = VesselClass(vc)
            entry = (float(lao), float(cra), pattern)
        except ValueError as exc:
            raise ConfigError(f"{path}:{n}: expected 'CLASS lao cra pattern'") from exc
        if pattern not in PERTURBATION_PATTERNS:
            raise ConfigError(f"{path}:{n}: unknown pattern {pattern!r}")
        table.setdefault(vc, []).append(entry)
    return table
