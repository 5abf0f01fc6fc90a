"""Matcher parameters and their on-disk format.

Weights file layout (all integers little-endian)::

    magic "AMWT" | version u32 | num_blocks u32 | dim u32 | local_dim u32
    | num_tensors u32 | metadata_len u32 | metadata (utf-8 key=value lines)
    | per tensor: name_len u16, name, ndim u8, dims u32 * ndim
    | tensor data, float32, in table order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..exceptions import FormatError

__all__ = ["MatcherParams", "save_weights", "load_weights", "WEIGHTS_MAGIC", "WEIGHTS_VERSION"]

WEIGHTS_MAGIC = b"AMWT"
WEIGHTS_VERSION = 1
_BLOCK_KINDS = ("self", "cross")
_BLOCK_KEYS = ("Wq", "Wk", "Wv", "W1", "b1", "W2", "b2")


def _shapes(num_blocks: int, d: int, local_dim: int) -> dict:
    s = {
        "lift.W": (local_dim, d),
        "lift.b": (d,),
        "pos.W1": (2, d),
        "pos.b1": (d,),
        "pos.W2": (d, d),
        "pos.b2": (d,),
    }
    for l in range(num_blocks):
        for kind in _BLOCK_KINDS:
            p = f"blocks.{l}.{kind}."
            s[p + "Wq"] = (d, d)
            s[p + "Wk"] = (d, d)
            s[p + "Wv"] = (d, d)
            s[p + "W1"] = (2 * d, 2 * d)
            s[p + "b1"] = (2 * d,)
            s[p + "W2"] = (2 * d, d)
            s[p + "b2"] = (d,)
    s["head.W"] = (d, d)
    s["head.b"] = (d,)
    s["match.w"] = (d, 1)
    s["match.b"] = (1,)
    return s


@dataclass
class MatcherParams:
    """Named weight arrays plus the architecture sizes that shape them."""

    num_blocks: int
    dim: int
    local_dim: int
    tensors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, num_blocks: int = 3, dim: int = 64, local_dim: int = 32, seed: int = 0) -> "MatcherParams":
        """Scaled-normal initialization; biases start at zero.

        Residual MLP outputs start small so every block begins close to identity.
        """
        if num_blocks < 0 or dim < 1 or local_dim < 1:
            raise ValueError("num_blocks >= 0, dim >= 1 and local_dim >= 1 required")
        rng = np.random.default_rng(seed)
        out = {}
        for name, shape in _shapes(num_blocks, dim, local_dim).items():
            if len(shape) == 1:
                out[name] = np.zeros(shape)
                continue
            std = 1.0 / np.sqrt(shape[0])
            if name.endswith(".W2") and name.startswith("blocks."):
                std *= 0.5
            if name == "lift.W":
                std = 1.0
            out[name] = rng.normal(0.0, std, shape)
        return cls(num_blocks, dim, local_dim, out)

    @classmethod
    def zeros(cls, num_blocks: int, dim: int, local_dim: int = 32) -> "MatcherParams":
        return cls(num_blocks, dim, local_dim, {k: np.zeros(s) for k, s in _shapes(num_blocks, dim, local_dim).items()})

    def expected_shapes(self) -> dict:
        return _shapes(self.num_blocks, self.dim, self.local_dim)

    def validate(self) -> None:
        exp = self.expected_shapes()
        if set(exp) != set(self.tensors):
            missing = sorted(set(exp) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(exp))
            raise ValueError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for k, s in exp.items():
            if self.tensors[k].shape != s:
                raise ValueError(f"{k} has shape {self.tensors[k].shape}, expected {s}")
            if not np.all(np.isfinite(self.tensors[k])):
                raise ValueError(f"{k} contains non-finite values")

    def names(self) -> list:
        return list(self.expected_shapes())

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def copy(self) -> "MatcherParams":
        return MatcherParams(self.num_blocks, self.dim, self.local_dim, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "MatcherParams":
        return MatcherParams(
            self.num_blocks, self.dim, self.local_dim, {k: v.astype(dtype) for k, v in self.tensors.items()}
        )

    def as_tensors(self, requires_grad: bool = True) -> dict:
        return {k: ad.Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.tensors.items()}

    @staticmethod
    def block(values: dict, l: int, kind: str) -> dict:
        """Sub-dictionary of one attention block, keyed without the prefix."""
        p = f"blocks.{l}.{kind}."
        return {k: values[p + k] for k in _BLOCK_KEYS}

    @staticmethod
    def group(values: dict, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p) :]: v for k, v in values.items() if k.startswith(p)}


_HEAD = struct.Struct("<4sIIIIII")


def save_weights(path, params: MatcherParams, metadata: dict | None = None) -> None:
    params.validate()
    meta = "".join(f"{k}={v}\n" for k, v in sorted((metadata or {}).items())).encode("utf-8")
    names = params.names()
    parts = [_HEAD.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, params.num_blocks, params.dim, params.local_dim, len(names), len(meta)), meta]
    for n in names:
        b = n.encode("utf-8")
        shape = params.tensors[n].shape
        parts.append(struct.pack("<H", len(b)) + b + struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
    for n in names:
        parts.append(np.ascontiguousarray(params.tensors[n], dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_weights(path, with_metadata: bool = False):
    """Read a weights file; values come back as float64 arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEAD.size:
        raise FormatError("truncated weights header", path)
    magic, version, nb, d, ld, nt, ml = _HEAD.unpack_from(raw)
    if magic != WEIGHTS_MAGIC:
        raise FormatError("not a weights file (bad magic)", path)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}", path)
    off = _HEAD.size
    try:
        meta_txt = raw[off : off + ml].decode("utf-8")
        off += ml
        table = []
        for _ in range(nt):
            (nl,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nl].decode("utf-8")
            off += nl
            (nd,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{nd}I", raw, off)
            off += 4 * nd
            table.append((name, shape))
        tensors = {}
        for name, shape in table:
            n = int(np.prod(shape, dtype=np.int64))
            if off + 4 * n > len(raw):
                raise FormatError(f"tensor {name} runs past end of file", path)
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 4 * n
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt weights table: {exc}", path) from exc
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes after tensor data", path)
    params = MatcherParams(nb, d, ld, tensors)
    try:
        params.validate()
    except ValueError as exc:
        raise FormatError(str(exc), path) from exc
    if not with_metadata:
        return params
    meta = {}
    for line in meta_txt.splitlines():
        if line:
            k, _, v = line.partition("=")
            meta[k] = v
    return params, meta
