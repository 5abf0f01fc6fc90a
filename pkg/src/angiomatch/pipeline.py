"""Glue from a dataset directory to matcher training and evaluation inputs."""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ._seeding import derive_rng
from .dataset import load_dataset
from .descriptors import DescriptorSet, describe
from .evaluation import BenchmarkPair
from .matcher.model import PairSample

__all__ = ["describe_views", "build_pairs", "split_subjects"]


# bump when descriptor extraction changes so stale cache entries are ignored
DESCRIPTOR_VERSION = "2"


def _cache_key(path, keypoints) -> str:
    h = hashlib.sha256(DESCRIPTOR_VERSION.encode())
    h.update(Path(path).read_bytes())
    h.update(np.ascontiguousarray(keypoints, dtype=np.float64).tobytes())
    return h.hexdigest()[:32]


def _describe_one(args):
    path, keypoints, cache_dir = args
    from .dataset import read_pgm

    if cache_dir is None:
        return describe(read_pgm(path), keypoints)
    entry = Path(cache_dir) / (_cache_key(path, keypoints) + ".npz")
    if entry.exists():
        with np.load(entry) as z:
            return DescriptorSet(z["keypoints"], z["local"], z["global_"], tuple(int(v) for v in z["image_size"]))
    d = describe(read_pgm(path), keypoints)
    tmp = str(entry) + f".{os.getpid()}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, keypoints=d.keypoints, local=d.local, global_=d.global_, image_size=np.array(d.image_size))
    os.replace(tmp, entry)
    return d


def describe_views(classes, jobs: int = 1, cache_dir=None) -> dict:
    """Descriptors for every view, keyed by ``(subject, class, view)``.

    With ``cache_dir`` descriptors are stored under a hash of the image bytes
    and keypoints, so repeated runs skip extraction.
    """
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    keys, tasks = [], []
    for dc in classes:
        for k, v in enumerate(dc.views):
            keys.append((dc.subject, dc.vessel_class, k))
            tasks.append((v.image_path, v.keypoints, cache_dir))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            descs = list(ex.map(_describe_one, tasks, chunksize=8))
    else:
        descs = [_describe_one(t) for t in tasks]
    return dict(zip(keys, descs))


def build_pairs(classes, descriptors: dict, max_pairs: int | None = None, seed: int = 0) -> list:
    """Benchmark pairs (sample + cameras) for every listed view pair.

    With ``max_pairs`` a seeded subset is kept, in dataset order.
    """
    index = [(dc, a, b) for dc in classes for a, b in dc.pairs]
    if max_pairs is not None and len(index) > max_pairs:
        keep = np.sort(derive_rng(seed, "pairs").choice(len(index), size=max_pairs, replace=False))
        index = [index[i] for i in keep]
    out = []
    for dc, a, b in index:
        dA = descriptors[(dc.subject, dc.vessel_class, a)]
        dB = descriptors[(dc.subject, dc.vessel_class, b)]
        sample = PairSample(dA, dB, dc.gt(a, b))
        out.append(BenchmarkPair(sample, dc.views[a].camera, dc.views[b].camera, f"{dc.subject:03d}/{dc.vessel_class}/{a:02d}-{b:02d}"))
    return out


def split_subjects(root, train_subjects, test_subjects):
    """Load the two subject groups of a dataset."""
    return load_dataset(root, subjects=set(train_subjects)), load_dataset(root, subjects=set(test_subjects))
