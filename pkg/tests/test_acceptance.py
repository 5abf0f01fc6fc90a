"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line that pytest prints in its terminal
summary under "acceptance criteria".
"""

import hashlib
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

import oracles
from auc_oracle import auc_oracle
from scenes import ransac_scene
from test_matcher import block, desc_set, toy_pair
from angiomatch.cli import main
from angiomatch.dataset import GenerationConfig, load_dataset, read_manifest, write_dataset
from angiomatch.evaluation import mnn_baseline, run_benchmark
from angiomatch.geometry import estimate_pose_ransac, fundamental_from_cameras, rotation_error
from angiomatch.imagesynth import AnalyticGaussianDenoiser, build_schedule, forward_sample, generate
from angiomatch.matcher import (
    GuidedMatcher,
    MatcherParams,
    assignment,
    cross_attention_update,
    forward,
    guidance_mask,
    guidance_similarity,
    loss_and_grads,
    matchability,
    self_attention_update,
    similarity_matrix,
)
from angiomatch.metrics import match_auc, pose_auc, symmetric_epipolar_errors
from angiomatch.pipeline import build_pairs, describe_views


def test_c1_gradients_match_finite_differences(report_criterion):
    t0 = time.perf_counter()
    worst, worst_at = 0.0, None
    for inst in range(20):
        rng = np.random.default_rng(1000 + inst)
        nb, d = int(rng.integers(1, 3)), int(rng.integers(2, 17))
        M, N = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        s = toy_pair(rng, M, N, 8, int(rng.integers(1, min(M, N) + 1)))
        # initialization plus a perturbation keeps the loss off its log floor
        p = MatcherParams.init(nb, d, 8, seed=inst)
        for k in p.tensors:
            p.tensors[k] = p.tensors[k] + rng.normal(0, 0.1, p.tensors[k].shape)
        masking = ("multiply", "exclude")[inst % 2]
        _, grads = loss_and_grads(p, s, True, 50.0, masking)
        for name, v in p.tensors.items():
            flat = v.reshape(-1)
            fd, an = [], []
            for i in rng.choice(flat.size, min(flat.size, 8), replace=False):
                orig, h = flat[i], 1e-5
                flat[i] = orig + h
                lp, _ = loss_and_grads(p, s, True, 50.0, masking)
                flat[i] = orig - h
                lm, _ = loss_and_grads(p, s, True, 50.0, masking)
                flat[i] = orig
                fd.append((lp - lm) / (2 * h))
                an.append(grads[name].reshape(-1)[i])
            fd, an = np.array(fd), np.array(an)
            scale = max(np.linalg.norm(fd), np.linalg.norm(an))
            rel = np.linalg.norm(fd - an) / scale if scale > 0 else 0.0
            if rel > worst:
                worst, worst_at = rel, (inst, name)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    report_criterion(1, ok, f"max relative error {worst:.2e} at {worst_at}, {elapsed:.1f} s")
    assert worst < 1e-4
    assert elapsed < 60


def test_c2_formulas_match_brute_force(report_criterion):
    rng = np.random.default_rng(2)
    err = {}

    def note(key, a, b):
        err[key] = max(err.get(key, 0.0), float(np.max(np.abs(np.asarray(a, float) - np.asarray(b, float)))))

    for _ in range(20):
        d = int(rng.integers(2, 6))
        M, N = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        bp = block(rng, d)
        x, p, y = rng.normal(size=(M, d)), rng.normal(size=(M, d)), rng.normal(size=(N, d))
        note("self attention (5-7)", self_attention_update(x, p, bp), oracles.self_attention(x, p, bp))
        note("cross attention (8-10)", cross_attention_update(x, y, bp), oracles.cross_attention(x, y, bp))
        W, b = rng.normal(size=(d, d)), rng.normal(size=d)
        note("similarity (11)", similarity_matrix(x, y, {"W": W, "b": b}), oracles.similarity(x, y, W, b))
        w, wb = rng.normal(size=(d, 1)), rng.normal(size=1)
        note("matchability (12)", matchability(x, {"w": w, "b": wb}), oracles.matchability(x, w, wb))
        S, sA, sB = rng.normal(size=(M, N)), rng.random(M), rng.random(N)
        note("assignment (13)", assignment(S, sA, sB), oracles.assignment(S, sA, sB))
        gA, gB = rng.normal(size=(M, 5)), rng.normal(size=(N, 5))
        G = guidance_similarity(gA, gB)
        note("global similarity (14)", G, oracles.cosine_matrix(gA, gB))
        k = float(rng.uniform(1, 100))
        mask = guidance_mask(G, k)
        note("top-k mask (15)", mask, oracles.topk_mask(G, k))
        for masking in ("multiply", "exclude"):
            note(f"masked cross attention (16, {masking})", cross_attention_update(x, y, bp, mask, masking),
                 oracles.cross_attention(x, y, bp, mask, masking))
    worst = max(err.values())
    report_criterion(2, worst <= 1e-12, f"max abs deviation {worst:.1e} over {len(err)} formula groups")
    for key, v in err.items():
        assert v <= 1e-12, key


def test_c3_full_guidance_is_a_no_op(report_criterion):
    rng = np.random.default_rng(3)
    same = 0
    for inst in range(50):
        M, N = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        dA, dB = desc_set(rng, M, 8), desc_set(rng, N, 8)
        params = MatcherParams.init(int(rng.integers(1, 4)), int(rng.integers(2, 12)), 8, seed=inst)
        if inst % 2:
            params = params.astype(np.float32)
        masking = ("multiply", "exclude")[inst % 3 == 0]
        a = forward(params, dA, dB, guidance=True, k_percent=100, masking=masking)
        b = forward(params, dA, dB, guidance=False, masking=masking)
        same += bool(np.array_equal(a.P, b.P) and np.array_equal(a.S, b.S) and np.array_equal(a.matches, b.matches))
    report_criterion(3, same == 50, f"{same}/50 instances bit-identical")
    assert same == 50


@pytest.fixture(scope="module")
def one_subject(tmp_path_factory):
    root = tmp_path_factory.mktemp("engine")
    write_dataset(root, GenerationConfig(subjects=1, seed=21))
    return root


def test_c5_ground_truth_is_epipolar_consistent(one_subject, report_criterion):
    worst, total, pairs = 0.0, 0, 0
    for dc in load_dataset(one_subject):
        for a, b in dc.pairs:
            gt = dc.gt(a, b)
            va, vb = dc.views[a], dc.views[b]
            F = fundamental_from_cameras(va.camera, vb.camera)
            e = symmetric_epipolar_errors(F, va.keypoints[gt[:, 0]], vb.keypoints[gt[:, 1]])
            worst = max(worst, float(e.max()))
            total += len(e)
            pairs += 1
    man = read_manifest(one_subject)
    ok = worst < 1e-6 and pairs == 350 and man["num_pairs"] == "350"
    report_criterion(5, ok, f"{pairs} pairs, {total} correspondences, max symmetric epipolar error {worst:.1e} px")
    assert pairs == 350 and man["num_pairs"] == "350"
    assert worst < 1e-6


def test_c6_ransac_robustness(report_criterion):
    # generic pinhole scene: f = 500 px, depth 3-10, 5-15 deg rotation, unit baseline;
    # threshold 2 px is twice the noise level
    good = 0
    for trial in range(100):
        a, b, K, R = ransac_scene(trial)
        est = estimate_pose_ransac(a, b, K, K, threshold=2.0, seed=trial)
        good += rotation_error(est.rotation, R) < 2.0
    exact = []
    for trial in range(10):
        a, b, K, R = ransac_scene(500 + trial, noise=0.0, outlier_frac=0.0)
        exact.append(rotation_error(estimate_pose_ransac(a, b, K, K, seed=trial).rotation, R))
    ok = good >= 95 and max(exact) < 0.1
    report_criterion(6, ok, f"{good}/100 trials under 2 deg; exact-input max error {max(exact):.2e} deg")
    assert good >= 95
    assert max(exact) < 0.1


def test_c7_diffusion_statistics(report_criterion):
    t0 = time.perf_counter()
    s = build_schedule(100)
    mu, sd = 1.5, 0.5
    x = generate(None, AnalyticGaussianDenoiser(s, mu, sd), s, seed=7, shape=(10_000,))
    mean_rel = abs(x.mean() - mu) / mu
    var_rel = abs(x.var() - sd**2) / sd**2
    n = 10_000
    z_worst = 0.0
    for t in (1, 10, 50, 90, 100):
        for x0 in (0.0, 1.7):
            xt = forward_sample(np.full(n, x0), t, s, seed=100 + t)
            m, v = math.sqrt(s.abar(t)) * x0, 1 - s.abar(t)
            z_worst = max(z_worst, abs(xt.mean() - m) / math.sqrt(v / n), abs(xt.var(ddof=1) - v) / (v * math.sqrt(2 / (n - 1))))
    elapsed = time.perf_counter() - t0
    ok = mean_rel < 0.05 and var_rel < 0.05 and z_worst < 4 and elapsed < 120
    report_criterion(7, ok, f"reverse chain mean off {mean_rel:.2%}, variance off {var_rel:.2%}; "
                            f"forward moments within {z_worst:.2f} standard errors; {elapsed:.1f} s")
    assert mean_rel < 0.05 and var_rel < 0.05
    assert z_worst < 4
    assert elapsed < 120


def test_c8_metric_oracles(report_criterion):
    rng = np.random.default_rng(8)
    worst = 0.0
    for k in range(200):
        n = int(rng.integers(1, 40))
        e = rng.exponential(2.0, n)
        e[rng.random(n) < 0.2] = np.inf
        for t in (1.0, 3.0):
            worst = max(worst, abs(match_auc(e, t) - auc_oracle(e, t)))
        r = np.minimum(rng.exponential(20.0, n), 180.0)
        for t in (15.0, 30.0):
            worst = max(worst, abs(pose_auc(r, t) - auc_oracle(r, t)))
    degenerate = [match_auc(np.zeros(5), 3.0) == 1.0, pose_auc(np.zeros(5), 15.0) == 1.0,
                  match_auc(np.full(5, np.inf), 3.0) == 0.0, pose_auc(np.full(5, 180.0), 30.0) == 0.0]
    ok = worst < 1e-9 and all(degenerate)
    report_criterion(8, ok, f"max deviation from quadrature {worst:.1e}; degenerate cases {sum(degenerate)}/4 exact")
    assert worst < 1e-9
    assert all(degenerate)


def _digest_tree(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c9_commands_are_deterministic(tmp_path, monkeypatch, report_criterion):
    monkeypatch.chdir(tmp_path)
    common = ["--seed", "4", "--subjects", "1", "--classes", "LCX", "--train-subjects", "0", "--test-subjects", "0",
              "--num-blocks", "2", "--dim", "16", "--max-keypoints", "96", "--batch-size", "2", "--max-steps", "6",
              "--max-train-pairs", "12", "--max-eval-pairs", "6", "--methods", "guided,unguided,mnn"]
    runs = []
    for name in ("first", "second"):
        Path(name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        assert main(["gen-data", *common]) == 0
        assert main(["train", *common]) == 0
        assert main(["eval", *common]) == 0
        runs.append(_digest_tree(tmp_path / name))
        monkeypatch.chdir(tmp_path)
    differ = sorted(k for k in runs[0].keys() | runs[1].keys() if runs[0].get(k) != runs[1].get(k))
    report_criterion(9, not differ, f"{len(runs[0])} output files compared, {len(differ)} differ")
    assert not differ


def test_c10_matching_throughput(report_criterion):
    rng = np.random.default_rng(10)
    params = MatcherParams.init(9, 256, 32, seed=0).astype(np.float32)
    dA, dB = desc_set(rng, 512, 32, 64, (512, 512)), desc_set(rng, 512, 32, 64, (512, 512))
    with threadpool_limits(1):
        forward(params, dA, dB)
        times = []
        for _ in range(3):
            t0 = time.perf_counter()
            forward(params, dA, dB)
            times.append(time.perf_counter() - t0)
    best = min(times)
    report_criterion(10, best < 1.0, f"M = N = 512, d = 256, 9 blocks, one thread: {best:.3f} s (median {np.median(times):.3f} s)")
    assert best < 1.0


# -- criterion 4 ----------------------------------------------------------------

ORDERING_SEEDS = (0, 1, 2)
ORDERING_BUDGET_S = 30 * 60
ORDERING_TRAIN = dict(num_blocks=3, dim=64, lr=1e-3, epochs=5, batch_size=4, max_keypoints=256)
# learned matchers are read out at tau = 0 (every mutual maximum), like the MNN baseline
ORDERING_TAU = 0.0


def _ordering_dataset():
    """25 generated subjects, cached under a directory named by the generation config hash."""
    root = Path(os.environ.get("ANGIOMATCH_ACCEPTANCE_CACHE", "/tmp/angiomatch-acceptance"))
    gen = GenerationConfig(subjects=25, seed=7)
    data = root / f"data_{gen.digest()}"
    if not (data / "manifest.txt").exists() or read_manifest(data).get("config_hash") != gen.digest():
        write_dataset(data, gen)
    return data, root / "descriptors"


def test_c4_guided_beats_unguided_beats_mnn(report_criterion):
    data, cache = _ordering_dataset()
    train_cls = load_dataset(data, subjects=set(range(20)))
    test_cls = load_dataset(data, subjects=set(range(20, 25)))
    test_pairs = build_pairs(test_cls, describe_views(test_cls, cache_dir=cache))
    train_desc = describe_views(train_cls, cache_dir=cache)
    mnn = run_benchmark(test_pairs, {"mnn": mnn_baseline}, compute_pose=False)["mnn"].match_auc_3px
    rows, ok_seeds = [], 0
    for seed in ORDERING_SEEDS:
        train_pairs = [p.sample for p in build_pairs(train_cls, train_desc, max_pairs=2000, seed=seed)]
        auc, spent = {}, {}
        for name, guided in (("guided", True), ("unguided", False)):
            est = GuidedMatcher(guidance=guided, seed=seed, tau=ORDERING_TAU, **ORDERING_TRAIN)
            t0 = time.perf_counter()
            est.fit(train_pairs)
            spent[name] = time.perf_counter() - t0
            rep = run_benchmark(test_pairs, {name: lambda a, b, e=est: e.match(a, b).matches}, compute_pose=False)
            auc[name] = rep[name].match_auc_3px
        ok = (auc["guided"] > auc["unguided"] > mnn and auc["guided"] - auc["unguided"] > 0.02
              and max(spent.values()) <= ORDERING_BUDGET_S)
        ok_seeds += ok
        rows.append(f"seed {seed}: guided {auc['guided']:.4f} unguided {auc['unguided']:.4f} "
                    f"mnn {mnn:.4f} (train {spent['guided'] / 60:.0f}/{spent['unguided'] / 60:.0f} min)")
        if not ok:
            break  # 3 of 3 is required; one failing seed decides the criterion
    detail = f"{ok_seeds}/{len(ORDERING_SEEDS)} seeds hold the ordering with margin > 0.02; " + "; ".join(rows)
    report_criterion(4, ok_seeds == len(ORDERING_SEEDS), detail)
    assert ok_seeds == len(ORDERING_SEEDS), detail
