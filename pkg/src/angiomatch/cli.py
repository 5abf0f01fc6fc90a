"""Command-line entry point: ``angiomatch {gen-data,train,match,eval,viz}``.

Configuration comes from an optional ``--config`` key=value file; any
config key can be overridden as ``--key value`` (dashes or underscores).
All randomness derives from ``--seed``:

* gen-data passes it as the generator root seed (trees, renders),
* train uses it for pair selection, initialization and batch order,
* eval uses ``seed + pair index`` as the RANSAC seed of each pair.

Exit codes: 0 success, 1 usage or config error, 2 data or format error,
3 internal numerical error.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig, _TYPES, load_config, parse_subjects, read_angle_table
from .dataset import GenerationConfig, load_dataset, read_keypoints, read_pgm, write_dataset
from .descriptors import describe, extract_global_features, extract_local_features, read_feature_map
from .evaluation import MNNMatcher, records_csv, report_csv, report_table, run_benchmark
from .exceptions import AngiomatchError, ConfigError, DegenerateCovariance, FormatError
from .geometry import camera_from_text, fundamental_from_cameras
from .matcher import GuidedMatcher, log_to_csv
from .pipeline import build_pairs, describe_views
from .viz import save_match_overlay, save_pca_png

__all__ = ["main", "build_parser", "write_matches_csv", "read_matches_csv"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def write_manifest(path, command: str, cfg: PipelineConfig, seed: int, outputs: dict) -> None:
    lines = [f"command={command}", f"version={__version__}", f"config_hash={cfg.digest()}", f"seed={seed}"]
    lines += [f"{k}={v}" for k, v in outputs.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_matches_csv(path, matches) -> None:
    m = np.asarray(matches, dtype=float).reshape(-1, 3)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("idxA,idxB,score\n")
        for i, j, s in m.tolist():
            fh.write(f"{int(i)},{int(j)},{s!r}\n")


def read_matches_csv(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "idxA,idxB,score":
        raise FormatError("expected header idxA,idxB,score", path, 1)
    for n, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            if len(parts) != 3:
                raise ValueError
            rows.append((int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError:
            raise FormatError(f"bad match row {line!r}", path, n) from None
    return np.array(rows, dtype=float).reshape(-1, 3)


def _generation_config(cfg: PipelineConfig, seed: int) -> GenerationConfig:
    table = read_angle_table(cfg.angle_table) if cfg.angle_table else None
    return GenerationConfig(
        subjects=cfg.subjects,
        seed=seed,
        classes=tuple(cfg.class_list()),
        min_separation=cfg.min_separation,
        image_size=cfg.image_size,
        pixel_spacing=cfg.pixel_spacing,
        angle_table=table,
    )


def _load_pairs(cfg, subjects, max_pairs, seed, jobs, cache_dir):
    classes = load_dataset(cfg.data_dir, subjects=set(subjects))
    if not classes:
        raise FormatError(f"no subjects {subjects[0]}..{subjects[-1]} in dataset", cfg.data_dir)
    descs = describe_views(classes, jobs=jobs, cache_dir=cache_dir)
    return build_pairs(classes, descs, max_pairs=max_pairs or None, seed=seed)


def _estimator(cfg: PipelineConfig, seed: int, guidance: bool) -> GuidedMatcher:
    return GuidedMatcher(
        num_blocks=cfg.num_blocks, dim=cfg.dim, guidance=guidance, k_percent=cfg.k_percent, masking=cfg.masking,
        tau=cfg.tau, lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size, optimizer=cfg.optimizer,
        max_keypoints=cfg.max_keypoints, max_steps=cfg.max_steps, seed=seed,
    )


def _load_matcher(cfg: PipelineConfig, path, **kw) -> GuidedMatcher:
    # inference settings come from the config, not from the weights metadata
    return GuidedMatcher.load(path, tau=cfg.tau, k_percent=cfg.k_percent, masking=cfg.masking, **kw)


def _cache(args):
    return args.cache_dir or None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: PipelineConfig, args) -> int:
    out = Path(cfg.data_dir)
    gen = _generation_config(cfg, args.seed)
    manifest = write_dataset(out, gen, jobs=args.jobs)
    print(f"wrote {manifest['num_pairs']} pairs ({manifest['num_views']} views) to {out}")
    return EXIT_OK


def cmd_train(cfg: PipelineConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subjects = parse_subjects(cfg.train_subjects)
    pairs = _load_pairs(cfg, subjects, cfg.max_train_pairs, args.seed, args.jobs, _cache(args))
    samples = [p.sample for p in pairs]
    est = _estimator(cfg, args.seed, cfg.guidance)
    ckpt = out / "checkpoint.npz"
    est.fit(samples, checkpoint_path=ckpt, resume=args.resume)
    weights = Path(cfg.weights)
    est.save(weights)
    log_path = out / "train_log.csv"
    log_path.write_text(log_to_csv(est.log_), encoding="utf-8")
    write_manifest(out / "manifest_train.txt", "train", cfg, args.seed, {
        "num_pairs": len(samples), "steps": est.n_steps_, "weights": weights, "weights_sha256": _sha(weights),
    })
    last = est.log_[-1]["loss"] if est.log_ else float("nan")
    print(f"trained {est.n_steps_} steps on {len(samples)} pairs, final loss {last:.4f}; weights in {weights}")
    return EXIT_OK


def cmd_match(cfg: PipelineConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    imgA, imgB = read_pgm(args.image_a), read_pgm(args.image_b)
    kpA, _ = read_keypoints(args.kp_a)
    kpB, _ = read_keypoints(args.kp_b)
    est = _load_matcher(cfg, cfg.weights)
    res = est.match(describe(imgA, kpA), describe(imgB, kpB))
    csv_path = out / "matches.csv"
    write_matches_csv(csv_path, res.matches)
    F = None
    if args.cam_a and args.cam_b:
        camA = camera_from_text(Path(args.cam_a).read_text(encoding="utf-8"), args.cam_a)
        camB = camera_from_text(Path(args.cam_b).read_text(encoding="utf-8"), args.cam_b)
        F = fundamental_from_cameras(camA, camB)
    png = out / "overlay.png"
    save_match_overlay(png, imgA, imgB, kpA, kpB, res.matches, F=F)
    write_manifest(out / "manifest_match.txt", "match", cfg, args.seed, {
        "weights_sha256": _sha(cfg.weights), "num_matches": len(res.matches), "matches": csv_path, "overlay": png,
    })
    print(f"{len(res.matches)} matches written to {csv_path}")
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subjects = parse_subjects(cfg.test_subjects)
    pairs = _load_pairs(cfg, subjects, cfg.max_eval_pairs, args.seed, args.jobs, _cache(args))
    methods = {}
    extra = {}
    for name in cfg.method_list():
        if name == "guided":
            est = _load_matcher(cfg, cfg.weights)
            extra["weights_sha256"] = _sha(cfg.weights)
        elif name == "unguided":
            path = args.unguided_weights or cfg.weights
            est = _load_matcher(cfg, path, guidance=False)
            extra["unguided_weights_sha256"] = _sha(path)
        else:
            est = MNNMatcher("global" if name == "mnn-global" else "local").fit()
        methods[name] = (lambda e: (lambda a, b: e.predict([(a, b)])[0]))(est)
    reports = run_benchmark(pairs, methods, ransac_threshold=cfg.ransac_threshold, seed=args.seed,
                            compute_pose=cfg.compute_pose)
    (out / "report.csv").write_text(report_csv(reports), encoding="utf-8")
    table = report_table(reports)
    (out / "report.txt").write_text(table, encoding="utf-8")
    for name, rep in reports.items():
        (out / f"pairs_{name}.csv").write_text(records_csv(rep), encoding="utf-8")
    write_manifest(out / "manifest_eval.txt", "eval", cfg, args.seed, {"num_pairs": len(pairs), **extra})
    print(table, end="")
    return EXIT_OK


def cmd_viz(cfg: PipelineConfig, args) -> int:
    if args.feature_map:
        fmap = read_feature_map(args.feature_map)
    elif args.image:
        img = read_pgm(args.image)
        fmap = extract_global_features(img) if args.features == "global" else extract_local_features(img)
    else:
        raise UsageError("viz needs --feature-map or --image")
    target = Path(args.output)
    target.parent.mkdir(parents=True, exist_ok=True)
    save_pca_png(target, fmap, upscale=args.upscale)
    print(f"wrote {target}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "match": cmd_match, "eval": cmd_eval, "viz": cmd_viz}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="angiomatch", description="Synthetic angiography data, guided matcher training and evaluation.",
                epilog="Any config key may be given as --key value, e.g. --lr 1e-3 --num-blocks 2.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset (uses data_dir, subjects, classes, ...)")
    common(g)
    t = sub.add_parser("train", help="train the matcher on train_subjects of data_dir")
    common(t)
    t.add_argument("--resume", action="store_true", help="continue from out_dir/checkpoint.npz")
    t.add_argument("--cache-dir", help="descriptor cache directory")
    m = sub.add_parser("match", help="match two images with trained weights")
    common(m)
    m.add_argument("--image-a", required=True)
    m.add_argument("--image-b", required=True)
    m.add_argument("--kp-a", required=True, help="keypoints CSV of image A")
    m.add_argument("--kp-b", required=True, help="keypoints CSV of image B")
    m.add_argument("--cam-a", help="camera file of image A (enables epipolar error text)")
    m.add_argument("--cam-b", help="camera file of image B")
    e = sub.add_parser("eval", help="benchmark methods on test_subjects of data_dir")
    common(e)
    e.add_argument("--unguided-weights", help="weights of the matcher trained without guidance")
    e.add_argument("--cache-dir", help="descriptor cache directory")
    v = sub.add_parser("viz", help="PCA false-color PNG of a feature map")
    common(v)
    v.add_argument("--feature-map", help="feature map file")
    v.add_argument("--image", help="image to extract features from instead")
    v.add_argument("--features", choices=("local", "global"), default="local")
    v.add_argument("--output", required=True, help="PNG path")
    v.add_argument("--upscale", type=int, default=4)
    return p


def _split_overrides(rest: list) -> dict:
    """``--key value`` pairs left over by argparse, checked against config keys."""
    out = {}
    k = 0
    while k < len(rest):
        tok = rest[k]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            k += 1
        else:
            if k + 1 >= len(rest):
                raise UsageError(f"missing value for {tok}")
            val = rest[k + 1]
            k += 2
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise UsageError(f"unknown option --{key.replace('_', '-')}")
        out[key] = val
    return out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        cfg = load_config(args.config, _split_overrides(rest))
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DegenerateCovariance as exc:
        print(f"error: cannot visualize: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (AngiomatchError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
