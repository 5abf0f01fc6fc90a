import hashlib
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from angiomatch.cli import main, read_matches_csv, write_matches_csv
from angiomatch.dataset import read_manifest
from angiomatch.descriptors import FeatureMap, write_feature_map
from angiomatch.exceptions import FormatError

TINY = ["--num-blocks", "1", "--dim", "16", "--max-keypoints", "64", "--batch-size", "2", "--max-steps", "4"]


def tree_digest(root) -> dict:
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def two_subjects(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    data = root / "data"
    assert main(["gen-data", "--seed", "5", "--subjects", "2", "--data-dir", str(data)]) == 0
    return data


@pytest.fixture(scope="module")
def trained(two_subjects, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    args = ["--data-dir", str(two_subjects), "--out-dir", str(out), "--weights", str(out / "w.amw"),
            "--train-subjects", "0", "--test-subjects", "1", "--max-train-pairs", "8", "--max-eval-pairs", "3", *TINY]
    assert main(["train", "--seed", "1", *args]) == 0
    return out, args


def test_gen_data_counts_match_directory_scan(two_subjects):
    man = read_manifest(two_subjects)
    gt_files = list(two_subjects.rglob("gt_*.csv"))
    pair_rows = sum(len(p.read_text().splitlines()) - 1 for p in two_subjects.rglob("pairs.csv"))
    assert int(man["num_pairs"]) == len(gt_files) == pair_rows == 700
    assert int(man["num_views"]) == len(list(two_subjects.rglob("*.pgm")))
    assert int(man["num_pairs_LAD"]) + int(man["num_pairs_LCX"]) == 484
    assert man["seed"] == "5"


def test_gen_data_zero_subjects(tmp_path):
    assert main(["gen-data", "--subjects", "0", "--data-dir", str(tmp_path / "d")]) == 0
    man = read_manifest(tmp_path / "d")
    assert man["num_pairs"] == "0" and man["subjects"] == "0"


def test_gen_data_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--seed", "9", "--subjects", "1", "--classes", "RCA", "--data-dir", str(tmp_path / name)]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_train_outputs_and_determinism(trained, tmp_path):
    out, args = trained
    for name in ("w.amw", "train_log.csv", "checkpoint.npz", "manifest_train.txt"):
        assert (out / name).is_file()
    man = read_manifest(out / "manifest_train.txt")
    assert man["command"] == "train" and man["seed"] == "1" and len(man["config_hash"]) == 16
    again = [a if a != str(out) and a != str(out / "w.amw") else a.replace(str(out), str(tmp_path)) for a in args]
    assert main(["train", "--seed", "1", *again]) == 0
    assert (out / "w.amw").read_bytes() == (tmp_path / "w.amw").read_bytes()
    assert (out / "train_log.csv").read_bytes() == (tmp_path / "train_log.csv").read_bytes()


def test_train_resume_continues(trained, tmp_path):
    out, args = trained
    again = [a.replace(str(out), str(tmp_path)) for a in args]
    again[again.index("--max-steps") + 1] = "8"
    (tmp_path / "checkpoint.npz").write_bytes((out / "checkpoint.npz").read_bytes())
    assert main(["train", "--seed", "1", "--resume", *again]) == 0
    assert read_manifest(tmp_path / "manifest_train.txt")["steps"] == "8"


def test_eval_reports_deterministic(trained, tmp_path):
    out, args = trained
    a = list(args)
    a[a.index("--out-dir") + 1] = str(tmp_path)
    files = ("report.csv", "report.txt", "pairs_guided.csv", "pairs_mnn.csv", "manifest_eval.txt")
    runs = []
    for _ in range(2):
        assert main(["eval", "--seed", "2", "--methods", "guided,unguided,mnn", *a]) == 0
        runs.append({f: (tmp_path / f).read_bytes() for f in files})
    assert runs[0] == runs[1]
    rows = runs[0]["report.csv"].decode().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["guided", "unguided", "mnn"]


def test_match_smoke_and_roundtrip(trained, two_subjects):
    out, args = trained
    v = two_subjects / "subject_001" / "LAD"
    files = ["--image-a", str(v / "view_00.pgm"), "--image-b", str(v / "view_04.pgm"),
             "--kp-a", str(v / "view_00.kp.csv"), "--kp-b", str(v / "view_04.kp.csv"),
             "--cam-a", str(v / "view_00.cam"), "--cam-b", str(v / "view_04.cam")]
    # a few training steps leave matchability far below the default tau
    assert main(["match", *files, *args, "--tau", "0"]) == 0
    m = read_matches_csv(out / "matches.csv")
    assert len(m) > 0
    assert m[:, :2].astype(int).tolist() == sorted(m[:, :2].astype(int).tolist())
    with Image.open(out / "overlay.png") as im:
        im.load()
        assert im.mode == "RGB" and im.width == 1024


def test_matches_csv_roundtrip(tmp_path, rng):
    m = np.c_[np.arange(7), rng.permutation(7), rng.random(7)]
    write_matches_csv(tmp_path / "m.csv", m)
    assert np.array_equal(read_matches_csv(tmp_path / "m.csv"), m)
    (tmp_path / "bad.csv").write_text("idxA,idxB,score\n0,1,0.5\n1,x,0.2\n")
    with pytest.raises(FormatError) as err:
        read_matches_csv(tmp_path / "bad.csv")
    assert err.value.line == 3


def test_match_malformed_keypoints(trained, two_subjects, tmp_path, capsys):
    out, args = trained
    v = two_subjects / "subject_001" / "LAD"
    bad = tmp_path / "bad.kp.csv"
    lines = (v / "view_00.kp.csv").read_text().splitlines()
    lines[4] = "3,12.5,oops,7"
    bad.write_text("\n".join(lines) + "\n")
    rc = main(["match", "--image-a", str(v / "view_00.pgm"), "--image-b", str(v / "view_01.pgm"),
               "--kp-a", str(bad), "--kp-b", str(v / "view_01.kp.csv"), *args])
    assert rc == 2
    assert "5" in capsys.readouterr().err.split("bad.kp.csv")[1]


def test_viz(tmp_path, two_subjects, capsys):
    const = tmp_path / "const.fm"
    write_feature_map(const, FeatureMap(np.ones((4, 6, 6)), 4))
    assert main(["viz", "--feature-map", str(const), "--output", str(tmp_path / "c.png")]) == 2
    assert "cannot visualize" in capsys.readouterr().err
    assert not (tmp_path / "c.png").exists()
    img = two_subjects / "subject_000" / "RCA" / "view_00.pgm"
    for name in ("a.png", "b.png"):
        assert main(["viz", "--image", str(img), "--output", str(tmp_path / name), "--upscale", "2"]) == 0
    with Image.open(tmp_path / "a.png") as im:
        im.load()
        assert im.size == (256, 256) and im.mode == "RGB"
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


@pytest.mark.parametrize("argv, code", [
    ([], 1),
    (["bogus"], 1),
    (["train", "--lr", "-1"], 1),
    (["train", "--no-such-key", "3"], 1),
    (["viz", "--output", "x.png"], 1),
    (["eval", "--data-dir", "/nonexistent/data"], 2),
])
def test_exit_codes(argv, code, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code
