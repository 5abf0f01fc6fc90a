import numpy as np
import pytest
from scipy import ndimage
from scipy.special import erf
from sklearn.base import clone

from angiomatch import autodiff as ad
from angiomatch.descriptors import (
    GLOBAL_DIM,
    LOCAL_CHANNELS,
    ContextFeatureProvider,
    DescriptorExtractor,
    FeatureMap,
    describe,
    extract_global_features,
    extract_local_features,
    positional_embedding,
    read_feature_map,
    sample_bilinear,
    write_feature_map,
)
from angiomatch.exceptions import FormatError, OutOfBounds
from angiomatch.geometry import CArmAngulation, make_camera
from angiomatch.imagesynth import procedural_render
from angiomatch.vesselgen import generate_tree, project_view


@pytest.fixture(scope="module")
def angio():
    tree = generate_tree("LAD", 2)
    view = project_view(tree, make_camera(CArmAngulation(30, 10)), render=lambda m, r, root: procedural_render(m, r, 2, root))
    return view


def test_local_shapes_and_constant_image():
    fm = extract_local_features(np.full((512, 512), 0.4))
    assert (fm.channels, fm.height, fm.width, fm.stride) == (LOCAL_CHANNELS, 128, 128, 4)
    assert np.all(fm.data[:24] == 0)
    assert np.all(np.isfinite(fm.data))


def test_local_features_shift_by_one_cell(rng):
    img = ndimage.gaussian_filter(rng.random((160, 160)), 2)
    shifted = np.zeros_like(img)
    shifted[:, 4:] = img[:, :-4]
    a = extract_local_features(img).data
    b = extract_local_features(shifted).data
    m = 10  # cells touched by the border
    assert np.allclose(b[:, m:-m, m + 1 : -m], a[:, m:-m, m : -m - 1], atol=1e-5)


def test_global_shapes_and_constant_image():
    fm = extract_global_features(np.full((512, 512), 100, np.uint8))
    assert (fm.channels, fm.height, fm.width, fm.stride) == (GLOBAL_DIM, 32, 32, 16)
    assert np.all(fm.data == fm.data[:, :1, :1])


def test_global_features_robust_to_noise(angio, rng):
    img = angio.image.astype(float)
    noisy = np.clip(img + rng.normal(0, 2.0, img.shape), 0, 255)
    a = extract_global_features(img.astype(np.uint8)).data
    b = extract_global_features(noisy.astype(np.uint8)).data
    cos = (a * b).sum(0) / (np.linalg.norm(a, axis=0) * np.linalg.norm(b, axis=0))
    assert cos.min() >= 0.99


def test_global_provider_is_pluggable(angio):
    prov = ContextFeatureProvider(dim=32, seed=3)
    d = describe(angio.image, angio.keypoints[:10], provider=prov)
    assert d.global_.shape == (10, 32)


def test_sample_on_cell_centers(rng):
    fm = FeatureMap(rng.normal(size=(5, 6, 7)), 4)
    for i, j in [(0, 0), (2, 3), (5, 6)]:
        kp = [[4 * j + 1.5, 4 * i + 1.5]]
        assert np.allclose(sample_bilinear(fm, kp)[0], fm.data[:, i, j], atol=1e-15)


def test_sample_midpoint_is_mean(rng):
    fm = FeatureMap(rng.normal(size=(5, 6, 7)), 4)
    v = sample_bilinear(fm, [[4 * 2 + 1.5 + 2.0, 4 * 3 + 1.5]])[0]
    assert np.allclose(v, 0.5 * (fm.data[:, 3, 2] + fm.data[:, 3, 3]), atol=1e-15)


def test_sample_matches_four_neighbour_oracle(rng):
    s = 4
    fm = FeatureMap(rng.normal(size=(3, 10, 12)), s)
    kp = rng.uniform([s, s], [12 * s - s - 1, 10 * s - s - 1], (50, 2))
    got = sample_bilinear(fm, kp)
    for k, (x, y) in enumerate(kp):
        gx, gy = (x - 1.5) / s, (y - 1.5) / s
        x0, y0 = int(np.floor(gx)), int(np.floor(gy))
        fx, fy = gx - x0, gy - y0
        oracle = sum(
            w * fm.data[:, yy, xx]
            for w, yy, xx in [
                ((1 - fx) * (1 - fy), y0, x0),
                (fx * (1 - fy), y0, x0 + 1),
                ((1 - fx) * fy, y0 + 1, x0),
                (fx * fy, y0 + 1, x0 + 1),
            ]
        )
        assert np.allclose(got[k], oracle, atol=1e-12)


def test_sample_clamps_border_and_rejects_outside(rng):
    fm = FeatureMap(rng.normal(size=(2, 4, 4)), 4)
    assert np.allclose(sample_bilinear(fm, [[0.0, 0.0]])[0], fm.data[:, 0, 0])
    assert np.allclose(sample_bilinear(fm, [[15.0, 15.0]])[0], fm.data[:, 3, 3])
    for bad in ([-0.5, 3.0], [3.0, 15.5], [np.nan, 1.0]):
        with pytest.raises(OutOfBounds):
            sample_bilinear(fm, [bad])


def test_local_descriptors_unit_norm(angio):
    d = describe(angio.image, angio.keypoints)
    assert np.allclose(np.linalg.norm(d.local, axis=1), 1.0, atol=1e-10)
    assert d.local.shape == (len(angio.keypoints), LOCAL_CHANNELS)
    assert np.all(np.isfinite(d.global_))


def _mlp(rng, d=6):
    return {"W1": rng.normal(size=(2, d)), "b1": rng.normal(size=d), "W2": rng.normal(size=(d, d)), "b2": rng.normal(size=d)}


def test_positional_embedding_normalization(rng):
    p = _mlp(rng)

    def mlp(u):
        h = np.array(u) @ p["W1"] + p["b1"]
        h = 0.5 * h * (1 + erf(h / np.sqrt(2)))
        return h @ p["W2"] + p["b2"]

    assert np.allclose(positional_embedding([[255.5, 255.5]], (512, 512), p)[0], mlp([0.0, 0.0]), atol=1e-12)
    assert np.allclose(positional_embedding([[0.0, 0.0]], (512, 512), p)[0], mlp([-1.0, -1.0]), atol=1e-12)
    assert np.allclose(positional_embedding([[511.0, 0.0]], (512, 512), p)[0], mlp([1.0, -1.0]), atol=1e-12)


def test_positional_embedding_gradient_matches_fd(rng):
    p = _mlp(rng, 5)
    kp = rng.uniform(0, 300, (7, 2))
    proj = rng.normal(size=(7, 5))

    def loss(vals):
        return float((positional_embedding(kp, (320, 300), vals) * proj).sum())

    tens = {k: ad.Tensor(v.copy(), requires_grad=True) for k, v in p.items()}
    out = (positional_embedding(kp, (320, 300), tens) * ad.Tensor(proj)).sum()
    out.backward()
    h = 1e-6
    for k, v in p.items():
        fd = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            plus = {kk: vv.copy() for kk, vv in p.items()}
            minus = {kk: vv.copy() for kk, vv in p.items()}
            plus[k][idx] += h
            minus[k][idx] -= h
            fd[idx] = (loss(plus) - loss(minus)) / (2 * h)
        g = tens[k].grad
        assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-4


def test_feature_map_round_trip(tmp_path, rng):
    fm = FeatureMap(rng.normal(size=(3, 5, 4)).astype(np.float32).astype(float), 8)
    path = tmp_path / "f.amfm"
    write_feature_map(path, fm)
    back = read_feature_map(path)
    assert back.stride == 8 and np.array_equal(back.data, fm.data)
    path.write_bytes(b"nope")
    with pytest.raises(FormatError):
        read_feature_map(path)


def test_extractor_estimator(angio):
    est = DescriptorExtractor(local_stride=4)
    assert clone(est).get_params() == est.get_params()
    out = est.fit().transform([(angio.image, angio.keypoints[:5])])
    assert len(out) == 1 and len(out[0]) == 5
    with pytest.raises(ValueError):
        DescriptorExtractor(local_stride=0).fit()
