import numpy as np
import pytest

from angiomatch import autodiff as ad


def fd_check(fn, *shapes, seed=0, positive=False, h=1e-6, tol=1e-6):
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0.2, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    ts = [ad.Tensor(x.copy(), requires_grad=True) for x in xs]
    out = fn(*ts)
    w = rng.normal(size=out.shape)
    (out * ad.Tensor(w)).sum().backward()
    for k, x in enumerate(xs):
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp = [v.copy() for v in xs]
            xm = [v.copy() for v in xs]
            xp[k][idx] += h
            xm[k][idx] -= h
            with ad.no_grad():
                fp = (fn(*map(ad.Tensor, xp)).data * w).sum()
                fm = (fn(*map(ad.Tensor, xm)).data * w).sum()
            fd[idx] = (fp - fm) / (2 * h)
        g = ts[k].grad
        assert np.linalg.norm(g - fd) <= tol * max(1.0, np.linalg.norm(fd)), f"input {k}"


CASES = {
    "add_broadcast": (lambda a, b: a + b, (3, 4), (4,)),
    "mul_broadcast": (lambda a, b: a * b, (3, 4), (3, 1)),
    "sub": (lambda a, b: a - b, (2, 3), (2, 3)),
    "scalar": (lambda a: 2.5 * a - 1.0, (3,)),
    "matmul": (lambda a, b: a @ b, (3, 4), (4, 2)),
    "transpose": (lambda a: a.T @ a, (3, 2)),
    "sum_axis": (lambda a: a.sum(axis=0), (3, 4)),
    "mean": (lambda a: a.mean(axis=1), (3, 4)),
    "exp": (lambda a: a.exp(), (5,)),
    "softmax": (lambda a: ad.softmax(a, axis=1), (3, 5)),
    "softmax_cols": (lambda a: ad.softmax(a, axis=0), (3, 5)),
    "log_softmax": (lambda a: ad.log_softmax(a, axis=0), (4, 3)),
    "sigmoid": (lambda a: ad.sigmoid(a), (6,)),
    "log_sigmoid": (lambda a: ad.log_sigmoid(a * 5.0), (6,)),
    "gelu": (lambda a: ad.gelu(a), (7,)),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), (2, 3), (2, 2)),
    "reshape": (lambda a: a.reshape(2, 6), (3, 4)),
    "index": (lambda a: a[:, 1], (3, 4)),
    "gather_rows": (lambda a: ad.gather_rows(a, np.array([0, 2, 2])), (4, 3)),
    "gather_pairs": (lambda a: ad.gather_pairs(a, np.array([0, 1, 0]), np.array([2, 2, 2])), (3, 4)),
    "reuse": (lambda a: a * a + a, (3,)),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients(name):
    fn, *shapes = CASES[name]
    fd_check(fn, *shapes)


def test_log_gradient():
    fd_check(lambda a: a.log(), (5,), positive=True)


def test_clamp_min_passes_gradient_above_floor():
    x = ad.Tensor(np.array([-3.0, 0.5, 2.0]), requires_grad=True)
    ad.clamp_min(x, 0.0).sum().backward()
    assert x.grad.tolist() == [0.0, 1.0, 1.0]


def test_mask_fill_blocks_gradient():
    x = ad.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    keep = np.array([[True, False], [True, True]])
    y = ad.mask_fill(x, keep, -np.inf)
    assert y.data[0, 1] == -np.inf
    ad.softmax(y, axis=1).sum().backward()
    assert x.grad[0, 1] == 0.0


def test_no_grad_builds_no_graph():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert y._parents == ()


def test_float32_stays_float32():
    x = ad.Tensor(np.ones((2, 2), np.float32))
    assert (x * 0.5 + 1.0).data.dtype == np.float32
    assert ad.gelu(x).data.dtype == np.float32


def test_numpy_array_on_left_defers_to_tensor():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = np.arange(3.0) + x
    assert isinstance(y, ad.Tensor)


def test_stable_softmax_on_large_logits():
    x = ad.Tensor(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.allclose(ad.softmax(x).data, [[1.0, 0.0, 0.0]])
    assert np.all(np.isfinite(ad.log_softmax(x).data))
    assert np.isfinite(ad.log_sigmoid(ad.Tensor(np.array([-800.0]))).data).all()
