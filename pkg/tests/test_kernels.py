import numpy as np
import pytest

from skelgrow import _kernels_py, kernels

from .conftest import random_rotations

backends = ["numpy"] + (["cython"] if kernels.BACKEND == "cython" else [])


def _inputs(rng, P=17, N=4, K=5):
    x = rng.normal(size=(P, 3))
    w = rng.random((P, K))
    w[rng.random((P, K)) < 0.3] = 0.0
    w[:, 0] += 0.1
    w /= w.sum(axis=1, keepdims=True)
    R = random_rotations(rng, (N, K))
    t = rng.normal(size=(N, K, 3))
    g = rng.normal(size=(N, P, 3))
    return x, w, R, t, g


def _loop_forward(x, w, R, t):
    out = np.zeros((R.shape[0], x.shape[0], 3))
    for n in range(R.shape[0]):
        for p in range(x.shape[0]):
            for k in range(R.shape[1]):
                out[n, p] += w[p, k] * (R[n, k] @ x[p] + t[n, k])
    return out


@pytest.mark.parametrize("name", backends)
def test_forward_matches_loop_oracle(rng, name):
    x, w, R, t, _ = _inputs(rng)
    assert np.allclose(kernels.get_backend(name).lbs_forward(x, w, R, t), _loop_forward(x, w, R, t), atol=1e-12)


@pytest.mark.parametrize("name", backends)
def test_backward_matches_finite_differences(rng, name):
    b = kernels.get_backend(name)
    x, w, R, t, g = _inputs(rng, P=6, N=3, K=3)
    gx, gw, gR, gt = b.lbs_backward(x, w, R, t, g)

    def f(x_, w_, R_, t_):
        return float(np.sum(g * b.lbs_forward(x_, w_, R_, t_)))

    h = 1e-6
    for arr, grad, slot in ((x, gx, 0), (w, gw, 1), (R, gR, 2), (t, gt, 3)):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            args = [x, w, R, t]
            plus = arr.copy()
            plus[idx] += h
            minus = arr.copy()
            minus[idx] -= h
            args[slot] = plus
            fp = f(*args)
            args[slot] = minus
            fd[idx] = (fp - f(*args)) / (2 * h)
        assert np.allclose(grad, fd, atol=1e-7), slot


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")
def test_backends_agree(rng):
    c = kernels.get_backend("cython")
    x, w, R, t, g = _inputs(rng, P=300, N=7, K=9)
    assert np.allclose(c.lbs_forward(x, w, R, t), _kernels_py.lbs_forward(x, w, R, t), atol=1e-12)
    for a, b in zip(c.lbs_backward(x, w, R, t, g), _kernels_py.lbs_backward(x, w, R, t, g)):
        assert np.allclose(a, b, atol=1e-11)
    traj, joints = rng.normal(size=(7, 300, 3)), rng.normal(size=(7, 9, 3))
    assert np.allclose(c.motion_kernels(traj, joints), _kernels_py.motion_kernels(traj, joints), atol=1e-12)
    ia, da = c.nearest_neighbors(traj[0], traj[1])
    ib, db = _kernels_py.nearest_neighbors(traj[0], traj[1])
    assert np.array_equal(ia, ib)
    assert np.allclose(da, db, atol=1e-12)


@pytest.mark.parametrize("name", backends)
def test_nearest_neighbors_first_index_wins_ties(name):
    a = np.zeros((1, 3))
    b = np.array([[1.0, 0, 0], [0, 1.0, 0], [-1.0, 0, 0]])
    idx, d2 = kernels.get_backend(name).nearest_neighbors(a, b)
    assert idx[0] == 0 and d2[0] == 1.0


@pytest.mark.parametrize("name", backends)
def test_motion_kernel_hand_value(name):
    traj = np.array([[[1.0, 0, 0]], [[2.0, 0, 0]], [[3.0, 0, 0]]])
    joints = np.zeros((3, 1, 3))
    assert np.isclose(kernels.get_backend(name).motion_kernels(traj, joints)[0, 0], 2 / 3, atol=1e-15)


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")
def test_thread_count_does_not_change_results(rng, monkeypatch):
    c = kernels.get_backend("cython")
    x, w, R, t, g = _inputs(rng, P=500, N=6, K=7)
    monkeypatch.setenv("SKELGROW_THREADS", "1")
    one = c.lbs_backward(x, w, R, t, g)
    monkeypatch.setenv("SKELGROW_THREADS", "4")
    four = c.lbs_backward(x, w, R, t, g)
    for a, b in zip(one, four):
        assert a.tobytes() == b.tobytes()
