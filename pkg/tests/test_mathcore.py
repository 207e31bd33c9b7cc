import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelgrow.mathcore import (
    Rotation,
    Transform,
    compose,
    exp_so3,
    exp_so3_batch,
    exp_so3_jacobian,
    hat,
    matrix_to_quat,
    positional_encoding,
    positional_encoding_batch,
    quat_to_matrix,
)

vec3 = st.lists(st.floats(-3, 3, allow_nan=False), min_size=3, max_size=3).map(np.array)


def test_compose_identity_and_inverse(rng):
    T = Transform(Rotation.from_axis_angle(rng.normal(size=3)), rng.normal(size=3))
    x = rng.normal(size=3)
    assert np.allclose(compose(Transform.identity(), T).apply(x), T.apply(x), atol=1e-12)
    I = compose(T, T.inverse())
    assert np.allclose(I.rotation.as_matrix(), np.eye(3), atol=1e-9)
    assert np.allclose(I.translation, 0, atol=1e-9)


def test_compose_rot90x_after_translation():
    a = Transform(exp_so3([np.pi / 2, 0, 0]), np.zeros(3))
    b = Transform(Rotation.identity(), np.array([0.0, 0.0, 1.0]))
    assert np.allclose(compose(a, b).apply(np.zeros(3)), [0, -1, 0], atol=1e-12)


@given(vec3, vec3, vec3, vec3)
@settings(max_examples=50, deadline=None)
def test_compose_is_associative(u, v, w, x):
    a = Transform(exp_so3(u), v)
    b = Transform(exp_so3(w), x)
    c = Transform(exp_so3(v), u)
    lhs = compose(compose(a, b), c).apply(w)
    rhs = compose(a, compose(b, c)).apply(w)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_exp_so3_examples():
    assert np.array_equal(exp_so3([0, 0, 0]).as_matrix(), np.eye(3))
    assert np.allclose(exp_so3([np.pi / 2, 0, 0]).apply([0, 0, 1]), [0, -1, 0], atol=1e-12)
    v = np.array([0.3, -1.2, 0.4])
    assert np.allclose((exp_so3(v) @ exp_so3(-v)).as_matrix(), np.eye(3), atol=1e-9)


def test_exp_so3_first_order_at_zero(rng):
    v = rng.normal(size=3)
    eps = 1e-5
    err = np.linalg.norm(exp_so3(eps * v).as_matrix() - (np.eye(3) + eps * hat(v)))
    assert err < 10 * eps**2 * np.dot(v, v)


def test_exp_so3_tiny_vector_uses_taylor_branch():
    R = exp_so3([1e-10, 0, 0]).as_matrix()
    assert np.all(np.isfinite(R))
    assert np.allclose(R, np.eye(3) + hat([1e-10, 0, 0]), atol=1e-18)


def test_quaternion_round_trip_bulk(rng):
    q = rng.normal(size=(10_000, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    err = 0.0
    for qi in q:
        back = matrix_to_quat(quat_to_matrix(qi))
        err = max(err, min(np.abs(back - qi).max(), np.abs(back + qi).max()))
    assert err < 1e-9


def test_rotation_invariants(rng):
    r = Rotation.from_axis_angle(rng.normal(size=3))
    assert abs(np.linalg.norm(r.quat) - 1) < 1e-9
    assert r.quat[0] >= 0
    m = r.as_matrix()
    assert np.allclose(m @ m.T, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(m) - 1) < 1e-9


def test_axis_angle_round_trip(rng):
    v = rng.normal(size=3)
    v *= 2.5 / np.linalg.norm(v)
    assert np.allclose(Rotation.from_axis_angle(v).as_axis_angle(), v, atol=1e-9)


def test_batch_matches_scalar(rng):
    v = rng.normal(size=(7, 3))
    R = exp_so3_batch(v)
    for vi, Ri in zip(v, R):
        assert np.allclose(exp_so3(vi).as_matrix(), Ri, atol=1e-12)


@pytest.mark.parametrize("scale", [1.0, 1e-7])
def test_exp_jacobian_matches_finite_differences(rng, scale):
    v = scale * rng.normal(size=3)
    J = exp_so3_jacobian(v)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (exp_so3_batch(v + e) - exp_so3_batch(v - e)) / (2 * h)
        assert np.allclose(J[i], fd, atol=1e-8)


def test_positional_encoding_examples():
    assert np.array_equal(positional_encoding(0.0, 2), [0, 1, 0, 1])
    assert np.allclose(positional_encoding(1.0, 1), [0, -1], atol=1e-12)
    s = np.sqrt(0.5)
    assert np.allclose(positional_encoding(0.25, 2), [s, s, 1, 0], atol=1e-15)


def test_positional_encoding_deterministic_and_batched():
    x = np.linspace(0, 1, 11)
    a = positional_encoding_batch(x, 4)
    b = positional_encoding_batch(x, 4)
    assert a.tobytes() == b.tobytes()
    assert np.array_equal(a[3], positional_encoding(x[3], 4))
    with pytest.raises(ValueError):
        positional_encoding(0.1, 0)
