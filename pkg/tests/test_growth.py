import json

import numpy as np
import pytest

from skelgrow.assignment import JointGradientVector
from skelgrow.growth import (
    LAST_LAYER_SCALE,
    MLP,
    ExtraJointBook,
    GrowthError,
    MLPDecoder,
    TableDecoder,
    decode_extra_position,
    decode_extra_rotation,
    decoder_gradients,
    dumps_joint_book,
    extend_logits,
    grow_joints,
    joint_book_to_dict,
    loads_joint_book,
    select_parent_joints,
    table_decoder_from_book,
)
from skelgrow.kinematics import effective_blend_weights, fk_batch
from skelgrow.mathcore import Rotation, exp_so3_batch

from .conftest import chain_tree, random_cloud, random_rotations


def gv(*v):
    return JointGradientVector(np.array(v, dtype=float))


def test_select_absolute_paper_threshold():
    assert select_parent_joints(gv(5e-6, 1e-6, 4e-6), "absolute", 3.5e-6) == [0, 2]


def test_select_relative_and_empty():
    assert select_parent_joints(gv(10, 6, 1), "relative", 0.5) == [0, 1]
    assert select_parent_joints(gv(1e-7, 2e-7), "absolute", 3.5e-6) == []
    assert select_parent_joints(gv(0, 0, 0), "relative", 0.5) == []


def test_select_ties_by_index():
    assert select_parent_joints(gv(1, 3, 3, 2), "relative", 0.5) == [1, 2, 3]


def test_select_rejects_bad_thresholds():
    with pytest.raises(ValueError):
        select_parent_joints(gv(1, 2), "relative", 0.0)
    with pytest.raises(ValueError):
        select_parent_joints(gv(1, 2), "absolute", -1.0)
    with pytest.raises(ValueError):
        select_parent_joints(gv(1, 2), "other", 0.5)


def _book(ts, mode="table", rng=None):
    dec = TableDecoder(ts) if mode == "table" else MLPDecoder(0, rng or np.random.default_rng(0))
    return ExtraJointBook([], dec, 0)


def test_grow_empty_is_noop(rng):
    tree = chain_tree(4, rng)
    book = _book(np.linspace(0, 1, 3))
    t2, b2, c2 = grow_joints(tree, book, [])
    assert t2 is tree and b2.count == 0 and c2 is None


def test_grow_appends_identity_children(rng):
    tree = chain_tree(5, rng)
    cloud = random_cloud(rng, 40, 5)
    ts = np.linspace(0, 1, 4)
    t2, book, c2 = grow_joints(tree, _book(ts), [3, 1], cloud)
    assert t2.K == 7 and list(t2.parent[5:]) == [3, 1]
    assert np.array_equal(t2.rest_position[5:], tree.rest_position[[3, 1]])
    assert np.array_equal(decode_extra_position(book.decoder, 0), np.zeros(3))
    for t in (0.0, 0.37, 1.0):
        assert np.array_equal(decode_extra_rotation(book.decoder, 1, t).as_matrix(), np.eye(3))
    base_R = random_rotations(rng, (4, 5))
    R, tt = fk_batch(t2, base_R, rng.normal(size=(4, 3)), np.broadcast_to(np.eye(3), (4, 2, 3, 3)))
    assert np.allclose(R[:, 5], R[:, 3]) and np.allclose(tt[:, 5], tt[:, 3])
    assert c2.K == 7


def test_grow_errors(rng):
    tree = chain_tree(4, rng)
    with pytest.raises(GrowthError):
        grow_joints(tree, _book([0.0, 1.0]), [2, 2])
    with pytest.raises(GrowthError):
        grow_joints(tree, _book([0.0, 1.0]), [7])
    grown, book, _ = grow_joints(tree, _book([0.0, 1.0]), [1])
    with pytest.raises(GrowthError):  # grown joints cannot become parents
        grow_joints(grown, book, [4])


def test_growth_leaves_warp_unchanged(rng):
    from skelgrow import kernels

    tree = chain_tree(4, rng)
    cloud = random_cloud(rng, 60, 4)
    base_R = random_rotations(rng, (3, 4))
    root_t = rng.normal(size=(3, 3))
    R, t = fk_batch(tree, base_R, root_t)
    before = kernels.lbs_forward(cloud.position, effective_blend_weights(cloud), R, t)
    t2, _, c2 = grow_joints(tree, _book(np.linspace(0, 1, 3)), [0, 2], cloud)
    R2, tt2 = fk_batch(t2, base_R, root_t, np.broadcast_to(np.eye(3), (3, 2, 3, 3)))
    after = kernels.lbs_forward(c2.position, effective_blend_weights(c2), R2, tt2)
    # only the 1e-7 floor share of points with no parent weight moves anything
    assert np.max(np.abs(after - before)) < 1e-6


def test_extend_logits_split_and_floor(rng):
    cloud = random_cloud(rng, 30, 3)
    cloud.prior[0] = [0.0, 1.0, 0.0]
    w0 = effective_blend_weights(cloud)
    w1 = effective_blend_weights(extend_logits(cloud, [1], split=0.5))
    assert np.allclose(w1[:, 3], np.maximum(0.5 * w0[:, 1], 1e-7), rtol=1e-9)
    has_parent = w0[:, 1] > 0
    assert np.allclose(w1[has_parent, 1] + w1[has_parent, 3], w0[has_parent, 1], rtol=1e-6)
    zero_parent = w0[:, 1] == 0
    assert np.all(w1[zero_parent, 3] <= 1.01e-7)
    assert np.allclose(w1.sum(axis=1), 1)


def test_table_decoder_storage_and_interpolation():
    dec = TableDecoder([0.0, 0.5, 1.0], 1)
    dec.set_offset(0, [0.1, 0, 0.3])
    assert decode_extra_position(dec, 0).tobytes() == np.array([0.1, 0, 0.3]).tobytes()
    dec.axis_angle[0] = [[0, 0, 0], [0, 0, 1.0], [0, 0, 2.0]]
    assert np.allclose(dec.axis_angle_at(0, 0.25), [0, 0, 0.5])
    assert np.array_equal(dec.axis_angle_at(0, 0.5), [0, 0, 1.0])
    near = TableDecoder([0.0, 0.5, 1.0], 1, interpolation="nearest")
    near.axis_angle[:] = dec.axis_angle
    assert np.array_equal(near.axis_angle_at(0, 0.3), [0, 0, 1.0])
    with pytest.raises(IndexError):
        decode_extra_position(dec, 1)
    with pytest.raises(IndexError):
        decode_extra_rotation(dec, -1, 0.0)


def test_override_returned_verbatim():
    dec = TableDecoder([0.0, 1.0], 1)
    r = Rotation.from_axis_angle([0.1, 0.2, 0.3])
    assert decode_extra_rotation(dec, 0, 0.5, override=r) is r


def test_mlp_init_bounds_and_parameter_count(rng):
    dec = MLPDecoder(5, rng)
    dj, aa, _ = dec.evaluate(np.linspace(0, 1, 7))
    assert np.all(np.linalg.norm(dj, axis=1) <= 0.1)
    assert np.all(np.linalg.norm(aa, axis=-1) <= 0.1)
    p_in, r_in = 2 * 4, 2 * 4 + 2 * 6
    expect = (p_in * 256 + 256) + 3 * (256 * 256 + 256) + (256 * 3 + 3)
    expect += (r_in * 128 + 128) + 3 * (128 * 128 + 128) + (128 * 3 + 3)
    assert dec.phi_p.parameter_count() + dec.phi_r.parameter_count() == expect
    last = dec.phi_p.params[-2]
    assert np.max(np.abs(last)) <= LAST_LAYER_SCALE / np.sqrt(256)
    assert np.all(dec.phi_p.params[-1] == 0)


def test_mlp_rotation_is_continuous_in_time(rng):
    dec = MLPDecoder(3, rng, pos_width=16, rot_width=16)
    for p in dec.params:
        p += 0.3 * rng.normal(size=p.shape)
    for t in rng.random(20):
        a = decode_extra_rotation(dec, 1, t).angle()
        b = decode_extra_rotation(dec, 1, t + 1e-6).angle()
        assert abs(a - b) < 1e-3


def test_mlp_gradients_match_finite_differences(rng):
    dec = MLPDecoder(3, rng, pos_depth=2, pos_width=8, rot_depth=2, rot_width=8)
    for p in dec.params:
        p += 0.3 * rng.normal(size=p.shape)
    ts = np.array([0.1, 0.45, 0.9])
    gdj = rng.normal(size=(3, 3))
    gaa = rng.normal(size=(3, 3, 3))

    def f():
        dj, aa, _ = dec.evaluate(ts)
        return float(np.sum(gdj * dj) + np.sum(gaa * aa))

    grads = decoder_gradients(dec, ts, gdj, gaa)
    h = 1e-5
    worst = 0.0
    for p, g in zip(dec.params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = f()
            p[idx] = old - h
            fm = f()
            p[idx] = old
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6))
    assert worst < 1e-4


def test_decoder_gradient_zero_adjoint_and_table_locality(rng):
    dec = MLPDecoder(2, rng, pos_width=8, rot_width=8)
    ts = np.array([0.2, 0.7])
    for g in decoder_gradients(dec, ts, np.zeros((2, 3)), np.zeros((2, 2, 3))):
        assert not np.any(g)
    tab = TableDecoder(ts, 2)
    gaa = np.zeros((2, 2, 3))
    gaa[:, 1] = 1.0
    g_off, g_aa = decoder_gradients(tab, ts, np.zeros((2, 3)), gaa)
    assert not np.any(g_aa[:, 0]) and np.all(g_aa[:, 1] == 1.0)


def test_mlp_backward_shapes(rng):
    m = MLP(4, 3, 3, 8, rng)
    out, acts = m.forward(rng.normal(size=(5, 4)))
    grads = m.backward(acts, np.ones_like(out))
    assert [g.shape for g in grads] == [p.shape for p in m.params]


def test_joint_book_round_trip(rng):
    tree = chain_tree(4, rng)
    ts = np.linspace(0, 1, 5)
    tree2, book, _ = grow_joints(tree, _book(ts), [2])
    book.decoder.axis_angle[0] = rng.normal(size=(5, 3))
    book.decoder.set_offset(0, [0.01, 0.02, 0.03])
    text = dumps_joint_book(joint_book_to_dict(book, tree, ts))
    doc = loads_joint_book(text)
    assert dumps_joint_book(doc) == text
    dec = table_decoder_from_book(doc, tree)
    assert np.allclose(dec.offsets, book.decoder.offsets, atol=1e-15)
    assert np.array_equal(dec.axis_angle, book.decoder.axis_angle)
    entry = json.loads(text)["entries"][0]
    assert set(entry) == {"parent", "canonical_position", "per_frame_axis_angle"}


def test_joint_book_validation():
    with pytest.raises(ValueError):
        loads_joint_book('{"entries": [{"parent": 0}]}')
    with pytest.raises(ValueError):
        loads_joint_book('{"entries": [{"parent": 0, "canonical_position": [0,0,0], "per_frame_axis_angle": [[0, 0]]}]}')
