import time

import numpy as np
import pytest

from skelgrow import kernels
from skelgrow.kinematics import fk_batch
from skelgrow.synth import (
    HUMANOID,
    L_HIP,
    R_HIP,
    R_WRIST,
    Attachment,
    SceneSpec,
    SceneSpecError,
    generate_scene,
    oracle_assignment,
    scene_from_bytes,
    scene_to_bytes,
)
from skelgrow.trainer import reconstruction_loss


def test_zero_amplitude_scene_is_plain_lbs_of_labels():
    spec = SceneSpec(attachments=[Attachment(amplitude=0.0, n_points=40)], points_per_segment=40, seed=2, noise=0.0)
    scene = generate_scene(spec)
    K0 = scene.base_count
    W = scene.true_weights[:, :K0].copy()
    obj = scene.attachment >= 0
    W[obj, scene.labels[obj]] = 1.0
    R, t = fk_batch(scene.tree.base(), scene.pose.rotation_matrices(), scene.pose.root_translation)
    plain = kernels.lbs_forward(scene.canonical, W, R, t)
    assert np.max(np.abs(plain - scene.observations)) < 1e-12


def test_object_kernel_zero_on_extra_joint_positive_on_host():
    from skelgrow.assignment import compute_motion_kernels

    scene = generate_scene(SceneSpec(attachments=[Attachment()], seed=4, noise=0.0))
    mk = compute_motion_kernels(scene.observations, scene.true_joint_trajectories()).mk
    obj = scene.attachment == 0
    K0 = scene.base_count
    assert np.max(mk[obj, K0]) < 1e-12
    assert np.min(mk[obj, R_WRIST]) > 0


def test_same_seed_bit_identical():
    spec = SceneSpec(attachments=[Attachment(), Attachment(kind="loose_cloth", host=L_HIP)], seed=9)
    a = generate_scene(spec)
    b = generate_scene(SceneSpec(**{**spec.to_dict(), "attachments": [Attachment(**x) for x in spec.to_dict()["attachments"]]}))
    assert a.observations.tobytes() == b.observations.tobytes()
    assert a.canonical.tobytes() == b.canonical.tobytes()
    c = generate_scene(SceneSpec(attachments=[Attachment()], seed=10))
    assert c.observations.shape != a.observations.shape or not np.array_equal(c.observations, a.observations)


def test_observations_reproduce_true_warp_plus_noise():
    spec = SceneSpec(attachments=[Attachment()], seed=11, noise=1e-3)
    scene = generate_scene(spec)
    resid = scene.observations - scene.clean_observations()
    assert abs(resid.std() - 1e-3) < 5e-5
    assert abs(resid.mean()) < 5e-5


@pytest.mark.parametrize(
    "kw,field",
    [
        (dict(n_frames=1), "n_frames"),
        (dict(topology="chain", base_count=1), "base_count"),
        (dict(topology="star"), "topology"),
        (dict(noise=-1.0), "noise"),
        (dict(attachments=[Attachment(amplitude=-0.1)]), "amplitude"),
        (dict(attachments=[Attachment(host=99)]), "host"),
    ],
)
def test_invalid_specs_name_the_field(kw, field):
    with pytest.raises(SceneSpecError) as e:
        generate_scene(SceneSpec(**kw))
    assert field in str(e.value)


def test_oracle_labels():
    scene = generate_scene(SceneSpec(points_per_segment=50, seed=1, blend_fraction=0.0))
    labels = oracle_assignment(scene)
    assert labels.shape == (scene.P,)
    assert set(np.unique(labels)) <= set(range(scene.base_count))
    assert np.array_equal(labels, np.argmax(scene.true_weights, axis=1))


def test_chain_topology_and_held_out_mask():
    scene = generate_scene(SceneSpec(topology="chain", base_count=5, n_frames=30, points_per_segment=20))
    assert scene.base_count == 5
    assert list(np.flatnonzero(scene.held_out)) == [5, 15, 25]


def test_loose_cloth_on_both_hips():
    scene = generate_scene(
        SceneSpec(attachments=[Attachment(kind="loose_cloth", host=L_HIP), Attachment(kind="loose_cloth", host=R_HIP)])
    )
    assert scene.tree.extra_count == 2
    assert list(scene.tree.parent[-2:]) == [L_HIP, R_HIP]


def test_generation_speed_at_scale():
    spec = SceneSpec(n_frames=100, points_per_segment=1250, attachments=[Attachment()], seed=0)
    t0 = time.perf_counter()
    scene = generate_scene(spec)
    elapsed = time.perf_counter() - t0
    assert scene.P >= 10_000
    assert elapsed < 1.0, elapsed


def test_self_fit_reaches_noise_floor():
    """Refining the true parameterization against noisy observations ends below 3 sigma^2."""
    sigma = 1e-3
    scene = generate_scene(SceneSpec(attachments=[Attachment()], seed=6, noise=sigma))
    loss, _, _ = reconstruction_loss(scene.clean_observations(), scene.observations)
    # the exact model is at the noise floor up to sampling error
    assert abs(loss - 3 * sigma**2) < 0.02 * 3 * sigma**2

    from skelgrow import kernels
    from skelgrow.trainer import Adam

    R, t = scene.true_transforms()
    x = scene.canonical.copy()
    opt = Adam([x])
    for _ in range(200):
        pred = kernels.lbs_forward(x, scene.true_weights, R, t)
        loss, g, _ = reconstruction_loss(pred, scene.observations)
        gx = kernels.lbs_backward(x, scene.true_weights, R, t, g)[0]
        opt.step([gx], 1e-4)
    assert loss <= 3 * sigma**2 + 1e-12


def test_scene_bytes_round_trip():
    scene = generate_scene(SceneSpec(attachments=[Attachment()], points_per_segment=20, n_frames=8, seed=3))
    header, blob = scene_to_bytes(scene, "s.bin")
    back = scene_from_bytes(header, blob)
    assert back.observations.tobytes() == scene.observations.tobytes()
    assert back.labels.dtype == np.int64 and back.held_out.dtype == bool
    assert np.array_equal(back.tree.parent, scene.tree.parent)
    h2, b2 = scene_to_bytes(back, "s.bin")
    assert h2 == header and b2 == blob


def test_humanoid_table_sane():
    assert len(HUMANOID) == 8
