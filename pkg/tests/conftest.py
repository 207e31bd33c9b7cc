import numpy as np
import pytest

from skelgrow.kinematics import CanonicalCloud, JointTree
from skelgrow.synth import Attachment, SceneSpec, generate_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    """Humanoid with one wrist-held stick, small enough for fast training tests."""
    spec = SceneSpec(n_frames=20, points_per_segment=30, attachments=[Attachment(n_points=30)], seed=5, noise=0.0)
    return generate_scene(spec)


def random_rotations(rng, shape):
    v = rng.normal(size=shape + (3,))
    from skelgrow.mathcore import exp_so3_batch

    return exp_so3_batch(v)


def chain_tree(K, rng):
    parent = np.arange(-1, K - 1)
    rest = np.cumsum(rng.normal(scale=0.3, size=(K, 3)), axis=0)
    return JointTree(parent, rest, K)


def random_cloud(rng, P, K0, K=None, logit_scale=0.3):
    K = K0 if K is None else K
    prior = rng.random((P, K0))
    prior[rng.random((P, K0)) < 0.4] = 0.0
    prior[np.arange(P), rng.integers(0, K0, P)] += 0.5
    prior /= prior.sum(axis=1, keepdims=True)
    return CanonicalCloud(rng.normal(size=(P, 3)), prior, logit_scale * rng.normal(size=(P, K)))
