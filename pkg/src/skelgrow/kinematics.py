"""Joint tree, pose sequences, forward kinematics and linear blend skinning.

Each joint's local rotation pivots about its own rest position, so the
all-identity pose maps every joint to the identity transform. Grown joints are
appended after the base joints and are always leaves.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .mathcore import Transform


class MalformedPoseError(ValueError):
    pass


@dataclass
class JointTree:
    parent: np.ndarray  # (K,) int, -1 for the root
    rest_position: np.ndarray  # (K, 3)
    base_count: int

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.rest_position = np.asarray(self.rest_position, dtype=float).reshape(-1, 3)
        if self.parent.shape[0] != self.rest_position.shape[0]:
            raise ValueError("parent and rest_position lengths differ")
        if np.count_nonzero(self.parent < 0) != 1 or self.parent[0] >= 0:
            raise ValueError("tree needs exactly one root at index 0")
        for k in range(1, self.K):
            if not 0 <= self.parent[k] < k:
                raise ValueError(f"joint {k}: parent {self.parent[k]} breaks topological order")
        if not 0 < self.base_count <= self.K:
            raise ValueError("base_count must satisfy 0 < K0 <= K")

    @property
    def K(self) -> int:
        return int(self.parent.shape[0])

    @property
    def extra_count(self) -> int:
        return self.K - self.base_count

    def with_extra(self, parents, rest_positions) -> "JointTree":
        """Append leaf joints; ``base_count`` is kept."""
        parents = np.asarray(parents, dtype=np.int64).reshape(-1)
        rest_positions = np.asarray(rest_positions, dtype=float).reshape(-1, 3)
        return JointTree(
            np.concatenate([self.parent, parents]),
            np.concatenate([self.rest_position, rest_positions]),
            self.base_count,
        )

    def base(self) -> "JointTree":
        K0 = self.base_count
        return JointTree(self.parent[:K0].copy(), self.rest_position[:K0].copy(), K0)


@dataclass
class PoseSequence:
    timestamps: np.ndarray  # (N,)
    local_rotation: np.ndarray  # (N, K0, 4) unit quaternions (w, x, y, z)
    root_translation: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.local_rotation = np.asarray(self.local_rotation, dtype=float)
        self.root_translation = np.asarray(self.root_translation, dtype=float)
        n = self.timestamps.shape[0]
        if self.local_rotation.shape[0] != n or self.root_translation.shape != (n, 3):
            raise MalformedPoseError("frame counts differ between pose fields")
        if n > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise MalformedPoseError("timestamps must be strictly increasing")
        norms = np.linalg.norm(self.local_rotation, axis=-1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise MalformedPoseError("local rotations must be unit quaternions")

    @property
    def N(self) -> int:
        return int(self.timestamps.shape[0])

    def rotation_matrices(self) -> np.ndarray:
        return quats_to_matrices(self.local_rotation)

    def subset(self, frames) -> "PoseSequence":
        frames = np.asarray(frames)
        return PoseSequence(self.timestamps[frames], self.local_rotation[frames], self.root_translation[frames])


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


@dataclass
class CanonicalCloud:
    """Canonical points with a fixed base-joint prior and learnable correction logits.

    ``logits`` has one column per joint of the current tree; columns beyond the
    prior's width belong to grown joints and see a uniform prior of 1.
    """

    position: np.ndarray  # (P, 3)
    prior: np.ndarray  # (P, K0), row-stochastic
    logits: np.ndarray = field(default=None)  # (P, K)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(-1, 3)
        self.prior = np.asarray(self.prior, dtype=float)
        if self.logits is None:
            self.logits = np.zeros_like(self.prior)
        self.logits = np.asarray(self.logits, dtype=float)
        P = self.position.shape[0]
        if P < 1:
            raise ValueError("cloud needs at least one point")
        if self.prior.shape[0] != P or self.logits.shape[0] != P:
            raise ValueError("row counts differ")
        if self.logits.shape[1] < self.prior.shape[1]:
            raise ValueError("logits narrower than prior")
        if np.any(self.prior < 0) or not np.allclose(self.prior.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("prior rows must be nonnegative and sum to 1")

    @property
    def P(self) -> int:
        return int(self.position.shape[0])

    @property
    def K(self) -> int:
        return int(self.logits.shape[1])

    @property
    def blend_weight(self) -> np.ndarray:
        return effective_blend_weights(self)

    def copy(self) -> "CanonicalCloud":
        return CanonicalCloud(self.position.copy(), self.prior.copy(), self.logits.copy())


def extended_prior(prior: np.ndarray, K: int) -> np.ndarray:
    P, K0 = prior.shape
    return np.concatenate([prior, np.ones((P, K - K0))], axis=1)


def _log_prior(prior: np.ndarray, K: int) -> np.ndarray:
    ext = extended_prior(prior, K)
    with np.errstate(divide="ignore"):
        return np.log(ext)


def softmax_weights(prior: np.ndarray, logits: np.ndarray) -> np.ndarray:
    z = _log_prior(prior, logits.shape[1]) + logits
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def effective_blend_weights(cloud: CanonicalCloud) -> np.ndarray:
    """Row-normalized ``prior * exp(logits)``; zero-prior entries stay zero."""
    if not np.all(np.isfinite(cloud.logits)):
        raise ValueError("correction logits must be finite")
    return softmax_weights(cloud.prior, cloud.logits)


def blend_weights_backward(weights: np.ndarray, grad_weights: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given dL/dweights (softmax adjoint)."""
    inner = np.sum(weights * grad_weights, axis=1, keepdims=True)
    return weights * (grad_weights - inner)


def local_matrices(tree: JointTree, base_R: np.ndarray, root_t: np.ndarray, extra_R=None):
    """Stack base and extra local rotations into ``(N, K, 3, 3)``."""
    base_R = np.asarray(base_R, dtype=float)
    N = base_R.shape[0]
    if base_R.shape[1] != tree.base_count:
        raise MalformedPoseError(f"expected {tree.base_count} base rotations, got {base_R.shape[1]}")
    Ke = tree.extra_count
    if extra_R is None:
        if Ke:
            raise MalformedPoseError(f"expected {Ke} extra rotations, got none")
        extra_R = np.zeros((N, 0, 3, 3))
    extra_R = np.asarray(extra_R, dtype=float)
    if extra_R.shape[1] != Ke:
        raise MalformedPoseError(f"expected {Ke} extra rotations, got {extra_R.shape[1]}")
    if np.asarray(root_t).shape != (N, 3):
        raise MalformedPoseError("root translation must be (N, 3)")
    return np.concatenate([base_R, extra_R], axis=1)


def fk_batch(tree: JointTree, base_R, root_t, extra_R=None):
    """Global joint transforms for every frame.

    Returns ``(R, t)`` of shapes ``(N, K, 3, 3)`` and ``(N, K, 3)`` such that a
    canonical point ``x`` rigidly bound to joint ``k`` lands at ``R[n,k] x + t[n,k]``.
    """
    L = local_matrices(tree, base_R, root_t, extra_R)
    N, K = L.shape[:2]
    j = tree.rest_position
    R = np.empty((N, K, 3, 3))
    t = np.empty((N, K, 3))
    R[:, 0] = L[:, 0]
    t[:, 0] = j[0] - L[:, 0] @ j[0] + np.asarray(root_t, dtype=float)
    for k in range(1, K):
        p = tree.parent[k]
        R[:, k] = R[:, p] @ L[:, k]
        local_t = j[k] - L[:, k] @ j[k]
        t[:, k] = np.einsum("nij,nj->ni", R[:, p], local_t) + t[:, p]
    return R, t


def joint_positions(tree: JointTree, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Observed joint locations ``(N, K, 3)`` from global transforms."""
    return np.einsum("nkij,kj->nki", R, tree.rest_position) + t


def leaf_joint_backward(tree, R, L, gR, gt, k):
    """Adjoint of one leaf joint's global transform w.r.t. its local rotation and rest position.

    ``R`` global rotations and ``L`` local rotations, both ``(N, K, 3, 3)``;
    ``gR``/``gt`` are dL/dR_global and dL/dt_global for all joints. Returns
    ``(dL/dL_k (N,3,3), dL/dj_k (3,))``.
    """
    p = tree.parent[k]
    jk = tree.rest_position[k]
    Rp = R[:, p]
    RpT_gt = np.einsum("nji,nj->ni", Rp, gt[:, k])
    g_local = np.einsum("nji,njk->nik", Rp, gR[:, k]) - RpT_gt[:, :, None] * jk[None, None, :]
    g_rest = np.einsum("ni,nij->j", RpT_gt, np.eye(3)[None] - L[:, k])
    return g_local, g_rest


def forward_kinematics(tree: JointTree, base_pose, extra_pose=()) -> list:
    """Single-frame FK on value types.

    ``base_pose`` is ``(rotations, root_translation)`` with one :class:`Rotation`
    per base joint; ``extra_pose`` holds one rotation per grown joint.
    """
    rotations, root_translation = base_pose
    if len(rotations) != tree.base_count:
        raise MalformedPoseError(f"expected {tree.base_count} base rotations, got {len(rotations)}")
    if len(extra_pose) != tree.extra_count:
        raise MalformedPoseError(f"expected {tree.extra_count} extra rotations, got {len(extra_pose)}")
    base_R = np.stack([r.as_matrix() for r in rotations])[None]
    extra_R = np.stack([r.as_matrix() for r in extra_pose])[None] if len(extra_pose) else None
    R, t = fk_batch(tree, base_R, np.asarray(root_translation, dtype=float).reshape(1, 3), extra_R)
    return [Transform.from_matrix(R[0, k], t[0, k]) for k in range(tree.K)]


def lbs_warp(cloud: CanonicalCloud, transforms) -> np.ndarray:
    """Warp canonical points by a list of per-joint :class:`Transform`."""
    if len(transforms) != cloud.K:
        raise MalformedPoseError(f"expected {cloud.K} transforms, got {len(transforms)}")
    R = np.stack([tr.rotation.as_matrix() for tr in transforms])[None]
    t = np.stack([tr.translation for tr in transforms])[None]
    return kernels.lbs_forward(cloud.position, cloud.blend_weight, R, t)[0]


def lbs_warp_batch(positions, weights, R, t) -> np.ndarray:
    return kernels.lbs_forward(positions, weights, R, t)


def identity_pose(tree: JointTree, n_frames: int = 1):
    base = np.broadcast_to(np.eye(3), (n_frames, tree.base_count, 3, 3)).copy()
    extra = np.broadcast_to(np.eye(3), (n_frames, tree.extra_count, 3, 3)).copy()
    return base, np.zeros((n_frames, 3)), extra

