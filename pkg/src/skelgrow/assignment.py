"""Motion kernels, hybrid point-to-joint assignment and joint gradient accumulation."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import kernels

MK_EPS = 1e-8


@dataclass
class MotionKernelTable:
    mk: np.ndarray  # (P, K) variance of point-joint distance over frames


@dataclass
class JointGradientVector:
    g_J: np.ndarray  # (K,)
    accumulation_count: int = 1


def compute_motion_kernels(point_traj, joint_traj) -> MotionKernelTable:
    """Variance over frames of every point-to-joint distance.

    point_traj: (N, P, 3) observed point positions
    joint_traj: (N, K, 3) observed joint positions
    """
    point_traj = np.asarray(point_traj, dtype=float)
    joint_traj = np.asarray(joint_traj, dtype=float)
    if point_traj.ndim != 3 or joint_traj.ndim != 3 or point_traj.shape[2] != 3 or joint_traj.shape[2] != 3:
        raise ValueError("trajectories must be (N, P, 3) and (N, K, 3)")
    if point_traj.shape[0] != joint_traj.shape[0]:
        raise ValueError("point and joint trajectories have different frame counts")
    if point_traj.shape[0] < 2:
        raise ValueError("motion kernels need at least 2 frames")
    return MotionKernelTable(kernels.motion_kernels(point_traj, joint_traj))


def mk_weights(table: MotionKernelTable, eps: float = MK_EPS) -> np.ndarray:
    """Row-normalized inverse motion kernels; ``eps`` keeps rigid pairs finite."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    inv = 1.0 / (np.asarray(table.mk, dtype=float) + eps)
    return inv / inv.sum(axis=1, keepdims=True)


def hybrid_weights(w_mk, w_lbs, lam: float) -> np.ndarray:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    w_mk = np.asarray(w_mk, dtype=float)
    w_lbs = np.asarray(w_lbs, dtype=float)
    if w_mk.shape != w_lbs.shape:
        raise ValueError("weight matrices differ in shape")
    if lam == 0.0:
        return w_lbs.copy()
    if lam == 1.0:
        return w_mk.copy()
    return lam * w_mk + (1.0 - lam) * w_lbs


def accumulate_joint_gradients(point_grad_norms, weights) -> JointGradientVector:
    """Weighted mean of point gradient norms per joint; joints without weight get 0."""
    g = np.asarray(point_grad_norms, dtype=float)
    w = np.asarray(weights, dtype=float)
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ValueError("gradient norms must be finite and nonnegative")
    num = g @ w
    den = w.sum(axis=0)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return JointGradientVector(out, 1)


@dataclass
class JointGradientAccumulator:
    """Running arithmetic mean of per-call joint gradient vectors."""

    K: int
    total: np.ndarray = field(default=None)
    count: int = 0

    def __post_init__(self):
        if self.total is None:
            self.total = np.zeros(self.K)

    def add(self, point_grad_norms, weights) -> None:
        self.total += accumulate_joint_gradients(point_grad_norms, weights).g_J
        self.count += 1

    def result(self) -> JointGradientVector:
        if self.count == 0:
            return JointGradientVector(np.zeros(self.K), 0)
        return JointGradientVector(self.total / self.count, self.count)


def joint_gradient_csv(gv: JointGradientVector) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["joint", "g_J"])
    for k, v in enumerate(gv.g_J):
        w.writerow([k, repr(float(v))])
    return buf.getvalue()


def argmax_accuracy(weights, labels, mask=None) -> float:
    pred = np.argmax(weights, axis=1)
    ok = pred == np.asarray(labels)
    if mask is not None:
        ok = ok[np.asarray(mask)]
    return float(ok.mean()) if ok.size else 1.0
