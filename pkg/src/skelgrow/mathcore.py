"""SO(3)/SE(3) primitives and positional encoding.

Scalar value types (:class:`Rotation`, :class:`Transform`) are used at API
boundaries; the batched helpers at the bottom (``exp_so3_batch`` and its
Jacobian) are what the training loop uses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8


def hat(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    # double cover: keep w >= 0
    if q[0] < 0 or (q[0] == 0 and next((c for c in q[1:] if c != 0), 0) < 0):
        q = -q
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; picks the largest diagonal pivot for stability."""
    m = np.asarray(m, dtype=float)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return _canonical(np.array(q))


@dataclass(frozen=True)
class Rotation:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""

    quat: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "quat", _canonical(self.quat))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Rotation":
        return cls(matrix_to_quat(m))

    @classmethod
    def from_axis_angle(cls, v) -> "Rotation":
        return exp_so3(v)

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def as_axis_angle(self) -> np.ndarray:
        w = self.quat[0]
        xyz = self.quat[1:]
        s = np.linalg.norm(xyz)
        if s < SMALL_ANGLE:
            return 2.0 * xyz
        angle = 2.0 * np.arctan2(s, w)
        return xyz / s * angle

    def angle(self) -> float:
        return float(2.0 * np.arctan2(np.linalg.norm(self.quat[1:]), self.quat[0]))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        w1, x1, y1, z1 = self.quat
        w2, x2, y2, z2 = other.quat
        return Rotation(
            np.array(
                [
                    w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                    w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                    w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                    w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
                ]
            )
        )

    def inverse(self) -> "Rotation":
        return Rotation(self.quat * np.array([1.0, -1.0, -1.0, -1.0]))

    def apply(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.as_matrix().T


@dataclass(frozen=True)
class Transform:
    """Rigid map ``x -> R x + t``."""

    rotation: Rotation
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "Transform":
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> "Transform":
        return cls(Rotation.from_matrix(R), np.asarray(t, dtype=float).copy())

    def apply(self, x) -> np.ndarray:
        return self.rotation.apply(x) + self.translation

    def inverse(self) -> "Transform":
        inv = self.rotation.inverse()
        return Transform(inv, -inv.apply(self.translation))

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation.as_matrix()
        out[:3, 3] = self.translation
        return out


def compose(a: Transform, b: Transform) -> Transform:
    """``(a o b)(x) == a(b(x))``."""
    return Transform(a.rotation @ b.rotation, a.rotation.apply(b.translation) + a.translation)


def exp_so3(axis_angle) -> Rotation:
    v = np.asarray(axis_angle, dtype=float)
    theta = np.linalg.norm(v)
    if theta < SMALL_ANGLE:
        # first-order Taylor: q ~ (1, v/2)
        return Rotation(np.concatenate([[1.0 - theta * theta / 8.0], 0.5 * v]))
    half = 0.5 * theta
    return Rotation(np.concatenate([[np.cos(half)], np.sin(half) / theta * v]))


def positional_encoding(x: float, num_freqs: int) -> np.ndarray:
    """``[sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]``."""
    if num_freqs < 1:
        raise ValueError("num_freqs must be >= 1")
    return positional_encoding_batch(np.array([x], dtype=float), num_freqs)[0]


def positional_encoding_batch(x: np.ndarray, num_freqs: int) -> np.ndarray:
    if num_freqs < 1:
        raise ValueError("num_freqs must be >= 1")
    x = np.asarray(x, dtype=float)
    arg = np.pi * x[:, None] * (2.0 ** np.arange(num_freqs))[None, :]
    out = np.empty((x.shape[0], 2 * num_freqs))
    out[:, 0::2] = np.sin(arg)
    out[:, 1::2] = np.cos(arg)
    return out


# --- batched helpers used by the optimizer ---------------------------------

def hat_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def exp_so3_batch(v: np.ndarray) -> np.ndarray:
    """Rodrigues formula on ``(..., 3)`` axis-angles, returns ``(..., 3, 3)``."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    K = hat_batch(v)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def exp_so3_jacobian(v: np.ndarray) -> np.ndarray:
    """Partial derivatives ``dR/dv_i`` for ``(..., 3)`` inputs, shape ``(..., 3, 3, 3)``.

    Uses dR/dv_i = (v_i [v]x + [v x (I - R) e_i]x) R / |v|^2 away from zero and
    the second-order Taylor expansion of the exponential near zero.
    """
    v = np.asarray(v, dtype=float)
    R = exp_so3_batch(v)
    theta2 = np.sum(v * v, axis=-1)
    small = theta2 < 1e-12
    E = np.eye(3)
    Kv = hat_batch(v)
    out = np.empty(v.shape[:-1] + (3, 3, 3))
    safe = np.where(small, 1.0, theta2)
    IR = E - R
    for i in range(3):
        Ki = hat_batch(np.broadcast_to(E[i], v.shape))
        w = np.cross(v, IR[..., :, i])
        big = (v[..., i, None, None] * Kv + hat_batch(w)) @ R / safe[..., None, None]
        taylor = Ki + 0.5 * (Ki @ Kv + Kv @ Ki)
        out[..., i, :, :] = np.where(small[..., None, None], taylor, big)
    return out
