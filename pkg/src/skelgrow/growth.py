"""Parent-joint selection, joint growth and the extra-joint decoders.

Two decoders produce each grown joint's canonical offset and per-frame local
rotation (axis-angle through ``exp_so3``):

* :class:`TableDecoder` stores both explicitly, one rotation per training frame.
* :class:`MLPDecoder` maps positional encodings of the entry index (and the
  timestamp, for rotations) through two ReLU MLPs.

Both expose ``params`` plus ``evaluate``/``backward`` so the trainer can treat
them uniformly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .kinematics import CanonicalCloud, JointTree, extended_prior
from .mathcore import Rotation, exp_so3, positional_encoding_batch

LAST_LAYER_SCALE = 1e-2
EXTRA_WEIGHT_FLOOR = 1e-7


class GrowthError(ValueError):
    pass


# --- parent selection ------------------------------------------------------

def select_parent_joints(g_J, mode: str = "relative", value: float = 0.5) -> list[int]:
    """Longest prefix of joints, sorted by descending ``g_J``, that clears the threshold.

    ``mode="absolute"`` compares against ``value`` directly; ``"relative"``
    against ``value * max(g_J)``. Ties keep ascending joint order.
    """
    g = np.asarray(getattr(g_J, "g_J", g_J), dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("g_J must be finite")
    if mode == "absolute":
        if value <= 0:
            raise ValueError("absolute threshold must be positive")
        thr = value
    elif mode == "relative":
        if not 0 < value <= 1:
            raise ValueError("relative threshold must lie in (0, 1]")
        if g.size == 0 or g.max() <= 0:
            return []
        thr = value * g.max()
    else:
        raise ValueError(f"unknown threshold mode {mode!r}")
    order = np.argsort(-g, kind="stable")
    out = []
    for k in order:
        if g[k] < thr:
            break
        out.append(int(k))
    return out


# --- MLP with manual reverse mode -----------------------------------------

class MLP:
    """ReLU MLP: ``depth`` hidden layers of ``width`` units, linear output."""

    def __init__(self, in_dim, out_dim, depth, width, rng, last_scale=LAST_LAYER_SCALE):
        dims = [in_dim] + [width] * depth + [out_dim]
        self.weights = []
        self.biases = []
        for li, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            if li == len(dims) - 2:
                bound = last_scale / np.sqrt(a)
            else:
                bound = np.sqrt(6.0 / a)
            self.weights.append(rng.uniform(-bound, bound, size=(a, b)))
            self.biases.append(np.zeros(b))

    @property
    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def forward(self, x):
        acts = [x]
        h = x
        n = len(self.weights)
        for li, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if li < n - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, gout):
        grads = []
        g = gout
        n = len(self.weights)
        for li in range(n - 1, -1, -1):
            if li < n - 1:
                g = g * (acts[li + 1] > 0)
            grads.append(g.sum(axis=0))
            grads.append(acts[li].T @ g)
            g = g @ self.weights[li].T
        grads.reverse()  # [W0, b0, W1, b1, ...]
        return grads

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params)


# --- decoders --------------------------------------------------------------

class TableDecoder:
    mode = "table"

    def __init__(self, timestamps, count: int = 0, interpolation: str = "linear"):
        self.timestamps = np.asarray(timestamps, dtype=float)
        self.offsets = np.zeros((count, 3))
        self.axis_angle = np.zeros((count, self.timestamps.shape[0], 3))
        self.interpolation = interpolation

    @property
    def count(self) -> int:
        return self.offsets.shape[0]

    @property
    def params(self):
        return [self.offsets, self.axis_angle]

    def extend(self, n: int, rng=None) -> None:
        self.offsets = np.concatenate([self.offsets, np.zeros((n, 3))])
        self.axis_angle = np.concatenate([self.axis_angle, np.zeros((n, self.timestamps.shape[0], 3))])

    def set_offset(self, i, offset) -> None:
        self.offsets[i] = np.asarray(offset, dtype=float)

    def position(self, i: int) -> np.ndarray:
        return self.offsets[i].copy()

    def axis_angle_at(self, i: int, t: float) -> np.ndarray:
        ts = self.timestamps
        if self.interpolation == "nearest" or ts.size == 1:
            return self.axis_angle[i, int(np.argmin(np.abs(ts - t)))].copy()
        j = int(np.clip(np.searchsorted(ts, t), 1, ts.size - 1))
        a = (t - ts[j - 1]) / (ts[j] - ts[j - 1])
        a = min(max(a, 0.0), 1.0)
        if a == 0.0:
            return self.axis_angle[i, j - 1].copy()
        if a == 1.0:
            return self.axis_angle[i, j].copy()
        return (1 - a) * self.axis_angle[i, j - 1] + a * self.axis_angle[i, j]

    def evaluate(self, ts=None):
        """Offsets (Ke,3) and axis-angles (Ke,T,3) at ``ts`` (defaults to the stored frames)."""
        if ts is None or (len(ts) == len(self.timestamps) and np.array_equal(ts, self.timestamps)):
            return self.offsets.copy(), self.axis_angle.copy(), None
        aa = np.stack(
            [np.stack([self.axis_angle_at(i, t) for t in ts]) for i in range(self.count)]
        ) if self.count else np.zeros((0, len(ts), 3))
        return self.offsets.copy(), aa, "interp"

    def backward(self, cache, grad_offsets, grad_axis_angle):
        if cache is not None:
            raise ValueError("table gradients are only defined at the stored timestamps")
        return [np.array(grad_offsets, dtype=float), np.array(grad_axis_angle, dtype=float)]


class MLPDecoder:
    mode = "mlp"

    def __init__(
        self,
        count: int,
        rng,
        pos_depth=4,
        pos_width=256,
        rot_depth=4,
        rot_width=128,
        index_freqs=4,
        time_freqs=6,
    ):
        self._count = count
        self.index_freqs = index_freqs
        self.time_freqs = time_freqs
        self.arch = dict(pos_depth=pos_depth, pos_width=pos_width, rot_depth=rot_depth, rot_width=rot_width)
        self.phi_p = MLP(2 * index_freqs, 3, pos_depth, pos_width, rng)
        self.phi_r = MLP(2 * index_freqs + 2 * time_freqs, 3, rot_depth, rot_width, rng)

    @property
    def count(self) -> int:
        return self._count

    @property
    def params(self):
        return self.phi_p.params + self.phi_r.params

    def extend(self, n: int, rng=None) -> None:
        self._count += n

    def _index_code(self):
        idx = np.arange(self._count, dtype=float) / max(self._count, 1)
        return positional_encoding_batch(idx, self.index_freqs)

    def evaluate(self, ts):
        ts = np.asarray(ts, dtype=float)
        Ke, T = self._count, ts.shape[0]
        ic = self._index_code()
        dj, acts_p = self.phi_p.forward(ic)
        tc = positional_encoding_batch(ts, self.time_freqs)
        x = np.concatenate(
            [np.repeat(ic, T, axis=0), np.tile(tc, (Ke, 1))], axis=1
        )
        aa, acts_r = self.phi_r.forward(x)
        return dj, aa.reshape(Ke, T, 3), (acts_p, acts_r)

    def backward(self, cache, grad_offsets, grad_axis_angle):
        acts_p, acts_r = cache
        gp = self.phi_p.backward(acts_p, np.asarray(grad_offsets, dtype=float))
        gr = self.phi_r.backward(acts_r, np.asarray(grad_axis_angle, dtype=float).reshape(-1, 3))
        return gp + gr

    def position(self, i: int) -> np.ndarray:
        return self.evaluate(np.zeros(1))[0][i]

    def axis_angle_at(self, i: int, t: float) -> np.ndarray:
        return self.evaluate(np.array([t]))[1][i, 0]


def decoder_gradients(decoder, ts, grad_offsets, grad_axis_angle):
    """Reverse-mode gradients of a scalar loss w.r.t. every decoder parameter.

    ``grad_offsets`` (Ke,3) and ``grad_axis_angle`` (Ke,T,3) are the loss
    adjoints at the decoder outputs for timestamps ``ts``.
    """
    _, _, cache = decoder.evaluate(ts)
    return decoder.backward(cache, grad_offsets, grad_axis_angle)


# --- extra joint book --------------------------------------------------------

@dataclass
class ExtraJointBook:
    parents: list = field(default_factory=list)
    decoder: object = None
    creation_iteration: int = 0

    @property
    def count(self) -> int:
        return len(self.parents)

    def canonical_positions(self, tree: JointTree) -> np.ndarray:
        if not self.parents:
            return np.zeros((0, 3))
        offs = np.stack([decode_extra_position(self.decoder, i) for i in range(self.count)])
        return tree.rest_position[np.asarray(self.parents)] + offs


def _check_index(decoder, i):
    if decoder is None or not 0 <= i < decoder.count:
        raise IndexError(f"extra joint index {i} out of range")


def decode_extra_position(decoder, i: int) -> np.ndarray:
    _check_index(decoder, i)
    return decoder.position(i)


def decode_extra_rotation(decoder, i: int, t: float, override=None) -> Rotation:
    """Rotation of entry ``i`` at time ``t``; an explicit ``override`` bypasses the decoder."""
    if override is not None:
        return override if isinstance(override, Rotation) else exp_so3(override)
    _check_index(decoder, i)
    return exp_so3(decoder.axis_angle_at(i, t))


def extend_logits(cloud: CanonicalCloud, parents, split: float = 0.5, floor: float = EXTRA_WEIGHT_FLOOR):
    """Append one logit column per new joint, moving ``split`` of the parent's weight onto it.

    The new joint starts with its parent's transform, so the warp is unchanged;
    points with no parent weight get a ``floor`` share.
    """
    prior = extended_prior(cloud.prior, cloud.K)
    support = prior > 0
    z = np.where(support, np.log(np.where(support, prior, 1.0)) + cloud.logits, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    logZ = (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))[:, 0]
    logits = cloud.logits.copy()
    new_cols = []
    for q in parents:
        zq = z[:, q]
        share = np.where(np.isfinite(zq), split * np.exp(zq - logZ), 0.0)
        share = np.maximum(share, floor)
        new_cols.append(np.log(share) + logZ)
        if split < 1.0:
            logits[:, q] += np.log1p(-split)
    if new_cols:
        logits = np.concatenate([logits, np.stack(new_cols, axis=1)], axis=1)
    return CanonicalCloud(cloud.position.copy(), cloud.prior.copy(), logits)


def grow_joints(tree: JointTree, book: ExtraJointBook, J_s, cloud: CanonicalCloud | None = None,
                iteration: int = 0, rng=None, split: float = 0.5):
    """Append one identity-initialized child per selected parent.

    Returns ``(tree, book, cloud)``; ``cloud`` is ``None`` when none was given.
    """
    J_s = [int(j) for j in J_s]
    if len(set(J_s)) != len(J_s):
        raise GrowthError("duplicate parent in one growth call")
    for j in J_s:
        if not 0 <= j < tree.base_count:
            raise GrowthError(f"joint {j} is not a base joint")
    if not J_s:
        return tree, book, cloud
    if book.decoder is None:
        raise GrowthError("book has no decoder")
    new_tree = tree.with_extra(J_s, tree.rest_position[J_s])
    book.decoder.extend(len(J_s), rng)
    new_book = ExtraJointBook(list(book.parents) + J_s, book.decoder, iteration)
    new_cloud = extend_logits(cloud, J_s, split) if cloud is not None else None
    return new_tree, new_book, new_cloud


# --- joint book exchange format --------------------------------------------

def joint_book_to_dict(book: ExtraJointBook, tree: JointTree, timestamps) -> dict:
    timestamps = np.asarray(timestamps, dtype=float)
    pos = book.canonical_positions(tree)
    _, aa, _ = book.decoder.evaluate(timestamps) if book.count else (None, np.zeros((0, len(timestamps), 3)), None)
    return {
        "timestamps": [float(t) for t in timestamps],
        "entries": [
            {
                "parent": int(p),
                "canonical_position": [float(c) for c in pos[i]],
                "per_frame_axis_angle": [[float(c) for c in v] for v in aa[i]],
            }
            for i, p in enumerate(book.parents)
        ],
    }


def dumps_joint_book(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def loads_joint_book(text: str) -> dict:
    doc = json.loads(text)
    if not isinstance(doc, dict) or "entries" not in doc:
        raise ValueError("joint book needs an 'entries' list")
    n_frames = None
    for i, e in enumerate(doc["entries"]):
        missing = {"parent", "canonical_position", "per_frame_axis_angle"} - set(e)
        if missing:
            raise ValueError(f"entry {i} missing {sorted(missing)}")
        aa = np.asarray(e["per_frame_axis_angle"], dtype=float)
        if aa.ndim != 2 or aa.shape[1] != 3:
            raise ValueError(f"entry {i}: per_frame_axis_angle must be a list of 3-vectors")
        if n_frames is not None and aa.shape[0] != n_frames:
            raise ValueError(f"entry {i}: frame count {aa.shape[0]} differs from {n_frames}")
        n_frames = aa.shape[0]
    return doc


def table_decoder_from_book(doc: dict, tree: JointTree) -> TableDecoder:
    """Rebuild a table decoder from a joint-book document (offsets relative to parent rest)."""
    ts = np.asarray(doc["timestamps"], dtype=float)
    dec = TableDecoder(ts, len(doc["entries"]))
    for i, e in enumerate(doc["entries"]):
        dec.offsets[i] = np.asarray(e["canonical_position"]) - tree.rest_position[int(e["parent"])]
        dec.axis_angle[i] = np.asarray(e["per_frame_axis_angle"], dtype=float)
    return dec
