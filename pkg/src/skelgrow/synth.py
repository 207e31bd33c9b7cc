"""Synthetic articulated scenes with decoupled attachments.

Body points are sampled around bone segments and skinned to their segment's
joint (blended with the parent near the segment start). Each attachment is a
rigid group of points bound one-hot to a hidden extra joint whose parent is
the host; the extra joint rotates independently of the body, which is exactly
what the base skeleton cannot explain.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .kinematics import JointTree, PoseSequence, fk_batch, joint_positions
from .mathcore import exp_so3_batch

# name, parent, rest, segment end, radius
HUMANOID = [
    ("pelvis", -1, (0.0, 1.00, 0.0), (0.0, 1.12, 0.0), 0.10),
    ("l_hip", 0, (0.10, 0.95, 0.0), (0.12, 0.50, 0.0), 0.06),
    ("r_hip", 0, (-0.10, 0.95, 0.0), (-0.12, 0.50, 0.0), 0.06),
    ("spine", 0, (0.0, 1.12, 0.0), (0.0, 1.50, 0.0), 0.10),
    ("l_shoulder", 3, (0.18, 1.45, 0.0), (0.40, 1.20, 0.0), 0.045),
    ("r_shoulder", 3, (-0.18, 1.45, 0.0), (-0.36, 1.22, 0.0), 0.045),
    ("r_elbow", 5, (-0.36, 1.22, 0.0), (-0.50, 1.00, 0.0), 0.04),
    ("r_wrist", 6, (-0.50, 1.00, 0.0), (-0.55, 0.90, 0.0), 0.035),
]
HUMANOID_NAMES = [row[0] for row in HUMANOID]
R_WRIST = HUMANOID_NAMES.index("r_wrist")
L_HIP = HUMANOID_NAMES.index("l_hip")
R_HIP = HUMANOID_NAMES.index("r_hip")

ATTACHMENT_KINDS = ("rigid_object", "loose_cloth")


class SceneSpecError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class Attachment:
    kind: str = "rigid_object"
    host: int = R_WRIST
    amplitude: float = 0.6  # radians of independent rotation
    n_points: int = 150
    length: float = 0.35
    direction: list | None = None  # random when omitted
    grip: float = 0.25  # pivot position along the host bone
    spread: float = 60.0  # max degrees between a random direction and the host bone


@dataclass
class SceneSpec:
    topology: str = "humanoid"  # humanoid | chain
    base_count: int = 8  # only used by "chain"
    n_frames: int = 60
    points_per_segment: int = 250
    attachments: list = field(default_factory=list)
    noise: float = 1e-3
    seed: int = 0
    pose_amplitude: float = 0.35
    blend_fraction: float = 0.15
    held_out_every: int = 10

    def __post_init__(self):
        self.attachments = [a if isinstance(a, Attachment) else Attachment(**a) for a in self.attachments]

    def validate(self) -> None:
        if self.topology not in ("humanoid", "chain"):
            raise SceneSpecError("topology", f"unknown topology {self.topology!r}")
        K0 = len(HUMANOID) if self.topology == "humanoid" else self.base_count
        if K0 < 2:
            raise SceneSpecError("base_count", "need at least 2 base joints")
        if self.n_frames < 2:
            raise SceneSpecError("n_frames", "need at least 2 frames")
        if self.points_per_segment < 1:
            raise SceneSpecError("points_per_segment", "must be >= 1")
        if self.noise < 0:
            raise SceneSpecError("noise", "must be >= 0")
        if self.pose_amplitude < 0:
            raise SceneSpecError("pose_amplitude", "must be >= 0")
        if self.held_out_every < 2:
            raise SceneSpecError("held_out_every", "must be >= 2")
        for i, a in enumerate(self.attachments):
            if a.kind not in ATTACHMENT_KINDS:
                raise SceneSpecError(f"attachments[{i}].kind", f"unknown kind {a.kind!r}")
            if not 0 <= a.host < K0:
                raise SceneSpecError(f"attachments[{i}].host", f"host {a.host} outside 0..{K0 - 1}")
            if a.amplitude < 0:
                raise SceneSpecError(f"attachments[{i}].amplitude", "must be >= 0")
            if a.n_points < 1:
                raise SceneSpecError(f"attachments[{i}].n_points", "must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    tree: JointTree  # base joints followed by the hidden extra joints
    pose: PoseSequence  # base pose
    extra_axis_angle: np.ndarray  # (N, Ke, 3)
    canonical: np.ndarray  # (P, 3)
    true_weights: np.ndarray  # (P, K)
    observations: np.ndarray  # (N, P, 3)
    labels: np.ndarray  # (P,) base joint each point belongs to (host for attachments)
    attachment: np.ndarray  # (P,) attachment index, -1 for body points
    held_out: np.ndarray  # (N,) bool

    @property
    def base_count(self) -> int:
        return self.tree.base_count

    @property
    def N(self) -> int:
        return self.observations.shape[0]

    @property
    def P(self) -> int:
        return self.observations.shape[1]

    @property
    def rigid(self) -> np.ndarray:
        return self.true_weights.max(axis=1) == 1.0

    @property
    def attached_joint(self) -> np.ndarray:
        """Joint in the true tree each point is bound to (argmax of true weights)."""
        return np.argmax(self.true_weights, axis=1)

    @property
    def body_mask(self) -> np.ndarray:
        return self.attachment < 0

    def template(self):
        """Body points and their true base-joint weights (the skinning prior source)."""
        m = self.body_mask
        return self.canonical[m], self.true_weights[m, : self.base_count]

    def true_transforms(self):
        R_base = self.pose.rotation_matrices()
        R_extra = exp_so3_batch(self.extra_axis_angle)
        return fk_batch(self.tree, R_base, self.pose.root_translation, R_extra)

    def true_joint_trajectories(self) -> np.ndarray:
        R, t = self.true_transforms()
        return joint_positions(self.tree, R, t)

    def base_joint_trajectories(self) -> np.ndarray:
        return self.true_joint_trajectories()[:, : self.base_count]

    def clean_observations(self) -> np.ndarray:
        R, t = self.true_transforms()
        return kernels.lbs_forward(self.canonical, self.true_weights, R, t)


def _topology(spec: SceneSpec):
    if spec.topology == "humanoid":
        parents = [r[1] for r in HUMANOID]
        rest = np.array([r[2] for r in HUMANOID])
        ends = np.array([r[3] for r in HUMANOID])
        radii = np.array([r[4] for r in HUMANOID])
        return parents, rest, ends, radii
    K0 = spec.base_count
    parents = [-1] + list(range(K0 - 1))
    rest = np.zeros((K0, 3))
    rest[:, 1] = -0.25 * np.arange(K0)
    ends = rest + np.array([0.0, -0.25, 0.0])
    radii = np.full(K0, 0.04)
    return parents, rest, ends, radii


def _orthonormal(axis):
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def _sample_cylinder(rng, start, end, radius, n):
    axis = end - start
    u, v = _orthonormal(axis)
    s = rng.random(n)
    r = radius * np.sqrt(rng.random(n))
    phi = rng.uniform(0, 2 * np.pi, n)
    pts = start + s[:, None] * axis + (r * np.cos(phi))[:, None] * u + (r * np.sin(phi))[:, None] * v
    return pts, s


def _outward_direction(rng, bone, min_cos):
    """Random unit vector within a cone around the bone direction."""
    b = bone / np.linalg.norm(bone)
    while True:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        if d @ b >= min_cos - 1e-12:
            return d


def _smooth_axis_angle(rng, n_joints, ts, amplitude, n_freqs=2):
    """Band-limited sinusoidal axis-angle trajectories, shape (N, n_joints, 3)."""
    out = np.zeros((ts.shape[0], n_joints, 3))
    for f in range(1, n_freqs + 1):
        a = amplitude * rng.uniform(-1, 1, size=(n_joints, 3)) / f
        ph = rng.uniform(0, 2 * np.pi, size=(n_joints, 3))
        out += a[None] * np.sin(2 * np.pi * f * ts[:, None, None] + ph[None])
    return out


def _axis_angle_to_quat(v):
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(theta < 1e-12, 1.0, theta)
    q = np.concatenate([np.cos(theta / 2), np.where(theta < 1e-12, 0.5 * v, np.sin(theta / 2) * v / safe)], axis=-1)
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0, -q, q)


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    parents, rest, ends, radii = _topology(spec)
    K0 = len(parents)
    N = spec.n_frames
    ts = np.linspace(0.0, 1.0, N)

    # body points: rigid core, blended with the parent near the bone start and
    # with a single child near the bone end
    children = [[c for c in range(K0) if parents[c] == k] for k in range(K0)]
    bf = spec.blend_fraction
    pts, weights, labels = [], [], []
    for k in range(K0):
        p, s = _sample_cylinder(rng, rest[k], ends[k], radii[k], spec.points_per_segment)
        w = np.zeros((p.shape[0], K0))
        w[:, k] = 1.0
        if bf > 0 and parents[k] >= 0:
            m = s < bf
            w[m, k] = 0.55 + 0.45 * s[m] / bf
            w[m, parents[k]] = 1.0 - w[m, k]
        if bf > 0 and len(children[k]) == 1:
            m = s > 1.0 - bf
            w[m, k] = 0.55 + 0.45 * (1.0 - s[m]) / bf
            w[m, children[k][0]] = 1.0 - w[m, k]
        pts.append(p)
        weights.append(w)
        labels.append(np.full(p.shape[0], k))
    body = np.concatenate(pts)
    body_w = np.concatenate(weights)
    body_labels = np.concatenate(labels)

    # attachments: one hidden extra joint each
    Ke = len(spec.attachments)
    extra_parents, extra_rest, att_pts, att_labels, att_ids = [], [], [], [], []
    for i, a in enumerate(spec.attachments):
        h = a.host
        if a.kind == "rigid_object":
            pivot = rest[h] + a.grip * (ends[h] - rest[h])
            if a.direction is not None:
                d = np.asarray(a.direction, dtype=float)
            else:
                d = _outward_direction(rng, ends[h] - rest[h], np.cos(np.radians(a.spread)))
            d /= np.linalg.norm(d)
            p, _ = _sample_cylinder(rng, pivot, pivot + a.length * d, 0.015, a.n_points)
        else:  # loose_cloth: open shell hanging around the host segment
            bone = ends[h] - rest[h]
            u, v = _orthonormal(bone)
            pivot = rest[h] + 0.05 * bone
            s = rng.uniform(0.15, 0.15 + a.length / np.linalg.norm(bone), a.n_points)
            s = np.minimum(s, 1.0)
            phi = rng.uniform(0, 2 * np.pi, a.n_points)
            r = radii[h] + 0.06
            p = rest[h] + s[:, None] * bone + r * (np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v)
        extra_parents.append(h)
        extra_rest.append(pivot)
        att_pts.append(p)
        att_labels.append(np.full(p.shape[0], h))
        att_ids.append(np.full(p.shape[0], i))

    base_tree = JointTree(parents, rest, K0)
    tree = base_tree.with_extra(extra_parents, np.array(extra_rest).reshape(-1, 3)) if Ke else base_tree

    n_att = sum(p.shape[0] for p in att_pts)
    P = body.shape[0] + n_att
    canonical = np.concatenate([body] + att_pts) if Ke else body
    true_w = np.zeros((P, K0 + Ke))
    true_w[: body.shape[0], :K0] = body_w
    row = body.shape[0]
    for i, p in enumerate(att_pts):
        true_w[row : row + p.shape[0], K0 + i] = 1.0
        row += p.shape[0]
    labels = np.concatenate([body_labels] + att_labels) if Ke else body_labels
    attachment = np.concatenate([np.full(body.shape[0], -1)] + att_ids) if Ke else np.full(P, -1)

    # motion
    base_aa = _smooth_axis_angle(rng, K0, ts, spec.pose_amplitude)
    root_t = _smooth_axis_angle(rng, 1, ts, 0.1)[:, 0]
    extra_aa = np.zeros((N, Ke, 3))
    for i, a in enumerate(spec.attachments):
        if a.kind == "rigid_object":
            extra_aa[:, i] = _smooth_axis_angle(rng, 1, ts, a.amplitude)[:, 0]
        else:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            phase = rng.uniform(0, 2 * np.pi)
            extra_aa[:, i] = a.amplitude * np.sin(2 * np.pi * ts + phase)[:, None] * axis

    pose = PoseSequence(ts, _axis_angle_to_quat(base_aa), root_t)
    R, t = fk_batch(tree, pose.rotation_matrices(), root_t, exp_so3_batch(extra_aa) if Ke else None)
    clean = kernels.lbs_forward(canonical, true_w, R, t)
    obs = clean + spec.noise * rng.normal(size=clean.shape) if spec.noise > 0 else clean

    held = np.zeros(N, dtype=bool)
    held[spec.held_out_every // 2 :: spec.held_out_every] = True

    return SyntheticScene(
        spec=spec,
        tree=tree,
        pose=pose,
        extra_axis_angle=extra_aa,
        canonical=canonical,
        true_weights=true_w,
        observations=obs,
        labels=labels.astype(np.int64),
        attachment=attachment.astype(np.int64),
        held_out=held,
    )


def oracle_assignment(scene: SyntheticScene) -> np.ndarray:
    """Ground-truth base joint per point; attachment points map to their host."""
    return scene.labels.copy()


# --- persistence: JSON header + little-endian float64 sidecar --------------

SCENE_FORMAT = "skelgrow-scene/1"
_ARRAYS = [
    ("parent", lambda s: s.tree.parent),
    ("rest_position", lambda s: s.tree.rest_position),
    ("timestamps", lambda s: s.pose.timestamps),
    ("local_rotation", lambda s: s.pose.local_rotation),
    ("root_translation", lambda s: s.pose.root_translation),
    ("extra_axis_angle", lambda s: s.extra_axis_angle),
    ("canonical", lambda s: s.canonical),
    ("true_weights", lambda s: s.true_weights),
    ("observations", lambda s: s.observations),
    ("labels", lambda s: s.labels),
    ("attachment", lambda s: s.attachment),
    ("held_out", lambda s: s.held_out),
]


def pack_arrays(arrays):
    """Concatenate arrays as little-endian float64; returns (header entries, bytes)."""
    entries, chunks, offset = [], [], 0
    for name, arr in arrays:
        a = np.ascontiguousarray(np.asarray(arr), dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "kind": np.asarray(arr).dtype.kind})
        b = a.tobytes()
        chunks.append(b)
        offset += len(b)
    return entries, b"".join(chunks)


def unpack_arrays(entries, blob: bytes) -> dict:
    out = {}
    for e in entries:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
        if e.get("kind") in ("i", "u"):
            a = a.astype(np.int64)
        elif e.get("kind") == "b":
            a = a.astype(bool)
        out[e["name"]] = a
    return out


def scene_to_bytes(scene: SyntheticScene, sidecar_name: str):
    entries, blob = pack_arrays([(n, f(scene)) for n, f in _ARRAYS])
    header = {
        "format": SCENE_FORMAT,
        "seed": scene.spec.seed,
        "spec": scene.spec.to_dict(),
        "base_count": scene.base_count,
        "sidecar": sidecar_name,
        "byte_order": "little",
        "dtype": "float64",
        "layout": "row-major",
        "arrays": entries,
    }
    return (json.dumps(header, indent=2, sort_keys=True) + "\n").encode(), blob


def scene_from_bytes(header_bytes: bytes, blob: bytes) -> SyntheticScene:
    header = json.loads(header_bytes)
    if header.get("format") != SCENE_FORMAT:
        raise ValueError(f"not a scene file (format={header.get('format')!r})")
    a = unpack_arrays(header["arrays"], blob)
    spec = SceneSpec(**header["spec"])
    tree = JointTree(a["parent"], a["rest_position"], header["base_count"])
    pose = PoseSequence(a["timestamps"], a["local_rotation"], a["root_translation"])
    return SyntheticScene(
        spec=spec,
        tree=tree,
        pose=pose,
        extra_axis_angle=a["extra_axis_angle"],
        canonical=a["canonical"],
        true_weights=a["true_weights"],
        observations=a["observations"],
        labels=a["labels"],
        attachment=a["attachment"],
        held_out=a["held_out"],
    )
