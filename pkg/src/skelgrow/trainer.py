"""Reconstruction loss, reverse-mode gradients and the warm-up -> growth -> refine schedule."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .assignment import (
    accumulate_joint_gradients,
    compute_motion_kernels,
    hybrid_weights,
    mk_weights,
)
from .growth import (
    ExtraJointBook,
    MLPDecoder,
    TableDecoder,
    grow_joints,
    select_parent_joints,
)
from .kinematics import (
    CanonicalCloud,
    blend_weights_backward,
    effective_blend_weights,
    fk_batch,
    joint_positions,
    leaf_joint_backward,
)
from .mathcore import exp_so3_batch, exp_so3_jacobian

log = logging.getLogger(__name__)

PRUNE_FLOOR = 16
CLONE_JITTER = 1e-3
PRUNE_PERCENTILE = 99.5
PRUNE_STREAK = 3


class TrainingError(RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class DensifyConfig:
    n_max: int = 30000
    a: float = 2.0
    b: float = 5000.0
    eps_d0: float = 5e-4
    enabled: bool = False
    interval: int = 100


@dataclass
class TrainConfig:
    lambda_mk: float = 0.4
    threshold_mode: str = "relative"
    threshold: float = 0.5
    warmup_iters: int = 8000
    total_iters: int = 12000
    lr_position: float = 1e-3
    lr_logits: float = 1e-2
    lr_decoder: float | None = None  # None: 1e-2 for the table decoder, 1e-3 for the MLP
    lr_final_ratio: float = 0.01
    loss_mode: str = "correspondence"
    decoder_mode: str = "table"
    growth_enabled: bool = True
    split: float = 0.5
    init_jitter: float = 0.0
    seed: int = 0
    mlp: dict = field(default_factory=lambda: dict(pos_depth=4, pos_width=256, rot_depth=4, rot_width=128,
                                                     index_freqs=4, time_freqs=6))
    densify: DensifyConfig = field(default_factory=DensifyConfig)

    def __post_init__(self):
        if isinstance(self.densify, dict):
            self.densify = DensifyConfig(**self.densify)

    def validate(self) -> None:
        if not 0 <= self.lambda_mk <= 1:
            raise ValueError("lambda_mk must lie in [0, 1]")
        if self.threshold_mode not in ("absolute", "relative"):
            raise ValueError("threshold_mode must be 'absolute' or 'relative'")
        if self.warmup_iters >= self.total_iters:
            raise ValueError("warmup_iters must be < total_iters")
        if self.warmup_iters < 1:
            raise ValueError("warmup_iters must be >= 1")
        for name in ("lr_position", "lr_logits", "decoder_lr", "lr_final_ratio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.loss_mode not in ("correspondence", "chamfer"):
            raise ValueError("loss_mode must be 'correspondence' or 'chamfer'")
        if self.decoder_mode not in ("table", "mlp"):
            raise ValueError("decoder_mode must be 'table' or 'mlp'")
        if not 0 < self.split <= 1:
            raise ValueError("split must lie in (0, 1]")

    @property
    def decoder_lr(self) -> float:
        if self.lr_decoder is not None:
            return self.lr_decoder
        return 1e-2 if self.decoder_mode == "table" else 1e-3

    def to_dict(self) -> dict:
        return asdict(self)


# --- densification threshold -------------------------------------------------

@dataclass
class DensifyController:
    eps_d0: float = 5e-4
    a: float = 2.0
    b: float = 5000.0
    n_max: int = 30000
    eps_d: float = 5e-4

    @classmethod
    def from_config(cls, cfg: DensifyConfig) -> "DensifyController":
        return cls(cfg.eps_d0, cfg.a, cfg.b, cfg.n_max, cfg.eps_d0)


def update_densify_threshold(ctrl: DensifyController, n: int) -> float:
    """Raise the clone threshold linearly once the point budget is reached."""
    if n < 0:
        raise ValueError("point count must be >= 0")
    if n >= ctrl.n_max:
        ctrl.eps_d = (ctrl.a + (n - ctrl.n_max) / ctrl.b) * ctrl.eps_d0
    else:
        ctrl.eps_d = ctrl.eps_d0
    return ctrl.eps_d


# --- loss ------------------------------------------------------------------------

def reconstruction_loss(pred, obs, mode: str = "correspondence"):
    """Mean squared 3D error and its gradient w.r.t. ``pred``.

    ``correspondence``: point ``p`` of ``pred`` is matched to point ``p`` of ``obs``.
    ``chamfer``: each predicted point is matched to its nearest observation in the
    same frame (one-sided), with the matching held fixed for the gradient.
    Returns ``(loss, grad, residual)`` where ``residual`` is the per-point,
    per-frame squared distance.
    """
    pred = np.asarray(pred, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if pred.ndim != 3 or obs.ndim != 3 or pred.shape[0] != obs.shape[0]:
        raise ValueError("pred and obs must be (N, P, 3) with matching frame counts")
    if obs.shape[1] == 0:
        raise ValueError("empty observation frame")
    N, P = pred.shape[:2]
    if mode == "correspondence":
        if obs.shape[1] != P:
            raise ValueError("correspondence mode needs equal point counts")
        diff = pred - obs
    elif mode == "chamfer":
        if P == 0:
            raise ValueError("empty predicted cloud")
        diff = np.empty_like(pred)
        for n in range(N):
            idx, _ = kernels.nearest_neighbors(pred[n], obs[n])
            diff[n] = pred[n] - obs[n][idx]
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    sq = np.einsum("npi,npi->np", diff, diff)
    loss = float(sq.sum() / (N * P))
    grad = 2.0 * diff / (N * P)
    return loss, grad, sq


def point_gradient_norms(grad_pred) -> np.ndarray:
    """Per-point gradient magnitude: L2 norm per frame, averaged over frames."""
    return np.sqrt(np.einsum("npi,npi->np", grad_pred, grad_pred)).mean(axis=0)


# --- optimizer ---------------------------------------------------------------------

class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def remap_rows(self, index: int, source: np.ndarray, fresh: np.ndarray) -> None:
        """Reorder moment rows of parameter ``index`` after densify/prune; clones start at zero."""
        for buf in (self.m, self.v):
            arr = buf[index][source].copy()
            arr[fresh] = 0.0
            buf[index] = arr


# --- model -----------------------------------------------------------------------------

@dataclass
class TrainedModel:
    tree: object  # JointTree incl. grown joints
    cloud: CanonicalCloud
    book: ExtraJointBook
    pose: object  # PoseSequence for every scene frame

    def extra_rotations(self, timestamps, overrides=None) -> np.ndarray:
        """Local rotation matrices (N, Ke, 3, 3) of the grown joints.

        ``overrides`` (Ke, N, 3) axis-angles replace the decoder entirely.
        """
        ts = np.asarray(timestamps, dtype=float)
        Ke = self.book.count
        if Ke == 0:
            return np.zeros((ts.shape[0], 0, 3, 3))
        if overrides is not None:
            aa = np.asarray(overrides, dtype=float)
            if aa.shape != (Ke, ts.shape[0], 3):
                raise ValueError(f"overrides must have shape {(Ke, ts.shape[0], 3)}, got {aa.shape}")
        else:
            _, aa, _ = self.book.decoder.evaluate(ts)
        return np.transpose(exp_so3_batch(aa), (1, 0, 2, 3))

    def current_tree(self):
        return _tree_with_offsets(self.tree, self.book)

    def warp(self, frames=None, overrides=None, freeze_base_frame=None) -> np.ndarray:
        """Observation-space points (N, P, 3) for the given pose frames."""
        frames = np.arange(self.pose.N) if frames is None else np.asarray(frames)
        base_frames = np.full(frames.shape, freeze_base_frame) if freeze_base_frame is not None else frames
        ts = self.pose.timestamps[frames]
        R_base = self.pose.rotation_matrices()[base_frames]
        root_t = self.pose.root_translation[base_frames]
        tree = self.current_tree()
        R_extra = self.extra_rotations(ts, overrides) if tree.extra_count else None
        R, t = fk_batch(tree, R_base, root_t, R_extra)
        return kernels.lbs_forward(self.cloud.position, effective_blend_weights(self.cloud), R, t)


def _tree_with_offsets(tree, book: ExtraJointBook):
    if book.count == 0:
        return tree
    base = tree.base()
    return base.with_extra(book.parents, book.canonical_positions(base))


def make_decoder(config: TrainConfig, timestamps, rng):
    if config.decoder_mode == "table":
        return TableDecoder(timestamps, 0)
    return MLPDecoder(0, rng, **config.mlp)


def nn_prior(positions, template_positions, template_weights) -> np.ndarray:
    """Skinning prior of each point: the weights of its nearest template point."""
    idx, _ = kernels.nearest_neighbors(positions, template_positions)
    return np.asarray(template_weights)[idx].copy()


# --- training state ----------------------------------------------------------------

class Trainer:
    """Owns parameters, optimizer state and the schedule for one scene."""

    def __init__(self, config: TrainConfig, scene):
        config.validate()
        if scene.N < 2:
            raise ValueError("scene needs at least 2 frames")
        self.config = config
        self.scene = scene
        self.rng = np.random.default_rng(config.seed)
        self.train_frames = np.flatnonzero(~scene.held_out)
        self.eval_frames = np.flatnonzero(scene.held_out)
        pose = scene.pose
        self.timestamps = pose.timestamps[self.train_frames]
        self.base_R = pose.rotation_matrices()[self.train_frames]
        self.root_t = pose.root_translation[self.train_frames]
        self.obs = scene.observations[self.train_frames]

        tree = scene.tree.base()
        x0 = scene.canonical.copy()
        if config.init_jitter > 0:
            x0 = x0 + config.init_jitter * self.rng.normal(size=x0.shape)
        tp, tw = scene.template()
        self.cloud = CanonicalCloud(x0, nn_prior(x0, tp, tw))
        self.tree = tree
        self.book = ExtraJointBook([], make_decoder(config, self.timestamps, self.rng), 0)
        self.phase = "warmup"
        self.iteration = 0
        self.grad_norm_sum = np.zeros(self.cloud.P)
        self.grad_norm_count = 0
        self.densify = DensifyController.from_config(config.densify)
        self.streaks = np.zeros(self.cloud.P, dtype=np.int64)
        self.densify_accum = np.zeros(self.cloud.P)
        self.densify_count = 0
        self.last_residual = None
        self.trace = []
        self.J_s = []
        self.g_J = None
        self.warmup_loss = None
        self._make_optimizers()

    # parameter groups
    def _make_optimizers(self):
        self.opt_pos = Adam([self.cloud.position])
        self.opt_logits = Adam([self.cloud.logits])
        self.opt_dec = Adam(self.book.decoder.params) if self.book.count else None

    def model(self) -> TrainedModel:
        return TrainedModel(self.tree, self.cloud, self.book, self.scene.pose)

    def lr(self, base: float) -> float:
        frac = self.iteration / max(self.config.total_iters, 1)
        return base * self.config.lr_final_ratio**frac

    # forward + backward
    def loss_and_grads(self):
        """Loss and exact gradients for positions, logits and decoder parameters."""
        cfg = self.config
        tree = _tree_with_offsets(self.tree, self.book)
        Ke = self.book.count
        if Ke:
            dj, aa, cache = self.book.decoder.evaluate(self.timestamps)
            R_extra = np.transpose(exp_so3_batch(aa), (1, 0, 2, 3))
        else:
            R_extra = None
        R, t = fk_batch(tree, self.base_R, self.root_t, R_extra)
        W = effective_blend_weights(self.cloud)
        pred = kernels.lbs_forward(self.cloud.position, W, R, t)
        loss, g_pred, residual = reconstruction_loss(pred, self.obs, cfg.loss_mode)
        gx, gW, gR, gt = kernels.lbs_backward(self.cloud.position, W, R, t, g_pred)
        grads = {"position": gx, "logits": blend_weights_backward(W, gW), "decoder": None}
        if Ke:
            K0 = tree.base_count
            L = np.concatenate([self.base_R, R_extra], axis=1)
            g_dj = np.zeros((Ke, 3))
            g_aa = np.zeros_like(aa)
            for e in range(Ke):
                g_local, g_rest = leaf_joint_backward(tree, R, L, gR, gt, K0 + e)
                J = exp_so3_jacobian(aa[e])  # (T, 3, 3, 3)
                g_aa[e] = np.einsum("nij,nkij->nk", g_local, J)
                g_dj[e] = g_rest
            grads["decoder"] = self.book.decoder.backward(cache, g_dj, g_aa)
        return loss, grads, pred, g_pred, residual

    def train_step(self) -> float:
        cfg = self.config
        loss, grads, pred, g_pred, residual = self.loss_and_grads()
        if not np.isfinite(loss):
            raise TrainingError("loss is not finite", self.iteration)
        norms = point_gradient_norms(g_pred)
        self.last_point_norms = norms
        if self.phase == "warmup":
            self.grad_norm_sum += norms
            self.grad_norm_count += 1
        self.densify_accum += norms
        self.densify_count += 1
        self.last_residual = residual.mean(axis=0)
        self.last_pred = pred
        self.opt_pos.step([grads["position"]], self.lr(cfg.lr_position))
        self.opt_logits.step([grads["logits"]], cfg.lr_logits)
        if self.opt_dec is not None:
            self.opt_dec.step(grads["decoder"], self.lr(cfg.decoder_lr))
        self.iteration += 1
        if not (np.all(np.isfinite(self.cloud.position)) and np.all(np.isfinite(self.cloud.logits))):
            raise TrainingError("parameters became non-finite", self.iteration)
        if (cfg.densify.enabled and cfg.loss_mode == "chamfer"
                and self.iteration % cfg.densify.interval == 0):
            self._densify()
        self.trace.append((self.iteration, self.phase, loss, self.cloud.P, self.densify.eps_d))
        return loss

    def _densify(self):
        eps_d = update_densify_threshold(self.densify, self.cloud.P)
        mean_norm = self.densify_accum / max(self.densify_count, 1)
        res = densify_and_prune(
            self.cloud, mean_norm, eps_d, residuals=self.last_residual, streaks=self.streaks,
            rng=self.rng, loss_mode=self.config.loss_mode,
        )
        src, fresh = res.source, res.fresh
        self.cloud = res.cloud
        self.streaks = res.streaks
        self.grad_norm_sum = self.grad_norm_sum[src] * ~fresh
        self.densify_accum = np.zeros(self.cloud.P)
        self.densify_count = 0
        old_pos, old_log = self.opt_pos, self.opt_logits
        self.opt_pos = Adam([self.cloud.position])
        self.opt_logits = Adam([self.cloud.logits])
        for new, old in ((self.opt_pos, old_pos), (self.opt_logits, old_log)):
            new.t = old.t
            new.m, new.v = old.m, old.v
            new.remap_rows(0, src, fresh)

    # schedule
    def motion_kernel_trajectories(self):
        """Point and base-joint trajectories over the training frames."""
        base_tree = self.tree.base()
        R, t = fk_batch(base_tree, self.base_R, self.root_t)
        joints = joint_positions(base_tree, R, t)
        if self.config.loss_mode == "correspondence":
            points = self.obs
        else:
            W = effective_blend_weights(self.cloud)[:, : base_tree.K]
            points = kernels.lbs_forward(self.cloud.position, W, R, t)
        return points, joints

    def assignment_weights(self):
        points, joints = self.motion_kernel_trajectories()
        w_mk = mk_weights(compute_motion_kernels(points, joints))
        w_lbs = effective_blend_weights(self.cloud)[:, : self.tree.base_count]
        w_lbs = w_lbs / w_lbs.sum(axis=1, keepdims=True)
        return hybrid_weights(w_mk, w_lbs, self.config.lambda_mk), w_mk, w_lbs

    def localize(self):
        """Joint gradient accumulation over warm-up and parent selection."""
        hyb, _, _ = self.assignment_weights()
        mean_norms = self.grad_norm_sum / max(self.grad_norm_count, 1)
        self.g_J = accumulate_joint_gradients(mean_norms, hyb)
        self.g_J.accumulation_count = self.grad_norm_count
        self.J_s = select_parent_joints(self.g_J, self.config.threshold_mode, self.config.threshold)
        return self.J_s

    def grow(self, J_s):
        self.tree, self.book, self.cloud = grow_joints(
            self.tree, self.book, J_s, self.cloud, iteration=self.iteration, rng=self.rng,
            split=self.config.split,
        )
        old = self.opt_logits
        pad = self.cloud.K - old.m[0].shape[1]
        self.opt_pos.params = [self.cloud.position]
        self.opt_logits = Adam([self.cloud.logits])
        self.opt_logits.t = old.t
        self.opt_logits.m = [np.pad(old.m[0], ((0, 0), (0, pad)))]
        self.opt_logits.v = [np.pad(old.v[0], ((0, 0), (0, pad)))]
        self.opt_dec = Adam(self.book.decoder.params) if self.book.count else None

    def run(self):
        cfg = self.config
        while self.iteration < cfg.warmup_iters:
            self.train_step()
        self.warmup_loss = self.loss_and_grads()[0]
        if cfg.growth_enabled:
            self.localize()
            self.grow(self.J_s)
        self.phase = "refine"
        while self.iteration < cfg.total_iters:
            self.train_step()
        return self.model()

    # evaluation
    def evaluate(self, frames) -> float:
        """Mean Euclidean error on ``frames`` (chamfer mode: mean nearest-neighbour distance)."""
        frames = np.asarray(frames)
        if frames.size == 0:
            return 0.0
        pred = self.model().warp(frames)
        obs = self.scene.observations[frames]
        if self.config.loss_mode == "correspondence":
            return float(np.linalg.norm(pred - obs, axis=-1).mean())
        d = [np.sqrt(kernels.nearest_neighbors(pred[i], obs[i])[1]).mean() for i in range(frames.size)]
        return float(np.mean(d))

    def report(self) -> dict:
        losses = [row[2] for row in self.trace]
        warm = [row[2] for row in self.trace if row[1] == "warmup"]
        return {
            "grown": [int(j) for j in self.J_s],
            "g_J": [float(v) for v in self.g_J.g_J] if self.g_J is not None else [],
            "losses": {
                "warmup_final": float(self.warmup_loss) if self.warmup_loss is not None else (warm[-1] if warm else None),
                "final": float(self.loss_and_grads()[0]),
                "first": float(losses[0]) if losses else None,
            },
            "held_out_error": self.evaluate(self.eval_frames),
            "train_error": self.evaluate(self.train_frames),
            "iterations": int(self.iteration),
            "point_count": int(self.cloud.P),
            "joint_count": int(self.tree.K),
            "decoder_mode": self.config.decoder_mode,
            "loss_mode": self.config.loss_mode,
        }


def run_training(config: TrainConfig, scene):
    """Warm-up, motion-kernel-guided localization, growth and refinement.

    Returns ``(model, report, trainer)``.
    """
    trainer = Trainer(config, scene)
    model = trainer.run()
    return model, trainer.report(), trainer


# --- density control -----------------------------------------------------------

@dataclass
class DensifyResult:
    cloud: CanonicalCloud
    source: np.ndarray  # row in the old cloud each new row came from
    fresh: np.ndarray  # True for newly cloned rows
    streaks: np.ndarray


def densify_and_prune(cloud: CanonicalCloud, accumulated_grad_norms, eps_d: float, residuals=None,
                      streaks=None, rng=None, loss_mode: str = "chamfer") -> DensifyResult:
    """Clone high-gradient points and prune persistent chamfer outliers.

    Points whose accumulated gradient exceeds ``eps_d`` get a jittered copy
    (same prior row and logits). Points whose residual exceeds the 99.5th
    percentile at three consecutive calls are dropped, never below 16 points.
    """
    if loss_mode != "chamfer":
        raise ValueError("densify_and_prune changes the point count; it needs chamfer loss mode")
    rng = np.random.default_rng(0) if rng is None else rng
    P = cloud.P
    g = np.asarray(accumulated_grad_norms, dtype=float)
    streaks = np.zeros(P, dtype=np.int64) if streaks is None else np.asarray(streaks).copy()

    keep = np.ones(P, dtype=bool)
    if residuals is not None and P > PRUNE_FLOOR:
        r = np.asarray(residuals, dtype=float)
        high = r > np.percentile(r, PRUNE_PERCENTILE)
        streaks = np.where(high, streaks + 1, 0)
        drop = np.flatnonzero(streaks >= PRUNE_STREAK)
        budget = P - PRUNE_FLOOR
        keep[drop[:budget]] = False

    clone = np.flatnonzero((g > eps_d) & keep)
    kept = np.flatnonzero(keep)
    source = np.concatenate([kept, clone])
    fresh = np.concatenate([np.zeros(kept.size, dtype=bool), np.ones(clone.size, dtype=bool)])
    pos = cloud.position[source].copy()
    if clone.size:
        pos[kept.size:] += CLONE_JITTER * rng.normal(size=(clone.size, 3))
    new = CanonicalCloud(pos, cloud.prior[source].copy(), cloud.logits[source].copy())
    new_streaks = np.where(fresh, 0, streaks[source])
    return DensifyResult(new, source, fresh, new_streaks)
