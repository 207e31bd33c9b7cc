"""Exchange formats, model persistence and the command implementations behind ``skelgrow``."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .assignment import argmax_accuracy
from .growth import (
    ExtraJointBook,
    MLPDecoder,
    TableDecoder,
    dumps_joint_book,
    joint_book_to_dict,
    loads_joint_book,
)
from .kinematics import CanonicalCloud, JointTree, PoseSequence, effective_blend_weights
from .synth import (
    Attachment,
    SceneSpec,
    SceneSpecError,
    generate_scene,
    pack_arrays,
    scene_from_bytes,
    scene_to_bytes,
    unpack_arrays,
)
from .trainer import DensifyConfig, TrainConfig, TrainedModel, run_training

MODEL_FORMAT = "skelgrow-model/1"


class ConfigError(ValueError):
    """Invalid or unknown configuration content (exit status 2)."""


# --- atomic writes -----------------------------------------------------------

def write_bytes_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path, text: str) -> None:
    write_bytes_atomic(path, text.encode())


def dumps_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# --- PLY ---------------------------------------------------------------------

def _fmt(v: float) -> str:
    s = f"{v:.9g}"
    return "0" if s == "-0" else s


def ply_text(points) -> str:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("PLY export needs finite coordinates")
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    lines += [" ".join(_fmt(c) for c in p) for p in pts]
    return "\n".join(lines) + "\n"


def export_ply(points, path) -> None:
    write_text_atomic(path, ply_text(points))


def read_ply(path) -> np.ndarray:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    end = None
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[2])
        if line == "end_header":
            end = i
            break
    if n is None or end is None:
        raise ValueError(f"{path}: malformed PLY header")
    body = lines[end + 1 : end + 1 + n]
    if len(body) != n:
        raise ValueError(f"{path}: expected {n} vertices, found {len(body)}")
    return np.array([[float(c) for c in l.split()] for l in body], dtype=float).reshape(n, 3)


# --- loss trace ----------------------------------------------------------------

def loss_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "phase", "loss", "point_count", "eps_d"])
    for it, phase, loss, n, eps in trace:
        w.writerow([it, phase, repr(float(loss)), n, repr(float(eps))])
    return buf.getvalue()


# --- scenes ----------------------------------------------------------------------

def scene_spec_from_dict(doc: dict) -> SceneSpec:
    if not isinstance(doc, dict):
        raise ConfigError("scene spec must be a JSON object")
    known = {f.name for f in dataclasses.fields(SceneSpec)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown scene spec keys: {sorted(unknown)}")
    doc = dict(doc)
    atts = []
    akeys = {f.name for f in dataclasses.fields(Attachment)}
    for i, a in enumerate(doc.pop("attachments", [])):
        if not isinstance(a, dict) or set(a) - akeys:
            raise ConfigError(f"attachments[{i}]: unknown keys {sorted(set(a) - akeys) if isinstance(a, dict) else a}")
        atts.append(Attachment(**a))
    try:
        return SceneSpec(attachments=atts, **doc)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def save_scene(scene, path) -> None:
    path = Path(path)
    sidecar = path.with_suffix(".bin")
    header, blob = scene_to_bytes(scene, sidecar.name)
    write_bytes_atomic(sidecar, blob)
    write_bytes_atomic(path, header)


def load_scene(path):
    path = Path(path)
    header = path.read_bytes()
    side = json.loads(header).get("sidecar")
    if not side:
        raise ValueError(f"{path}: no sidecar named in header")
    return scene_from_bytes(header, (path.parent / side).read_bytes())


# --- run configuration ------------------------------------------------------------

@dataclasses.dataclass
class RunConfigFile:
    train: TrainConfig
    scene: SceneSpec | None = None
    scene_path: str | None = None
    out: str | None = None


def parse_run_config(doc: dict, base_dir=".") -> RunConfigFile:
    """TrainConfig fields plus ``scene`` (inline spec) or ``scene_path``, and ``out``."""
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    extra = {"scene", "scene_path", "out"}
    unknown = set(doc) - train_keys - extra
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    tdoc = {k: v for k, v in doc.items() if k in train_keys}
    if "densify" in tdoc:
        dkeys = {f.name for f in dataclasses.fields(DensifyConfig)}
        if not isinstance(tdoc["densify"], dict) or set(tdoc["densify"]) - dkeys:
            raise ConfigError(f"densify: unknown keys, expected a subset of {sorted(dkeys)}")
    if "mlp" in tdoc:
        allowed = {"pos_depth", "pos_width", "rot_depth", "rot_width", "index_freqs", "time_freqs"}
        if not isinstance(tdoc["mlp"], dict) or set(tdoc["mlp"]) - allowed:
            raise ConfigError(f"mlp: unknown keys, expected a subset of {sorted(allowed)}")
        tdoc["mlp"] = {**TrainConfig().mlp, **tdoc["mlp"]}
    try:
        train = TrainConfig(**tdoc)
        train.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train config: {e}") from e
    if ("scene" in doc) == ("scene_path" in doc):
        raise ConfigError("config needs exactly one of 'scene' or 'scene_path'")
    scene = scene_spec_from_dict(doc["scene"]) if "scene" in doc else None
    scene_path = str(Path(base_dir) / doc["scene_path"]) if "scene_path" in doc else None
    return RunConfigFile(train, scene, scene_path, doc.get("out"))


def read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e


# --- models -----------------------------------------------------------------------

def _decoder_arrays(dec):
    return [(f"decoder_{i}", p) for i, p in enumerate(dec.params)]


def model_to_bytes(model: TrainedModel, sidecar_name: str):
    tree = model.tree.base()
    dec = model.book.decoder
    arrays = [
        ("parent", tree.parent),
        ("rest_position", tree.rest_position),
        ("timestamps", model.pose.timestamps),
        ("local_rotation", model.pose.local_rotation),
        ("root_translation", model.pose.root_translation),
        ("position", model.cloud.position),
        ("prior", model.cloud.prior),
        ("logits", model.cloud.logits),
    ]
    if dec.mode == "table":
        arrays.append(("decoder_timestamps", dec.timestamps))
        dinfo = {"mode": "table", "interpolation": dec.interpolation}
    else:
        dinfo = {"mode": "mlp", "index_freqs": dec.index_freqs, "time_freqs": dec.time_freqs, **dec.arch}
    arrays += _decoder_arrays(dec)
    entries, blob = pack_arrays(arrays)
    header = {
        "format": MODEL_FORMAT,
        "sidecar": sidecar_name,
        "byte_order": "little",
        "dtype": "float64",
        "layout": "row-major",
        "base_count": tree.base_count,
        "extra_parents": [int(p) for p in model.book.parents],
        "creation_iteration": int(model.book.creation_iteration),
        "decoder": dinfo,
        "arrays": entries,
    }
    return dumps_json(header).encode(), blob


def model_from_bytes(header_bytes: bytes, blob: bytes) -> TrainedModel:
    h = json.loads(header_bytes)
    if h.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a model file (format={h.get('format')!r})")
    a = unpack_arrays(h["arrays"], blob)
    base = JointTree(a["parent"], a["rest_position"], h["base_count"])
    parents = [int(p) for p in h["extra_parents"]]
    d = dict(h["decoder"])
    mode = d.pop("mode")
    if mode == "table":
        dec = TableDecoder(a["decoder_timestamps"], len(parents), d.get("interpolation", "linear"))
    else:
        dec = MLPDecoder(len(parents), np.random.default_rng(0), **d)
    for i, p in enumerate(dec.params):
        p[...] = a[f"decoder_{i}"]
    book = ExtraJointBook(parents, dec, h["creation_iteration"])
    tree = base.with_extra(parents, base.rest_position[parents]) if parents else base
    cloud = CanonicalCloud(a["position"], a["prior"], a["logits"])
    pose = PoseSequence(a["timestamps"], a["local_rotation"], a["root_translation"])
    return TrainedModel(tree, cloud, book, pose)


def save_model(model: TrainedModel, directory) -> None:
    d = Path(directory)
    header, blob = model_to_bytes(model, "model.bin")
    write_bytes_atomic(d / "model.bin", blob)
    write_bytes_atomic(d / "model.json", header)


def load_model(directory) -> TrainedModel:
    d = Path(directory)
    return model_from_bytes((d / "model.json").read_bytes(), (d / "model.bin").read_bytes())


def folded_base_weights(model: TrainedModel) -> np.ndarray:
    """Effective weights with every grown column added back onto its parent."""
    W = effective_blend_weights(model.cloud)
    K0 = model.tree.base_count
    out = W[:, :K0].copy()
    for e, p in enumerate(model.book.parents):
        out[:, p] += W[:, K0 + e]
    return out


# --- overrides --------------------------------------------------------------------

def parse_overrides(doc, model: TrainedModel):
    """Axis-angle overrides (Ke, N, 3) and an optional frozen base frame."""
    if not isinstance(doc, dict) or "entries" not in doc:
        raise ConfigError("overrides need an 'entries' list")
    unknown = set(doc) - {"entries", "freeze_base_frame", "timestamps"}
    if unknown:
        raise ConfigError(f"unknown override keys: {sorted(unknown)}")
    Ke, N = model.book.count, model.pose.N
    if len(doc["entries"]) != Ke:
        raise ConfigError(f"overrides list {len(doc['entries'])} entries, model has {Ke} grown joints")
    aa = np.zeros((Ke, N, 3))
    for i, e in enumerate(doc["entries"]):
        v = np.asarray(e.get("per_frame_axis_angle") if isinstance(e, dict) else None, dtype=float)
        if v.shape != (N, 3):
            raise ConfigError(f"entry {i}: expected {N} frames of 3 values, got shape {v.shape}")
        aa[i] = v
    freeze = doc.get("freeze_base_frame")
    if freeze is not None and not (isinstance(freeze, int) and 0 <= freeze < N):
        raise ConfigError(f"freeze_base_frame must be a frame index in [0, {N})")
    return aa, freeze


# --- commands ----------------------------------------------------------------------

def _frames_dir(out: Path, clouds, name="frame") -> None:
    for n, pts in enumerate(clouds):
        export_ply(pts, out / "frames" / f"{name}_{n:04d}.ply")


def cmd_generate(spec_path, out_path, seed=None, log=print) -> None:
    spec = scene_spec_from_dict(read_json(spec_path))
    if seed is not None:
        spec.seed = int(seed)
    scene = generate_scene(spec)
    save_scene(scene, out_path)
    kinds = [f"{a.kind}@{a.host}" for a in spec.attachments]
    log(f"K0={scene.base_count} P={scene.P} N={scene.N} attachments={kinds or 'none'}")


def cmd_train(config_path, out_dir=None, seed=None, export_frames=True, log=print) -> dict:
    cfg_path = Path(config_path)
    run = parse_run_config(read_json(cfg_path), cfg_path.parent)
    if seed is not None:
        run.train.seed = int(seed)
        if run.scene is not None:
            run.scene.seed = int(seed)
    out = Path(out_dir or run.out or "out")
    if run.scene is not None:
        run.scene.validate()
        scene = generate_scene(run.scene)
    else:
        scene = load_scene(run.scene_path)
    model, report, trainer = run_training(run.train, scene)
    report["config"] = run.train.to_dict()
    report["seed"] = run.train.seed
    write_text_atomic(out / "loss.csv", loss_csv(trainer.trace))
    book_doc = joint_book_to_dict(model.book, model.tree.base(), model.pose.timestamps)
    write_text_atomic(out / "joint_book.json", dumps_joint_book(book_doc))
    save_model(model, out)
    save_scene(scene, out / "scene.json")
    if export_frames:
        _frames_dir(out, model.warp())
    write_text_atomic(out / "report.json", dumps_json(report))
    log(f"grown={report['grown']} held_out_error={report['held_out_error']:.6g}")
    return report


def cmd_animate(model_dir, overrides_path, out_dir, freeze_base_frame=None, log=print) -> np.ndarray:
    model = load_model(model_dir)
    overrides, freeze = None, None
    if overrides_path is not None:
        overrides, freeze = parse_overrides(read_json(overrides_path), model)
    if freeze_base_frame is not None:
        if not 0 <= freeze_base_frame < model.pose.N:
            raise ConfigError(f"freeze frame must lie in [0, {model.pose.N})")
        freeze = freeze_base_frame
    clouds = model.warp(overrides=overrides, freeze_base_frame=freeze)
    _frames_dir(Path(out_dir), clouds)
    log(f"wrote {clouds.shape[0]} frames to {out_dir}")
    return clouds


def cmd_eval(model_dir, scene_path=None, out_dir=None, log=print) -> dict:
    model = load_model(model_dir)
    scene = load_scene(scene_path or Path(model_dir) / "scene.json")
    if scene.P != model.cloud.P or scene.N != model.pose.N:
        raise ConfigError("scene does not match the model (point or frame count differs)")
    pred = model.warp()
    err = np.linalg.norm(pred - scene.observations, axis=-1).mean(axis=1)
    held = scene.held_out
    W = folded_base_weights(model)
    doc = {
        "held_out_error": float(err[held].mean()) if held.any() else 0.0,
        "train_error": float(err[~held].mean()),
        "assignment_accuracy": argmax_accuracy(W, scene.labels),
        "grown": [int(p) for p in model.book.parents],
    }
    if out_dir is not None:
        write_text_atomic(Path(out_dir) / "eval.json", dumps_json(doc))
    log(dumps_json(doc).strip())
    return doc


VALIDATION_ERRORS = (ConfigError, SceneSpecError, ValueError, KeyError, TypeError)
