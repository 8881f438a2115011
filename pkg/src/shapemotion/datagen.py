"""Procedural shape-parameterized motions with paired text, and dataset files.

Motions are built kinematically: a root trajectory and a footstep plan fix the
foot targets, an analytic two-bone IK solves the legs, and forward kinematics
produces the joint positions, so bone lengths are exact by construction. Feet
never move horizontally while they are within contact height of the ground.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rotations as R
from .errors import IntegrityError, InvalidArgument, ManifestParseError
from .motion_repr import (FRAME_RATE, JointMotion, MotionFeatures, features_from_joints,
                          forward_kinematics, normalize_shape, read_samo, write_samo)
from .shape_body import (BETA_LIMIT, J, ShapeModel, Skeleton, default_shape_model,
                         measure_attributes, render_shape_text, sample_shape, skeleton_from_shape)

PRIMITIVES = ("walk", "run", "arm_raise", "squat", "jump", "turn")
MANIFEST_NAME = "manifest.jsonl"
DATASET_META = "dataset.json"

_PHRASES = {
    "walk": ("a person walks forward{speed}", "someone walks straight ahead{speed}",
             "a person takes a stroll forward{speed}"),
    "run": ("a person runs forward{speed}", "someone jogs straight ahead{speed}",
            "a person is running forward{speed}"),
    "arm_raise": ("a person raises both arms{speed}", "someone lifts both arms up and lowers them{speed}",
                  "a person stands and raises their arms{speed}"),
    "squat": ("a person squats down and stands back up{speed}", "someone does squats{speed}",
              "a person bends their knees into a squat{speed}"),
    "jump": ("a person jumps up in place{speed}", "someone hops vertically{speed}",
             "a person jumps straight up{speed}"),
    "turn": ("a person walks while turning {side}{speed}", "someone walks in a curve to the {side}{speed}",
             "a person turns {side} while walking{speed}"),
}


@dataclass(frozen=True)
class MotionPrimitive:
    """One kind of procedural motion with its tempo and size.

    ``cadence`` is in cycles per second, ``amplitude`` is a unitless size
    factor around 1, and ``direction`` is +1 (left) or -1 (right) for turns.
    """
    kind: str
    cadence: float = 1.0
    amplitude: float = 1.0
    direction: int = 1

    def __post_init__(self):
        if self.kind not in PRIMITIVES:
            raise InvalidArgument(f"unknown motion kind {self.kind!r}; expected one of {PRIMITIVES}")

    @classmethod
    def sample(cls, kind, rng):
        rng = np.random.default_rng(rng)
        ranges = {"walk": (0.85, 1.05), "run": (1.3, 1.5), "arm_raise": (0.3, 0.5),
                  "squat": (0.4, 0.6), "jump": (0.5, 0.65), "turn": (0.85, 1.0)}
        if kind not in ranges:
            raise InvalidArgument(f"unknown motion kind {kind!r}")
        lo, hi = ranges[kind]
        return cls(kind, float(rng.uniform(lo, hi)), float(rng.uniform(0.75, 1.0)),
                   int(rng.choice([-1, 1])))

    def speed_word(self):
        lo, hi = {"walk": (0.85, 1.05), "run": (1.3, 1.5), "arm_raise": (0.3, 0.5),
                  "squat": (0.4, 0.6), "jump": (0.5, 0.65), "turn": (0.85, 1.0)}[self.kind]
        u = (self.cadence - lo) / (hi - lo)
        return " slowly" if u < 1 / 3 else (" quickly" if u > 2 / 3 else "")

    def describe(self, rng=0):
        rng = np.random.default_rng(rng)
        phrase = _PHRASES[self.kind][int(rng.integers(len(_PHRASES[self.kind])))]
        side = "left" if self.direction > 0 else "right"
        return phrase.format(speed=self.speed_word(), side=side)


# ---- kinematic rig -----------------------------------------------------------

class _Rig:
    def __init__(self, skel: Skeleton):
        off = skel.offsets
        self.skel = skel
        self.hip = {s: off[J[f"{s}_hip"]] for s in ("left", "right")}
        self.thigh = {s: np.linalg.norm(off[J[f"{s}_knee"]]) for s in ("left", "right")}
        self.shin = {s: np.linalg.norm(off[J[f"{s}_ankle"]]) for s in ("left", "right")}
        self.foot = {s: off[J[f"{s}_foot"]] for s in ("left", "right")}
        self.leg = skel.leg_length()
        self.stand = max(-self.hip[s][1] + self.thigh[s] + self.shin[s] - self.foot[s][1]
                         for s in ("left", "right"))
        self.nominal = 0.985 * self.stand
        self.scale = self.leg / 0.78

    def foot_home(self, side):
        """Foot-joint ground position in the root frame when standing."""
        return np.array([self.hip[side][0], 0.0, self.foot[side][2]])


def _smooth(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _ground_point(xz, yaw, local):
    """World ground point from a root pose and an offset in the root frame."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.stack([xz[..., 0] + c * local[0] + s * local[2],
                     np.zeros_like(yaw),
                     xz[..., 1] - s * local[0] + c * local[2]], axis=-1)


def _gait_feet(rig, root_fn, period, stance, lift, frames, phases=(0.0, 0.5)):
    """Foot-joint targets (position, yaw) for a periodic gait.

    Each stance places the foot at the root pose of mid-stance; swings lift the
    foot vertically first, travel at full height, then set down vertically.
    """
    out = {}
    swing = (1.0 - stance) * period
    lift_time = min(2.0, swing / 4.0)
    for side, phase in zip(("left", "right"), phases):
        k = np.arange(int(np.floor(-2 - phase)), int(np.ceil(frames / period + 2 - phase)))
        starts = (k + phase) * period
        ends = starts + stance * period
        mids_xz, mids_yaw = root_fn(starts + 0.5 * stance * period)
        prints = _ground_point(mids_xz, mids_yaw, rig.foot_home(side))
        pos = np.zeros((frames, 3))
        yaw = np.zeros(frames)
        for f in range(frames):
            i = np.searchsorted(starts, f, side="right") - 1
            if f < ends[i]:
                pos[f], yaw[f] = prints[i], mids_yaw[i]
                continue
            tau = f - ends[i]
            h = _smooth((tau - lift_time) / (swing - 2 * lift_time))
            pos[f] = (1 - h) * prints[i] + h * prints[i + 1]
            yaw[f] = (1 - h) * mids_yaw[i] + h * mids_yaw[i + 1]
            rise = _smooth(min(tau, swing - tau) / lift_time)
            pos[f, 1] = lift * rise
        out[side] = (pos, yaw)
    return out


def _planted_feet(rig, frames, lift=None):
    out = {}
    for side in ("left", "right"):
        pos = np.repeat(_ground_point(np.zeros(2), np.float64(0.0), rig.foot_home(side))[None], frames, 0)
        if lift is not None:
            pos[:, 1] = lift
        out[side] = (pos, np.zeros(frames))
    return out


def _ankle_target(rig, side, foot_pos, foot_yaw):
    fo = rig.foot[side]
    rot = R.rot_y(foot_yaw)
    return foot_pos - np.einsum("tij,j->ti", rot, fo)


def _hip_world(rig, side, root_xz, pelvis_y, yaw):
    h = rig.hip[side]
    g = _ground_point(root_xz, yaw, h)
    g[:, 1] = pelvis_y + h[1]
    return g


def _reach_limit(rig, feet, root_xz, yaw, reach=0.995):
    limit = np.full(len(yaw), np.inf)
    for side, (fpos, fyaw) in feet.items():
        ankle = _ankle_target(rig, side, fpos, fyaw)
        hip = _hip_world(rig, side, root_xz, np.zeros(len(yaw)), yaw)
        dh = np.linalg.norm((ankle - hip)[:, [0, 2]], axis=-1)
        total = reach * (rig.thigh[side] + rig.shin[side])
        if np.any(dh >= total):
            raise InvalidArgument("footstep plan exceeds leg reach")
        limit = np.minimum(limit, ankle[:, 1] - rig.hip[side][1] + np.sqrt(total**2 - dh**2))
    return limit


def _solve_leg(rig, side, hip, ankle, foot_yaw):
    """Global thigh and shin rotation matrices placing the ankle at ``ankle``."""
    l1, l2 = rig.thigh[side], rig.shin[side]
    d = ankle - hip
    dist = np.linalg.norm(d, axis=-1, keepdims=True)
    u = d / dist
    fwd = np.stack([np.sin(foot_yaw), np.zeros_like(foot_yaw), np.cos(foot_yaw)], -1)
    n = fwd - np.sum(fwd * u, -1, keepdims=True) * u
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    cos_a = np.clip((l1**2 + dist**2 - l2**2) / (2 * l1 * dist), -1.0, 1.0)
    knee = hip + l1 * (cos_a * u + np.sqrt(1 - cos_a**2) * n)
    down, ahead = np.array([0.0, -1.0, 0.0]), np.array([0.0, 0.0, 1.0])
    r_thigh = R.frame_rotation(down, ahead, knee - hip, fwd)
    r_shin = R.frame_rotation(down, ahead, ankle - knee, fwd)
    return r_thigh, r_shin


def _assemble(rig, root_xz, pelvis_y, yaw, feet, upper):
    t = len(yaw)
    mats = np.repeat(np.eye(3)[None, None], t, 0).repeat(len(rig.skel.parents), 1)
    r_root = R.rot_y(yaw)
    mats[:, 0] = r_root
    for side in ("left", "right"):
        fpos, fyaw = feet[side]
        ankle = _ankle_target(rig, side, fpos, fyaw)
        hip = _hip_world(rig, side, root_xz, pelvis_y, yaw)
        r_thigh, r_shin = _solve_leg(rig, side, hip, ankle, fyaw)
        r_foot = R.rot_y(fyaw)
        tr = lambda m: np.swapaxes(m, -1, -2)  # noqa: E731
        mats[:, J[f"{side}_hip"]] = tr(r_root) @ r_thigh
        mats[:, J[f"{side}_knee"]] = tr(r_thigh) @ r_shin
        mats[:, J[f"{side}_ankle"]] = tr(r_shin) @ r_foot
    mats[:, J["spine1"]] = R.rot_x(upper.get("lean", np.zeros(t)))
    for side, sign in (("left", -1.0), ("right", 1.0)):
        down = upper.get(f"{side}_arm", np.full(t, np.deg2rad(-75.0)))
        swing = upper.get(f"{side}_swing", np.zeros(t))
        bend = upper.get(f"{side}_bend", np.zeros(t))
        mats[:, J[f"{side}_shoulder"]] = R.rot_x(-swing) @ R.rot_z(-sign * down)
        mats[:, J[f"{side}_elbow"]] = R.rot_y(sign * bend)
    quats = R.matrix_to_quat(mats)
    root = np.stack([root_xz[:, 0], pelvis_y, root_xz[:, 1]], -1)
    pos, _ = forward_kinematics(quats, root, rig.skel)
    return JointMotion(pos, quats, FRAME_RATE)


def synth_motion(primitive, skeleton: Skeleton, T=64, seed=0) -> JointMotion:
    """Kinematic motion for ``primitive`` (a kind name or MotionPrimitive)."""
    if T < 8:
        raise InvalidArgument("procedural motions need at least 8 frames")
    rng = np.random.default_rng(seed)
    prim = primitive if isinstance(primitive, MotionPrimitive) else MotionPrimitive.sample(primitive, rng)
    rig = _Rig(skeleton)
    frames = np.arange(T, dtype=np.float64)
    period = FRAME_RATE / prim.cadence
    amp = prim.amplitude
    upper = {}
    zero = np.zeros(T)
    phase = 2 * np.pi * frames / period

    if prim.kind in ("walk", "run", "turn"):
        if prim.kind == "run":
            stride, stance, lift = 2.2 * amp * rig.leg, 0.38, 0.18 * rig.scale
        else:
            stride, stance, lift = 1.35 * amp * rig.leg, 0.62, max(0.12, 0.14 * rig.scale)
        if prim.kind == "turn":
            stride *= 0.7
        speed = stride / period
        omega = prim.direction * (0.5 + 0.5 * amp) * np.pi / (T + 1) if prim.kind == "turn" else 0.0

        def root_fn(times):
            times = np.asarray(times, dtype=np.float64)
            if omega == 0.0:
                return np.stack([np.zeros_like(times), speed * times], -1), np.zeros_like(times)
            th = omega * times
            return np.stack([speed / omega * (1 - np.cos(th)), speed / omega * np.sin(th)], -1), th

        root_xz, yaw = root_fn(frames)
        feet = _gait_feet(rig, root_fn, period, stance, lift, T)
        bob = 0.015 if prim.kind == "run" else 0.01
        nominal = rig.nominal - bob * rig.scale * (1 - np.cos(2 * phase)) / 2
        swing_amp = 0.7 if prim.kind == "run" else 0.35
        upper["left_swing"] = -swing_amp * amp * np.cos(phase)
        upper["right_swing"] = swing_amp * amp * np.cos(phase)
        if prim.kind == "run":
            upper["lean"] = np.full(T, 0.18)
            upper["left_bend"] = upper["right_bend"] = np.full(T, 1.4)
    elif prim.kind == "arm_raise":
        root_xz, yaw = np.zeros((T, 2)), zero
        feet = _planted_feet(rig, T)
        nominal = np.full(T, rig.nominal)
        up = (1 - np.cos(phase)) / 2
        angle = np.deg2rad(-75.0) + amp * np.deg2rad(150.0) * up
        upper["left_arm"] = upper["right_arm"] = angle
    elif prim.kind == "squat":
        root_xz, yaw = np.zeros((T, 2)), zero
        feet = _planted_feet(rig, T)
        down = (1 - np.cos(phase)) / 2
        nominal = rig.nominal - 0.35 * amp * rig.leg * down
        upper["lean"] = 0.35 * down
        upper["left_swing"] = upper["right_swing"] = 1.4 * down
    else:  # jump
        root_xz, yaw = np.zeros((T, 2)), zero
        u = (frames / period) % 1.0
        crouch = 0.18 * amp * rig.leg
        apex = 0.25 * amp * rig.scale
        y = np.full(T, rig.nominal)
        m = (u >= 0.15) & (u < 0.35)
        y[m] -= crouch * _smooth((u[m] - 0.15) / 0.2)
        m = (u >= 0.35) & (u < 0.45)
        y[m] -= crouch * (1 - _smooth((u[m] - 0.35) / 0.1))
        m = (u >= 0.45) & (u < 0.75)
        y[m] += apex * np.sin(np.pi * (u[m] - 0.45) / 0.3)
        m = (u >= 0.75) & (u < 0.9)
        y[m] -= 0.7 * crouch * np.sin(np.pi * (u[m] - 0.75) / 0.15)
        nominal = y
        feet = _planted_feet(rig, T, lift=np.maximum(0.0, y - rig.nominal))
        raise_arms = np.where((u >= 0.35) & (u < 0.75), np.sin(np.pi * np.clip((u - 0.35) / 0.4, 0, 1)), 0.0)
        upper["left_swing"] = upper["right_swing"] = 1.2 * raise_arms - 0.4 * ((u >= 0.15) & (u < 0.35))

    pelvis_y = np.minimum(nominal, _reach_limit(rig, feet, root_xz, yaw))
    return _assemble(rig, root_xz, pelvis_y, yaw, feet, upper)


# ---- datasets -----------------------------------------------------------------

@dataclass
class SynthConfig:
    n_samples: int = 64
    seed: int = 0
    frames: int = 64
    primitive_mix: dict = field(default_factory=lambda: {k: 1.0 for k in PRIMITIVES})
    text_mode: str = "mixed"           # numeric | categorical | mixed
    compress: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidArgument("n_samples must be >= 1")
        if self.frames < 8 or self.frames % 4:
            raise InvalidArgument("frames must be >= 8 and divisible by 4")
        if self.text_mode not in ("numeric", "categorical", "mixed"):
            raise InvalidArgument(f"unknown text_mode {self.text_mode!r}")
        unknown = set(self.primitive_mix) - set(PRIMITIVES)
        if unknown:
            raise InvalidArgument(f"unknown primitives {sorted(unknown)}")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def make_sample(index, config: SynthConfig, model: ShapeModel):
    """Generate one record's arrays deterministically from (seed, index)."""
    rng = np.random.default_rng([config.seed, index])
    beta = sample_shape(rng, model.num_betas)
    kinds = sorted(config.primitive_mix)
    weights = np.array([config.primitive_mix[k] for k in kinds], dtype=np.float64)
    kind = kinds[int(rng.choice(len(kinds), p=weights / weights.sum()))]
    prim = MotionPrimitive.sample(kind, rng)
    skel = skeleton_from_shape(model, beta)
    motion = synth_motion(prim, skel, config.frames, rng)
    canonical = model.base_skeleton
    xr = features_from_joints(motion, skel)
    xn = features_from_joints(normalize_shape(motion, skel, canonical), canonical)
    attrs = measure_attributes(model, beta)
    mode = config.text_mode
    if mode == "mixed":
        mode = "numeric" if rng.random() < 0.5 else "categorical"
    shape_text = render_shape_text(attrs, mode, model)
    motion_text = prim.describe(rng)
    return {
        "beta": beta, "attributes": attrs, "kind": kind, "primitive": prim,
        "xr": xr, "xn": xn, "motion": motion,
        "shape_text": shape_text, "motion_text": motion_text,
        "text": f"{shape_text}. {motion_text}",
    }


def synth_dataset(config: SynthConfig, out_dir, model: ShapeModel | None = None) -> Path:
    """Write a dataset directory (manifest + SAMO files); returns the manifest path."""
    model = model or default_shape_model()
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".synth-", dir=out_dir.parent))
    try:
        (tmp / "motions").mkdir()
        (tmp / "normalized").mkdir()
        ext = ".samo.gz" if config.compress else ".samo"
        lines = []
        for i in range(config.n_samples):
            s = make_sample(i, config, model)
            rid = f"s{i:06d}"
            mfile, nfile = f"motions/{rid}{ext}", f"normalized/{rid}{ext}"
            write_samo(tmp / mfile, s["xr"].data, config.compress)
            write_samo(tmp / nfile, s["xn"].data, config.compress)
            rec = {
                "id": rid, "text": s["text"], "shape_text": s["shape_text"],
                "motion_text": s["motion_text"], "beta": [float(b) for b in s["beta"]],
                "attributes": s["attributes"].as_dict(), "n_frames": int(config.frames),
                "motion_file": mfile, "shape_normalized_file": nfile,
                "sha256": {"motion_file": _sha256(tmp / mfile), "shape_normalized_file": _sha256(tmp / nfile)},
                "tags": [s["kind"]],
            }
            lines.append(json.dumps(rec, sort_keys=True))
        (tmp / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
        meta = {"format_version": 1, "config": asdict(config), "shape_model": model.to_dict()}
        (tmp / DATASET_META).write_text(json.dumps(meta, sort_keys=True, indent=1))
        if out_dir.exists():
            shutil.rmtree(out_dir)
        tmp.rename(out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir / MANIFEST_NAME


_REQUIRED = {"id": str, "text": str, "beta": list, "attributes": dict, "n_frames": int,
             "motion_file": str, "shape_normalized_file": str, "tags": list}


@dataclass
class DatasetRecord:
    root: Path
    id: str
    text: str
    beta: np.ndarray
    attributes: dict
    n_frames: int
    motion_file: str
    shape_normalized_file: str
    tags: list
    sha256: dict = field(default_factory=dict)
    shape_text: str = ""
    motion_text: str = ""

    def _read(self, key):
        path = self.root / getattr(self, key)
        if not path.exists():
            raise IntegrityError(f"{path}: missing file")
        digest = self.sha256.get(key)
        if digest and _sha256(path) != digest:
            raise IntegrityError(f"{path}: checksum mismatch")
        data = read_samo(path)
        if data.shape[0] != self.n_frames:
            raise IntegrityError(f"{path}: {data.shape[0]} frames, manifest says {self.n_frames}")
        return data

    def features(self) -> MotionFeatures:
        """Shape-aware features (X^R)."""
        return MotionFeatures(self._read("motion_file"), is_shape_normalized=False)

    def normalized_features(self) -> MotionFeatures:
        """Shape-normalized features (X^N)."""
        return MotionFeatures(self._read("shape_normalized_file"), is_shape_normalized=True)


def load_dataset(path, exclude_tags=(), model: ShapeModel | None = None):
    """Parse and validate a manifest; file contents are read lazily per record."""
    path = Path(path)
    manifest = path / MANIFEST_NAME if path.is_dir() else path
    root = manifest.parent
    nb = (model or default_shape_model()).num_betas
    records = []
    for no, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(manifest, no, f"invalid JSON ({exc.msg})") from None
        if not isinstance(doc, dict):
            raise ManifestParseError(manifest, no, "record must be an object")
        for key, typ in _REQUIRED.items():
            if not isinstance(doc.get(key), typ):
                raise ManifestParseError(manifest, no, f"field {key!r} missing or not {typ.__name__}")
        beta = np.asarray(doc["beta"], dtype=np.float64)
        if beta.shape != (nb,) or not np.all(np.abs(beta) <= BETA_LIMIT + 1e-9):
            raise ManifestParseError(manifest, no, "beta has wrong length or leaves the clamp box")
        for key in ("motion_file", "shape_normalized_file"):
            if not (root / doc[key]).exists():
                raise IntegrityError(f"{root / doc[key]}: referenced by line {no} but missing")
        if set(doc["tags"]) & set(exclude_tags):
            continue
        records.append(DatasetRecord(root, doc["id"], doc["text"], beta, doc["attributes"],
                                     doc["n_frames"], doc["motion_file"], doc["shape_normalized_file"],
                                     list(doc["tags"]), dict(doc.get("sha256", {})),
                                     doc.get("shape_text", ""), doc.get("motion_text", "")))
    return records


def append_external_record(dataset_dir, rid, text, beta, shape_aware, shape_normalized, tags=()):
    """Add a record built from externally prepared (T, 263) feature arrays.

    Lets licensed mocap data, preprocessed elsewhere, share the loader and
    training code with the procedural corpus.
    """
    root = Path(dataset_dir)
    (root / "motions").mkdir(parents=True, exist_ok=True)
    (root / "normalized").mkdir(parents=True, exist_ok=True)
    xr = np.asarray(shape_aware, dtype=np.float32)
    xn = np.asarray(shape_normalized, dtype=np.float32)
    if xr.shape != xn.shape:
        raise InvalidArgument("shape-aware and normalized arrays must have equal shapes")
    mfile, nfile = f"motions/{rid}.samo", f"normalized/{rid}.samo"
    write_samo(root / mfile, xr)
    write_samo(root / nfile, xn)
    rec = {"id": rid, "text": text, "beta": [float(b) for b in beta],
           "attributes": measure_attributes(default_shape_model(), beta).as_dict(),
           "n_frames": int(xr.shape[0]), "motion_file": mfile, "shape_normalized_file": nfile,
           "sha256": {"motion_file": _sha256(root / mfile), "shape_normalized_file": _sha256(root / nfile)},
           "tags": list(tags)}
    with open(root / MANIFEST_NAME, "a") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
