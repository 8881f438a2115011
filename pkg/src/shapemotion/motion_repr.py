"""263-dim per-frame motion features, shape normalization and contact labels.

Feature layout for a 22-joint skeleton (columns, in order):

    root_rot_vel      1   yaw change to the next frame, rad/frame
    root_lin_vel      2   root XZ displacement to the next frame, in the current facing frame
    root_height       1   absolute pelvis height, m
    ric_positions    63   joints 1..21 relative to the root's ground projection, facing frame
    rot6d           126   local rotations of joints 1..21, 6D form
    local_vel        66   per-joint displacement to the next frame, facing frame
    foot_contact      4   left/right ankle, left/right foot

Velocity-like columns of the last frame repeat the previous frame. Every column
is invariant to a global rotation about Y plus a translation in XZ, so decoding
starts from zero yaw at the origin.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import rotations as R
from .errors import IntegrityError, InvalidArgument
from .shape_body import FOOT_JOINTS, Skeleton

NUM_JOINTS = 22
FRAME_RATE = 20
FEATURE_DIM = 263
CONTACT_HEIGHT = 0.05       # m
CONTACT_VELOCITY = 0.002    # m/frame

_widths = [("root_rot_vel", 1), ("root_lin_vel", 2), ("root_height", 1),
           ("ric_positions", (NUM_JOINTS - 1) * 3), ("rot6d", (NUM_JOINTS - 1) * 6),
           ("local_vel", NUM_JOINTS * 3), ("foot_contact", 4)]
SLICES = {}
_start = 0
for _name, _w in _widths:
    SLICES[_name] = slice(_start, _start + _w)
    _start += _w
assert _start == FEATURE_DIM
ROT_SLICE = SLICES["rot6d"]


@dataclass
class JointMotion:
    positions: np.ndarray      # (T, J, 3) meters, Y up
    rotations: np.ndarray      # (T, J, 4) local unit quaternions (w, x, y, z)
    frame_rate: float = FRAME_RATE

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        p, q = self.positions, self.rotations
        if p.ndim != 3 or p.shape[-1] != 3 or p.shape[0] < 1:
            raise InvalidArgument(f"positions must be (T, J, 3), got {p.shape}")
        if q.shape != p.shape[:2] + (4,):
            raise InvalidArgument(f"rotations {q.shape} do not match positions {p.shape}")
        if not np.all(np.isfinite(p)) or not np.all(np.isfinite(q)):
            raise InvalidArgument("motion contains non-finite values")
        if np.max(np.abs(np.linalg.norm(q, axis=-1) - 1.0)) > 1e-6:
            raise InvalidArgument("rotations must be unit quaternions")

    @property
    def num_frames(self):
        return self.positions.shape[0]

    @property
    def num_joints(self):
        return self.positions.shape[1]

    def transformed(self, yaw=0.0, translation=(0.0, 0.0, 0.0)):
        """Copy rotated about +Y by ``yaw`` then translated."""
        rot = R.rot_y(yaw)
        pos = self.positions @ rot.T + np.asarray(translation, dtype=np.float64)
        quat = self.rotations.copy()
        quat[:, 0] = R.quat_mul(R.quat_yaw(np.full(self.num_frames, yaw)), quat[:, 0])
        return JointMotion(pos, quat, self.frame_rate)


@dataclass
class MotionFeatures:
    data: np.ndarray
    is_shape_normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[1] != FEATURE_DIM:
            raise InvalidArgument(f"features must be (T, {FEATURE_DIM}), got {self.data.shape}")

    @property
    def num_frames(self):
        return self.data.shape[0]

    def slice(self, name):
        return self.data[:, SLICES[name]]


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), 1e-6)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array(doc["mean"]), np.array(doc["std"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def forward_kinematics(rotations, root_positions, skeleton: Skeleton):
    """Global joint positions and rotations from local quaternions.

    Returns ``(positions (T, J, 3), global_quats (T, J, 4))``.
    """
    rotations = np.asarray(rotations, dtype=np.float64)
    t, n = rotations.shape[:2]
    if n != skeleton.num_joints:
        raise InvalidArgument(f"rotations have {n} joints, skeleton has {skeleton.num_joints}")
    pos = np.zeros((t, n, 3))
    glob = np.zeros((t, n, 4))
    pos[:, 0] = root_positions
    glob[:, 0] = rotations[:, 0]
    for j, p in enumerate(skeleton.parents):
        if p < 0:
            continue
        glob[:, j] = R.quat_mul(glob[:, p], rotations[:, j])
        pos[:, j] = pos[:, p] + R.quat_rotate(glob[:, p], np.broadcast_to(skeleton.offsets[j], (t, 3)))
    return pos, glob


def foot_contact_labels(motion: JointMotion, height_thresh_m=CONTACT_HEIGHT,
                        vel_thresh_m_per_frame=CONTACT_VELOCITY, foot_joints=FOOT_JOINTS):
    """(T, 4) binary labels; the last frame repeats the previous one."""
    if motion.num_frames < 2:
        raise InvalidArgument("contact labels need at least two frames")
    feet = motion.positions[:, list(foot_joints)]
    disp = np.linalg.norm(feet[1:] - feet[:-1], axis=-1)
    labels = (feet[:-1, :, 1] < height_thresh_m) & (disp < vel_thresh_m_per_frame)
    labels = np.concatenate([labels, labels[-1:]], axis=0)
    return labels.astype(np.float64)


def _pad_last(x):
    return np.concatenate([x, x[-1:]], axis=0)


def features_from_joints(motion: JointMotion, skeleton: Skeleton,
                         height_thresh_m=CONTACT_HEIGHT,
                         vel_thresh_m_per_frame=CONTACT_VELOCITY) -> MotionFeatures:
    if motion.num_joints != skeleton.num_joints:
        raise InvalidArgument(f"motion has {motion.num_joints} joints, skeleton has {skeleton.num_joints}")
    if motion.num_frames < 2:
        raise InvalidArgument("features need at least two frames")
    pos = motion.positions
    t = motion.num_frames
    yaw = R.yaw_of(motion.rotations[:, 0])
    to_facing = R.rot_y(-yaw)                                   # (T, 3, 3)

    rot_vel = _pad_last(R.wrap_angle(np.diff(yaw)))[:, None]
    root = pos[:, 0]
    root_step = np.zeros((t - 1, 3))
    root_step[:, [0, 2]] = (root[1:] - root[:-1])[:, [0, 2]]
    lin_vel = _pad_last(np.einsum("tij,tj->ti", to_facing[:-1], root_step)[:, [0, 2]])
    root_h = root[:, 1:2]

    ground = root * np.array([1.0, 0.0, 1.0])
    ric = np.einsum("tij,tkj->tki", to_facing, pos[:, 1:] - ground[:, None])
    mats = R.quat_to_matrix(motion.rotations[:, 1:])
    rot6 = R.matrix_to_6d(mats)
    vel = np.einsum("tij,tkj->tki", to_facing[:-1], pos[1:] - pos[:-1])
    vel = _pad_last(vel)
    contact = foot_contact_labels(motion, height_thresh_m, vel_thresh_m_per_frame)

    data = np.concatenate([rot_vel, lin_vel, root_h, ric.reshape(t, -1), rot6.reshape(t, -1),
                           vel.reshape(t, -1), contact], axis=1)
    return MotionFeatures(data, is_shape_normalized=skeleton.canonical)


def recover_root(data):
    """Integrate yaw and root XZ from features; works for numpy (float64) and torch.

    Returns ``(yaw (..., T), root_xz (..., T, 2))`` starting from zero at frame 0.
    """
    if isinstance(data, torch.Tensor):
        rv = data[..., :-1, 0]
        yaw = torch.cat([torch.zeros_like(data[..., :1, 0]), torch.cumsum(rv, dim=-1)], dim=-1)
        c, s = torch.cos(yaw[..., :-1]), torch.sin(yaw[..., :-1])
        vx, vz = data[..., :-1, 1], data[..., :-1, 2]
        step = torch.stack([c * vx + s * vz, -s * vx + c * vz], dim=-1)
        zero = torch.zeros_like(step[..., :1, :])
        return yaw, torch.cat([zero, torch.cumsum(step, dim=-2)], dim=-2)
    rv = data[..., :-1, 0]
    yaw = np.concatenate([np.zeros_like(data[..., :1, 0]), np.cumsum(rv, axis=-1)], axis=-1)
    c, s = np.cos(yaw[..., :-1]), np.sin(yaw[..., :-1])
    vx, vz = data[..., :-1, 1], data[..., :-1, 2]
    step = np.stack([c * vx + s * vz, -s * vx + c * vz], axis=-1)
    zero = np.zeros_like(step[..., :1, :])
    return yaw, np.concatenate([zero, np.cumsum(step, axis=-2)], axis=-2)


def recover_positions(data):
    """Global joint positions (..., T, J, 3) from raw (un-normalized) features.

    Differentiable when given a tensor; used by the physical losses.
    """
    yaw, root_xz = recover_root(data)
    lib = torch if isinstance(data, torch.Tensor) else np
    ric = data[..., SLICES["ric_positions"]]
    ric = ric.reshape(ric.shape[:-1] + (NUM_JOINTS - 1, 3))
    c, s = lib.cos(yaw)[..., None], lib.sin(yaw)[..., None]
    x = c * ric[..., 0] + s * ric[..., 2] + root_xz[..., None, 0]
    z = -s * ric[..., 0] + c * ric[..., 2] + root_xz[..., None, 1]
    joints = lib.stack([x, ric[..., 1], z], -1)
    root = lib.stack([root_xz[..., 0], data[..., 3], root_xz[..., 1]], -1)
    cat = torch.cat if lib is torch else np.concatenate
    return cat([root[..., None, :], joints], -2)


def joints_from_features(feats: MotionFeatures, skeleton: Skeleton) -> JointMotion:
    data = np.asarray(feats.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise InvalidArgument("features contain non-finite values")
    if skeleton.num_joints != NUM_JOINTS:
        raise InvalidArgument(f"feature layout is for {NUM_JOINTS} joints")
    pos = recover_positions(data)
    yaw, _ = recover_root(data)
    t = data.shape[0]
    quats = np.empty((t, NUM_JOINTS, 4))
    quats[:, 0] = R.quat_yaw(yaw)
    mats = R.sixd_to_matrix(data[:, ROT_SLICE].reshape(t, NUM_JOINTS - 1, 6))
    quats[:, 1:] = R.matrix_to_quat(mats)
    return JointMotion(pos, quats)


def canonicalize(motion: JointMotion) -> JointMotion:
    """Move frame 0's root to the XZ origin with zero yaw (what decoding yields)."""
    yaw0 = R.yaw_of(motion.rotations[0, 0])
    root0 = motion.positions[0, 0] * np.array([1.0, 0.0, 1.0])
    shifted = JointMotion(motion.positions - root0, motion.rotations, motion.frame_rate)
    return shifted.transformed(yaw=-yaw0)


def normalize_shape(motion: JointMotion, source: Skeleton, canonical: Skeleton,
                    foot_joints=FOOT_JOINTS) -> JointMotion:
    """Retarget onto ``canonical`` by copying local rotations.

    Root translation is scaled by the leg-length ratio; the result is shifted
    vertically so the lowest foot height over the whole sequence is zero.
    """
    if not source.same_topology(canonical) or motion.num_joints != source.num_joints:
        raise InvalidArgument("source and canonical skeletons must share topology with the motion")
    ratio = canonical.leg_length() / source.leg_length()
    root = motion.positions[:, 0] * ratio
    pos, _ = forward_kinematics(motion.rotations, root, canonical)
    floor = pos[:, list(foot_joints), 1].min()
    pos[..., 1] -= floor
    return JointMotion(pos, motion.rotations.copy(), motion.frame_rate)


def compute_stats(dataset) -> FeatureStats:
    """Per-dimension mean/std over an iterable of feature arrays or MotionFeatures."""
    arrays = [np.asarray(getattr(x, "data", x), dtype=np.float64) for x in dataset]
    if not arrays:
        raise InvalidArgument("cannot compute statistics of an empty dataset")
    stacked = np.concatenate(arrays, axis=0)
    return FeatureStats(stacked.mean(axis=0), stacked.std(axis=0))


def apply_stats(feats, stats: FeatureStats, direction="forward"):
    """Z-score (``forward``) or undo it (``inverse``); preserves the input type."""
    data = getattr(feats, "data", feats)
    lib_mean, lib_std = stats.mean, stats.std
    if isinstance(data, torch.Tensor):
        lib_mean = torch.as_tensor(lib_mean, dtype=data.dtype, device=data.device)
        lib_std = torch.as_tensor(lib_std, dtype=data.dtype, device=data.device)
    if direction == "forward":
        out = (data - lib_mean) / lib_std
    elif direction == "inverse":
        out = data * lib_std + lib_mean
    else:
        raise InvalidArgument(f"direction must be 'forward' or 'inverse', not {direction!r}")
    if isinstance(feats, MotionFeatures):
        return MotionFeatures(out, feats.is_shape_normalized)
    return out


# ---- SAMO motion files ------------------------------------------------------

SAMO_MAGIC = b"SAMO"
SAMO_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_samo(path, data, compress=False):
    data = np.ascontiguousarray(np.asarray(data, dtype="<f4"))
    if data.ndim != 2:
        raise InvalidArgument("SAMO payload must be 2-D")
    blob = _HEADER.pack(SAMO_MAGIC, SAMO_VERSION, data.shape[0], data.shape[1]) + data.tobytes()
    if compress:
        blob = gzip.compress(blob, mtime=0)
    Path(path).write_bytes(blob)


def read_samo(path):
    blob = Path(path).read_bytes()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    if len(blob) < _HEADER.size:
        raise IntegrityError(f"{path}: truncated SAMO header")
    magic, version, t, d = _HEADER.unpack_from(blob)
    if magic != SAMO_MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r}")
    if version != SAMO_VERSION:
        raise IntegrityError(f"{path}: unsupported SAMO version {version}")
    if len(blob) != _HEADER.size + 4 * t * d:
        raise IntegrityError(f"{path}: payload size does not match header ({t}x{d})")
    return np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(t, d).astype(np.float32)
