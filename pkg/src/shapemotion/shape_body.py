"""Parametric 22-joint skeleton driven by shape coefficients.

Stands in for a full body-mesh model: every quantity the motion pipeline needs
(joint offsets, bone lengths, six body measurements) is a linear or affine
function of the shape vector ``beta``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from .errors import InvalidArgument, ModelConfigurationError

FORMAT_VERSION = 1
NUM_BETAS = 10
BETA_LIMIT = 3.0

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)
J = {name: i for i, name in enumerate(JOINT_NAMES)}

# ankles and toes, in the order used by contact labels
FOOT_JOINTS = (J["left_ankle"], J["right_ankle"], J["left_foot"], J["right_foot"])
# limb bones identified by their child joint
LIMB_BONES = (J["left_elbow"], J["right_elbow"], J["left_wrist"], J["right_wrist"],
              J["left_knee"], J["right_knee"], J["left_ankle"], J["right_ankle"])
LEG_CHAINS = ((J["left_knee"], J["left_ankle"]), (J["right_knee"], J["right_ankle"]))
ARM_CHAINS = ((J["left_elbow"], J["left_wrist"]), (J["right_elbow"], J["right_wrist"]))

ATTRIBUTE_NAMES = ("height_cm", "arm_length_cm", "leg_length_cm",
                   "chest_circ_cm", "waist_circ_cm", "hip_circ_cm")

NUMERIC_TEMPLATE = ("a person {height_cm:.0f} cm tall with {arm_length_cm:.0f} cm arms, "
                    "{leg_length_cm:.0f} cm legs, {chest_circ_cm:.0f} cm chest, "
                    "{waist_circ_cm:.0f} cm waist, {hip_circ_cm:.0f} cm hips")
CATEGORICAL_TEMPLATE = ("a {height_cm} person with {arm_length_cm} arms, {leg_length_cm} legs, "
                        "{chest_circ_cm} chest, {waist_circ_cm} waist and {hip_circ_cm} hips")
# bucket words per attribute for (small, average, large)
CATEGORY_WORDS = {
    "height_cm": ("short", "medium-height", "tall"),
    "arm_length_cm": ("short", "average", "long"),
    "leg_length_cm": ("short", "average", "long"),
    "chest_circ_cm": ("a small", "an average", "a large"),
    "waist_circ_cm": ("a small", "an average", "a large"),
    "hip_circ_cm": ("narrow", "average", "wide"),
}
BUCKETS = ("small", "average", "large")


@dataclass(frozen=True, eq=False)
class Skeleton:
    offsets: np.ndarray                       # (J, 3) child-relative rest offsets, meters
    parents: tuple = PARENTS
    names: tuple = JOINT_NAMES
    canonical: bool = False

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.float64)
        object.__setattr__(self, "offsets", off)
        n = len(self.parents)
        if off.shape != (n, 3) or len(self.names) != n:
            raise InvalidArgument(f"offsets {off.shape} do not match {n} joints")
        if not np.all(np.isfinite(off)):
            raise InvalidArgument("skeleton offsets must be finite")
        roots = [i for i, p in enumerate(self.parents) if p < 0]
        if roots != [0] or any(p >= i for i, p in enumerate(self.parents) if p >= 0):
            raise InvalidArgument("parents must form a single tree rooted at joint 0, parents before children")
        missing = {"left_ankle", "right_ankle", "left_foot", "right_foot"} - set(self.names)
        if missing:
            raise InvalidArgument(f"skeleton lacks foot joints {sorted(missing)}")

    @property
    def num_joints(self):
        return len(self.parents)

    def bone_lengths(self):
        """Rest length of the bone ending at each joint (0 for the root)."""
        return np.linalg.norm(self.offsets, axis=-1) * (np.asarray(self.parents) >= 0)

    def rest_positions(self):
        pos = np.zeros_like(self.offsets)
        for j, p in enumerate(self.parents):
            if p >= 0:
                pos[j] = pos[p] + self.offsets[j]
        return pos

    def same_topology(self, other):
        return tuple(self.parents) == tuple(other.parents)

    def leg_length(self):
        lengths = self.bone_lengths()
        return float(np.mean([lengths[a] + lengths[b] for a, b in LEG_CHAINS]))

    def scaled(self, factor, joints=None):
        """Copy with the offsets of ``joints`` (default all) multiplied by ``factor``."""
        off = self.offsets.copy()
        idx = slice(None) if joints is None else list(joints)
        off[idx] *= factor
        return Skeleton(off, self.parents, self.names, canonical=False)


@dataclass(frozen=True)
class BodyAttributes:
    height_cm: float
    arm_length_cm: float
    leg_length_cm: float
    chest_circ_cm: float
    waist_circ_cm: float
    hip_circ_cm: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise InvalidArgument(f"body attributes must be positive: {vals}")
        if self.height_cm <= self.leg_length_cm:
            raise InvalidArgument("height must exceed leg length")

    def as_array(self):
        return np.array([getattr(self, n) for n in ATTRIBUTE_NAMES], dtype=np.float64)

    def as_dict(self):
        return {n: float(getattr(self, n)) for n in ATTRIBUTE_NAMES}

    @classmethod
    def from_array(cls, values):
        return cls(*(float(v) for v in values))


@dataclass(frozen=True, eq=False)
class ShapeModel:
    base_skeleton: Skeleton
    blend_offsets: np.ndarray                 # (B, J, 3)
    attr_matrix: np.ndarray                   # (6, B), cm per unit beta
    attr_intercept: np.ndarray                # (6,), cm, the beta = 0 measurements
    tercile_bounds: np.ndarray                # (6, 2), cm
    templates: dict = field(default_factory=lambda: {"numeric": NUMERIC_TEMPLATE,
                                                     "categorical": CATEGORICAL_TEMPLATE})

    @property
    def num_betas(self):
        return self.blend_offsets.shape[0]

    def check_beta(self, beta):
        beta = np.asarray(beta, dtype=np.float64)
        if beta.shape[-1:] != (self.num_betas,):
            raise InvalidArgument(f"beta must have {self.num_betas} components, got shape {beta.shape}")
        if not np.all(np.isfinite(beta)):
            raise InvalidArgument("beta must be finite")
        return beta

    def offsets_for(self, betas):
        """Rest offsets for a batch of betas, (..., J, 3)."""
        betas = self.check_beta(betas)
        return self.base_skeleton.offsets + np.tensordot(betas, self.blend_offsets, axes=(-1, 0))

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "joint_names": list(self.base_skeleton.names),
            "parents": list(self.base_skeleton.parents),
            "base_offsets": self.base_skeleton.offsets.tolist(),
            "blend_offsets": self.blend_offsets.tolist(),
            "attribute_names": list(ATTRIBUTE_NAMES),
            "attr_matrix": self.attr_matrix.tolist(),
            "attr_intercept": self.attr_intercept.tolist(),
            "tercile_bounds": self.tercile_bounds.tolist(),
            "templates": dict(self.templates),
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format_version") != FORMAT_VERSION:
            raise ModelConfigurationError(f"unsupported shape model format {doc.get('format_version')}")
        base = Skeleton(np.array(doc["base_offsets"]), tuple(doc["parents"]),
                        tuple(doc["joint_names"]), canonical=True)
        return cls(base, np.array(doc["blend_offsets"], dtype=np.float64),
                   np.array(doc["attr_matrix"], dtype=np.float64),
                   np.array(doc["attr_intercept"], dtype=np.float64),
                   np.array(doc["tercile_bounds"], dtype=np.float64),
                   dict(doc["templates"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def skeleton_from_shape(model: ShapeModel, beta) -> Skeleton:
    beta = model.check_beta(beta)
    if beta.ndim != 1:
        raise InvalidArgument("skeleton_from_shape takes a single beta vector")
    base = model.base_skeleton
    if not np.any(beta):
        return base
    return Skeleton(model.offsets_for(beta), base.parents, base.names, canonical=False)


def _geometric_attributes(offsets, parents):
    """Height, arm and leg length in cm from rest offsets (..., J, 3)."""
    pos = np.zeros_like(offsets)
    for j, p in enumerate(parents):
        if p >= 0:
            pos[..., j, :] = pos[..., p, :] + offsets[..., j, :]
    feet_y = pos[..., list(FOOT_JOINTS), 1].min(axis=-1)
    height = pos[..., J["head"], 1] - feet_y
    norms = np.linalg.norm(offsets, axis=-1)
    arm = np.mean([norms[..., a] + norms[..., b] for a, b in ARM_CHAINS], axis=0)
    leg = np.mean([norms[..., a] + norms[..., b] for a, b in LEG_CHAINS], axis=0)
    return 100.0 * np.stack([height, arm, leg], axis=-1)


def measure_attributes(model: ShapeModel, beta) -> BodyAttributes:
    beta = model.check_beta(beta)
    geo = _geometric_attributes(model.offsets_for(beta), model.base_skeleton.parents)
    circ = model.attr_intercept[3:] + model.attr_matrix[3:] @ beta
    return BodyAttributes.from_array(np.concatenate([geo, circ]))


def attributes_to_shape(model: ShapeModel, attrs: BodyAttributes):
    """Invert the affine measurement map.

    Reachable targets get the minimum-norm preimage; unreachable ones get the
    box-constrained least-squares fit (the closest reachable measurements).
    """
    a = model.attr_matrix
    if np.linalg.matrix_rank(a) < a.shape[0]:
        raise ModelConfigurationError("attribute matrix is rank deficient; inversion is ill-posed")
    rhs = attrs.as_array() - model.attr_intercept
    beta = np.linalg.pinv(a) @ rhs
    if np.all(np.abs(beta) <= BETA_LIMIT):
        return beta
    res = optimize.lsq_linear(a, rhs, bounds=(-BETA_LIMIT, BETA_LIMIT), method="bvls", tol=1e-12)
    return np.clip(res.x, -BETA_LIMIT, BETA_LIMIT)


def attribute_buckets(model: ShapeModel, attrs: BodyAttributes):
    vals = attrs.as_array()
    lo, hi = model.tercile_bounds[:, 0], model.tercile_bounds[:, 1]
    idx = np.where(vals < lo, 0, np.where(vals < hi, 1, 2))
    return {name: BUCKETS[i] for name, i in zip(ATTRIBUTE_NAMES, idx)}


def render_shape_text(attrs: BodyAttributes, mode="numeric", model: ShapeModel | None = None) -> str:
    model = model or default_shape_model()
    if mode == "numeric":
        return model.templates["numeric"].format(**attrs.as_dict())
    if mode == "categorical":
        buckets = attribute_buckets(model, attrs)
        words = {n: CATEGORY_WORDS[n][BUCKETS.index(b)] for n, b in buckets.items()}
        return model.templates["categorical"].format(**words)
    raise InvalidArgument(f"unknown text mode {mode!r}")


def sample_shape(rng_seed, num_betas=NUM_BETAS, size=None):
    """Standard-normal betas clamped to the [-3, 3] box.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = np.random.default_rng(rng_seed)
    shape = (num_betas,) if size is None else (size, num_betas)
    return np.clip(rng.standard_normal(shape), -BETA_LIMIT, BETA_LIMIT)


def clamped_normal_std(limit=BETA_LIMIT):
    tail = stats.norm.sf(limit)
    inner = stats.norm.cdf(limit) - stats.norm.cdf(-limit) - 2 * limit * stats.norm.pdf(limit)
    return float(np.sqrt(inner + 2 * limit**2 * tail))


def _base_offsets():
    off = np.zeros((len(JOINT_NAMES), 3))
    spec = {
        "left_hip": (0.09, -0.08, 0.0), "right_hip": (-0.09, -0.08, 0.0),
        "spine1": (0.0, 0.12, 0.0), "left_knee": (0.0, -0.40, 0.0), "right_knee": (0.0, -0.40, 0.0),
        "spine2": (0.0, 0.14, 0.0), "left_ankle": (0.0, -0.38, 0.0), "right_ankle": (0.0, -0.38, 0.0),
        "spine3": (0.0, 0.06, 0.0), "left_foot": (0.0, -0.04, 0.12), "right_foot": (0.0, -0.04, 0.12),
        "neck": (0.0, 0.22, 0.0), "left_collar": (0.07, 0.16, 0.0), "right_collar": (-0.07, 0.16, 0.0),
        "head": (0.0, 0.26, 0.0), "left_shoulder": (0.12, 0.0, 0.0), "right_shoulder": (-0.12, 0.0, 0.0),
        "left_elbow": (0.27, 0.0, 0.0), "right_elbow": (-0.27, 0.0, 0.0),
        "left_wrist": (0.25, 0.0, 0.0), "right_wrist": (-0.25, 0.0, 0.0),
    }
    for name, v in spec.items():
        off[J[name]] = v
    return off


def _blend_offsets(base):
    b = np.zeros((NUM_BETAS,) + base.shape)
    b[0] = 0.04 * base                                   # overall limb/body scale

    def put(k, name, v, mirror_x=False):
        b[k, J[name]] += v
        if mirror_x:
            other = name.replace("left", "right")
            b[k, J[other]] += (-v[0], v[1], v[2])

    put(1, "left_knee", (0, -0.012, 0), True)            # leg length
    put(1, "left_ankle", (0, -0.012, 0), True)
    put(2, "left_elbow", (0.010, 0, 0), True)            # arm length
    put(2, "left_wrist", (0.008, 0, 0), True)
    put(3, "spine1", (0, 0.008, 0))                      # torso length
    put(3, "spine2", (0, 0.010, 0))
    put(3, "spine3", (0, 0.004, 0))
    put(4, "left_collar", (0.006, 0, 0), True)           # shoulder width
    put(4, "left_shoulder", (0.008, 0, 0), True)
    put(5, "left_hip", (0.008, 0, 0), True)              # hip width
    put(6, "neck", (0, 0.006, 0))                        # neck and head
    put(6, "head", (0, 0.008, 0))
    put(7, "left_foot", (0, 0, 0.008), True)             # foot length
    put(8, "left_knee", (0, -0.008, 0), True)            # thigh/shin ratio
    put(8, "left_ankle", (0, 0.008, 0), True)
    put(9, "left_elbow", (0.006, 0, 0), True)            # upper/lower arm ratio
    put(9, "left_wrist", (-0.006, 0, 0), True)
    return b


# circumference rows (cm per unit beta) and their beta = 0 values
_CIRC_ROWS = np.array([
    [3.2, 0.0, 0.3, 0.8, 2.6, 0.4, 0.0, 0.0, 1.5, 0.0],   # chest
    [2.4, -0.5, 0.0, 0.6, 0.5, 1.2, 0.0, 0.0, 2.8, 1.0],  # waist
    [3.3, 0.4, 0.0, 0.0, 0.3, 2.9, 0.0, 0.0, 1.2, 0.0],   # hips
])
_CIRC_BASE = np.array([95.0, 80.0, 97.0])


def build_shape_model() -> ShapeModel:
    base_off = _base_offsets()
    blend = _blend_offsets(base_off)
    base = Skeleton(base_off, canonical=True)
    geo0 = _geometric_attributes(base_off, PARENTS)
    # height/arm/leg are linear in beta inside the clamp box, so unit probes give exact rows
    probes = base_off + blend
    geo_rows = (_geometric_attributes(probes, PARENTS) - geo0).T
    a = np.vstack([geo_rows, _CIRC_ROWS])
    intercept = np.concatenate([geo0, _CIRC_BASE])
    z = stats.norm.ppf(2.0 / 3.0)
    spread = np.linalg.norm(a, axis=1) * clamped_normal_std()
    terciles = np.stack([intercept - z * spread, intercept + z * spread], axis=1)
    return ShapeModel(base, blend, a, intercept, terciles)


@lru_cache(maxsize=1)
def default_shape_model() -> ShapeModel:
    return build_shape_model()


def canonical_skeleton(model: ShapeModel | None = None) -> Skeleton:
    return (model or default_shape_model()).base_skeleton
