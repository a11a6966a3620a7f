"""Articulated skeleton, axis-angle rotation algebra and forward kinematics.

The skeleton is a 48-joint double chain (left and right arm-hand), loaded
from a YAML description in topological order. Rotations are axis-angle
3-vectors; the zero vector is the identity. Rotation matrices and the FK
chain are differentiable through the tensor tape so a position loss can
train the rotation regressor.
"""

from __future__ import annotations

import hashlib
import importlib.resources
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import tensor as tt
from .tensor import Tensor

JOINT_COUNT = 48
ARM_JOINT_COUNT = 6
HAND_JOINT_COUNT = 42
KEYPOINTS_PER_HAND = 21
DIRECTION_VECTOR_COUNT = 4

# below this rotation angle the Rodrigues coefficients switch to series form
_SMALL_ANGLE = 1e-6

# skew-symmetric basis: _SKEW_BASIS[i] == d skew(r) / d r_i
_SKEW_BASIS = np.array([
    [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
    [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
    [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
])


class SkeletonError(ValueError):
    """Skeleton description violates the layout contract."""


class DegenerateBoneError(ValueError):
    """A direction vector was requested for a zero-length bone."""


class ProjectionError(ValueError):
    """A point reached the camera plane at nonpositive depth."""

    def __init__(self, message: str, point_index: int):
        super().__init__(message)
        self.point_index = point_index


class Skeleton:
    """Joint hierarchy with rest offsets; joints stored parent-before-child."""

    def __init__(self, names, parents, offsets, arm_joint_indices, name="unnamed"):
        self.name = str(name)
        self.names = tuple(names)
        self.parents = np.asarray(parents, dtype=np.int64)
        self.offsets = np.asarray(offsets, dtype=np.float64)
        self.arm_joint_indices = np.asarray(sorted(arm_joint_indices), dtype=np.int64)
        all_idx = set(range(len(self.names)))
        self.hand_joint_indices = np.asarray(
            sorted(all_idx - set(self.arm_joint_indices.tolist())), dtype=np.int64)
        self._validate()
        self.joint_count = len(self.names)
        # keypoint blocks: each hand's 21 joints in layout order, left then right
        half = self.joint_count // 2
        self.left_hand_indices = np.asarray(
            [i for i in self.hand_joint_indices if i < half], dtype=np.int64)
        self.right_hand_indices = np.asarray(
            [i for i in self.hand_joint_indices if i >= half], dtype=np.int64)
        idx = {n: i for i, n in enumerate(self.names)}
        # (shoulder, elbow) and (elbow, wrist) per side, left first
        self.direction_bone_pairs = (
            (idx["left_shoulder"], idx["left_elbow"]),
            (idx["left_elbow"], idx["left_wrist"]),
            (idx["right_shoulder"], idx["right_elbow"]),
            (idx["right_elbow"], idx["right_wrist"]),
        )

    def _validate(self):
        n = len(self.names)
        if n != JOINT_COUNT:
            raise SkeletonError(f"expected {JOINT_COUNT} joints, got {n}")
        if len(set(self.names)) != n:
            raise SkeletonError("joint names must be unique")
        if self.parents.shape != (n,) or self.offsets.shape != (n, 3):
            raise SkeletonError("parents/offsets have the wrong shape")
        for j, p in enumerate(self.parents):
            if p >= j:
                raise SkeletonError(
                    f"joint {self.names[j]} is not topologically sorted (parent {p} >= {j})")
        if len(self.arm_joint_indices) != ARM_JOINT_COUNT:
            raise SkeletonError(
                f"expected {ARM_JOINT_COUNT} arm joints, got {len(self.arm_joint_indices)}")
        if len(self.hand_joint_indices) != HAND_JOINT_COUNT:
            raise SkeletonError("arm/hand joint partition does not cover the skeleton")
        norms = np.linalg.norm(self.offsets[self.hand_joint_indices], axis=-1)
        if np.any(norms <= 0.0):
            bad = self.names[self.hand_joint_indices[int(np.argmin(norms))]]
            raise SkeletonError(f"hand bone {bad} has a zero rest offset")

    @classmethod
    def from_dict(cls, spec: dict) -> "Skeleton":
        joints = spec["joints"]
        names = [j["name"] for j in joints]
        index = {n: i for i, n in enumerate(names)}
        parents = [-1 if j["parent"] is None else index[j["parent"]] for j in joints]
        offsets = [j["offset_m"] for j in joints]
        arm = [index[n] for n in spec["arm_joints"]]
        return cls(names, parents, offsets, arm, name=spec.get("name", "unnamed"))

    @classmethod
    def from_yaml(cls, path) -> "Skeleton":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    @classmethod
    def default(cls) -> "Skeleton":
        ref = importlib.resources.files("armhand") / "skeletons" / "default.yaml"
        return cls.from_dict(yaml.safe_load(ref.read_text(encoding="utf-8")))

    def fingerprint(self) -> str:
        """Stable content hash for dataset/checkpoint compatibility checks."""
        payload = json.dumps({
            "names": list(self.names),
            "parents": self.parents.tolist(),
            "offsets": [[v.hex() for v in row] for row in self.offsets],
            "arm": self.arm_joint_indices.tolist(),
        }, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class Pose:
    """Per-joint axis-angle rotations plus a root translation."""

    rotations: np.ndarray  # (48, 3)
    root_position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.root_position = np.asarray(self.root_position, dtype=np.float64)
        if self.rotations.shape != (JOINT_COUNT, 3):
            raise SkeletonError(
                f"pose must carry ({JOINT_COUNT}, 3) rotations, got {self.rotations.shape}")


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a rigid extrinsic transform."""

    fx: float = 1000.0
    fy: float = 1000.0
    cx: float = 500.0
    cy: float = 500.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   rotation=np.asarray(d["rotation"]),
                   translation=np.asarray(d["translation"]))


# -- axis-angle algebra -----------------------------------------------------


def canonicalize_axis_angle(r: np.ndarray) -> np.ndarray:
    """Wrap rotation magnitude into [0, pi] (flip the axis when needed)."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    safe = np.where(theta == 0.0, 1.0, theta)
    wrapped = np.mod(theta, 2.0 * np.pi)
    wrapped = np.where(wrapped > np.pi, wrapped - 2.0 * np.pi, wrapped)
    return r / safe * wrapped


def _rodrigues_coefficients(theta2: np.ndarray):
    """Shared forward/backward coefficients with a series branch near 0.

    a = sin(t)/t, b = (1-cos(t))/t^2, a1 = (d a/d t)/t, b1 = (d b/d t)/t.
    """
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    t_safe = np.where(small, 1.0, theta)
    t2 = theta2
    sin_t = np.sin(t_safe)
    cos_t = np.cos(t_safe)
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, sin_t / t_safe)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0,
                 (1.0 - cos_t) / (t_safe * t_safe))
    a1 = np.where(small, -1.0 / 3.0 + t2 / 30.0,
                  (t_safe * cos_t - sin_t) / t_safe ** 3)
    b1 = np.where(small, -1.0 / 12.0 + t2 / 180.0,
                  (t_safe * sin_t - 2.0 + 2.0 * cos_t) / t_safe ** 4)
    return a, b, a1, b1


def _rodrigues_forward(r: np.ndarray):
    theta2 = np.einsum("...i,...i->...", r, r)
    a, b, a1, b1 = _rodrigues_coefficients(theta2)
    k = np.einsum("...i,ijk->...jk", r, _SKEW_BASIS)
    k2 = k @ k
    rot = np.broadcast_to(np.eye(3), k.shape).copy()
    rot += a[..., None, None] * k + b[..., None, None] * k2
    cache = (r, k, k2, a, b, a1, b1)
    return rot, cache


def _rodrigues_backward(cache, grad_rot: np.ndarray) -> np.ndarray:
    r, k, k2, a, b, a1, b1 = cache
    g_dot_k = np.einsum("...jk,...jk->...", grad_rot, k)
    g_dot_k2 = np.einsum("...jk,...jk->...", grad_rot, k2)
    s_vec = np.einsum("...jk,ijk->...i", grad_rot, _SKEW_BASIS)
    t_vec = (np.einsum("...jk,ijl,...lk->...i", grad_rot, _SKEW_BASIS, k)
             + np.einsum("...jk,...jl,ilk->...i", grad_rot, k, _SKEW_BASIS))
    return ((a1 * g_dot_k + b1 * g_dot_k2)[..., None] * r
            + a[..., None] * s_vec + b[..., None] * t_vec)


def axis_angle_to_matrix(r):
    """Rodrigues map: (..., 3) axis-angle -> (..., 3, 3) rotation matrices.

    Accepts a plain array (returns an array) or a Tensor (returns a Tensor
    wired into the tape with an analytic backward).
    """
    if isinstance(r, Tensor):
        rot, cache = _rodrigues_forward(r.data)

        def back(g):
            tt._accumulate(r, _rodrigues_backward(cache, g))

        return Tensor._from_op(rot, (r,), back)
    rot, _ = _rodrigues_forward(np.asarray(r, dtype=np.float64))
    return rot


# -- forward kinematics ------------------------------------------------------


def forward_kinematics(skeleton: Skeleton, rotations, root_position=None):
    """Global joint positions from per-joint rotations.

    rotations: (..., 48, 3) array or Tensor; root_position: (3,) or
    broadcastable array, default origin. position(child) = position(parent)
    + R_global(parent) @ offset(child); chain roots translate by the root
    position. Returns (..., 48, 3), same kind as the input.
    """
    is_tensor = isinstance(rotations, Tensor)
    rot_in = rotations if is_tensor else Tensor(np.asarray(rotations, dtype=np.float64))
    if rot_in.shape[-2:] != (JOINT_COUNT, 3):
        raise SkeletonError(
            f"rotations must end in ({JOINT_COUNT}, 3), got {rot_in.shape}")
    batch = rot_in.shape[:-2]
    root = np.zeros(3) if root_position is None else np.asarray(root_position, np.float64)

    rmats = axis_angle_to_matrix(rot_in)  # (..., 48, 3, 3)
    globals_r: list[Tensor] = [None] * skeleton.joint_count
    positions: list[Tensor] = [None] * skeleton.joint_count
    for j in range(skeleton.joint_count):
        local = rmats[..., j, :, :]
        parent = skeleton.parents[j]
        offset = skeleton.offsets[j].reshape(3, 1)
        if parent < 0:
            globals_r[j] = local
            base = np.broadcast_to(root + skeleton.offsets[j], batch + (3,)).copy()
            positions[j] = Tensor(base)
        else:
            globals_r[j] = tt.matmul(globals_r[parent], local)
            delta = tt.matmul(globals_r[parent], Tensor(offset)).reshape(batch + (3,))
            positions[j] = positions[parent] + delta
    out = tt.stack(positions, axis=-2)
    return out if is_tensor else out.data


# -- camera model -------------------------------------------------------------


def project(camera: Camera, points: np.ndarray) -> np.ndarray:
    """Pinhole projection of (..., 3) world points to (..., 2) pixels.

    Raises ProjectionError (carrying the flat index of the first offending
    point) when any point sits at nonpositive camera depth.
    """
    pts = np.asarray(points, dtype=np.float64)
    cam = pts @ camera.rotation.T + camera.translation
    z = cam[..., 2]
    if np.any(z <= 0.0):
        bad = int(np.argmax((z <= 0.0).reshape(-1)))
        raise ProjectionError(
            f"point {bad} has nonpositive camera depth {z.reshape(-1)[bad]:.6f}", bad)
    u = camera.fx * cam[..., 0] / z + camera.cx
    v = camera.fy * cam[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def arm_direction_vectors(positions: np.ndarray,
                          skeleton: Skeleton | None = None) -> np.ndarray:
    """Unit upperarm and forearm vectors per side from (..., 48, 3) positions.

    Order: [L shoulder->elbow, L elbow->wrist, R shoulder->elbow,
    R elbow->wrist]. Invariant to global translation and uniform scaling.
    """
    skeleton = skeleton or _default_skeleton()
    pos = np.asarray(positions, dtype=np.float64)
    out = []
    for a, b in skeleton.direction_bone_pairs:
        d = pos[..., b, :] - pos[..., a, :]
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        if np.any(n < 1e-12):
            raise DegenerateBoneError(
                f"bone {skeleton.names[a]}->{skeleton.names[b]} has zero length")
        out.append(d / n)
    return np.stack(out, axis=-2)


def rotation_geodesic_angle(r_a: np.ndarray, r_b: np.ndarray) -> np.ndarray:
    """Angle (radians) of the relative rotation between two axis-angle arrays."""
    ra = axis_angle_to_matrix(np.asarray(r_a, dtype=np.float64))
    rb = axis_angle_to_matrix(np.asarray(r_b, dtype=np.float64))
    rel = np.einsum("...ji,...jk->...ik", ra, rb)  # ra^T rb
    trace = np.einsum("...ii->...", rel)
    return np.arccos(np.clip((trace - 1.0) / 2.0, -1.0, 1.0))


_DEFAULT_SKELETON: Skeleton | None = None


def _default_skeleton() -> Skeleton:
    global _DEFAULT_SKELETON
    if _DEFAULT_SKELETON is None:
        _DEFAULT_SKELETON = Skeleton.default()
    return _DEFAULT_SKELETON
