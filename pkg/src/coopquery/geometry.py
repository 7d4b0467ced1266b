"""Rigid transforms, pinhole cameras and 2D-to-3D query lifting.

Conventions: the world frame is z-up (East-North-Up). Camera frames are
z-forward, x-right, y-down. ``pose_cam2glb`` maps camera coordinates into
the global frame.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DEGENERACY_EPS = 1e-3
_ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    pass


class BehindCamera(GeometryError):
    pass


class DegenerateGeometry(GeometryError):
    """The un-projected ray is (nearly) parallel to the ground plane."""


class NegativeDepth(GeometryError):
    """The ray never reaches the requested global height in front of the camera."""


class MissingPrediction(GeometryError):
    pass


def _as_vec3(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"non-finite vector {arr!r}")
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) transform ``p -> rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = _as_vec3(self.translation)
        if not np.all(np.isfinite(R)):
            raise GeometryError("rotation has non-finite entries")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise GeometryError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(yaw_matrix(yaw), translation)

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform a single point (3,) or a batch (n, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation))

    __hash__ = None


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return ``a ∘ b``: apply ``b`` first, then ``a``."""
    R = a.rotation @ b.rotation
    # re-orthonormalize so long composition chains stay within tolerance
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RigidTransform(R, a.rotation @ b.translation + a.translation)


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def camera_rotation(yaw: float, pitch: float) -> np.ndarray:
    """Camera-to-world rotation for a camera heading ``yaw`` and tilted ``pitch`` below the horizon.

    pitch = 0 looks horizontally, pitch = pi/2 looks straight down.
    """
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    forward = np.array([cp * cy, cp * sy, -sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    return np.column_stack([right, down, forward])


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    pose_cam2glb: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise GeometryError(f"{name} must be finite")
            object.__setattr__(self, name, value)
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (self.fx, self.fy, self.cx, self.cy) == (other.fx, other.fy, other.cx, other.cy) \
            and self.pose_cam2glb == other.pose_cam2glb

    __hash__ = None

    @classmethod
    def looking(cls, position, yaw: float, pitch: float, fx: float = 1000.0, fy: float = 1000.0,
                cx: float = 960.0, cy: float = 540.0) -> "CameraModel":
        return cls(fx, fy, cx, cy, RigidTransform(camera_rotation(yaw, pitch), position))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ])

    @property
    def center_glb(self) -> np.ndarray:
        return self.pose_cam2glb.translation

    @property
    def forward_glb(self) -> np.ndarray:
        return self.pose_cam2glb.rotation[:, 2]

    def with_pose(self, pose: RigidTransform) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, pose)

    def to_record(self) -> dict:
        """Flat key-value form: intrinsics, row-major rotation r00..r22, translation t0..t2."""
        rec = {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}
        R = self.pose_cam2glb.rotation
        for i in range(3):
            for j in range(3):
                rec[f"r{i}{j}"] = float(R[i, j])
        for i in range(3):
            rec[f"t{i}"] = float(self.pose_cam2glb.translation[i])
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "CameraModel":
        R = [[float(rec[f"r{i}{j}"]) for j in range(3)] for i in range(3)]
        t = [float(rec[f"t{i}"]) for i in range(3)]
        return cls(float(rec["fx"]), float(rec["fy"]), float(rec["cx"]), float(rec["cy"]), RigidTransform(R, t))

    RECORD_KEYS = ("fx", "fy", "cx", "cy") + tuple(f"r{i}{j}" for i in range(3) for j in range(3)) + ("t0", "t1", "t2")


class LiftStrategy(enum.Enum):
    HEIGHT_DERIVED = "height_derived"
    DIRECT_DEPTH = "direct_depth"


@dataclass(frozen=True)
class PixelProposal:
    u: float
    v: float
    confidence: float = 1.0
    predicted_global_height: Optional[float] = None
    predicted_depth: Optional[float] = None

    def __post_init__(self):
        if self.predicted_global_height is None and self.predicted_depth is None:
            raise MissingPrediction("proposal carries neither a height nor a depth prediction")
        if not 0.0 <= self.confidence <= 1.0:
            raise GeometryError("confidence must lie in [0, 1]")


def unproject_pixel(cam: CameraModel, u: float, v: float) -> np.ndarray:
    """Camera-frame ray through pixel ``(u, v)`` scaled to unit depth."""
    return np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])


def project_point(cam: CameraModel, point_glb) -> tuple[float, float, float]:
    """Pinhole projection of a global point; returns ``(u, v, depth)``."""
    p_cam = cam.pose_cam2glb.inverse().apply(_as_vec3(point_glb))
    z = p_cam[2]
    if z <= 1e-9:
        raise BehindCamera(f"point has camera-frame depth {z:.6g}")
    return cam.fx * p_cam[0] / z + cam.cx, cam.fy * p_cam[1] / z + cam.cy, float(z)


def virtual_ray_height(cam: CameraModel, u: float, v: float) -> float:
    """z-component of the unit-depth ray expressed in the camera-centred, world-aligned frame."""
    return float(cam.pose_cam2glb.rotation[2] @ unproject_pixel(cam, u, v))


def height_derived_depth(cam: CameraModel, u: float, v: float, z_q_glb: float,
                         eps: float = DEGENERACY_EPS) -> float:
    """Camera depth of the target at pixel ``(u, v)`` whose global height is ``z_q_glb``.

    The target's height above the camera and the unit-depth ray's vertical
    component form similar triangles, so depth is their ratio.

    Raises
    ------
    DegenerateGeometry
        If the ray's vertical component is smaller than ``eps`` in magnitude.
    NegativeDepth
        If the solved depth is not positive.
    """
    if not math.isfinite(z_q_glb):
        raise GeometryError("target height must be finite")
    z_ray = virtual_ray_height(cam, u, v)
    if abs(z_ray) < eps:
        raise DegenerateGeometry(f"|z_virt| = {abs(z_ray):.3g} < {eps:g}")
    depth = (z_q_glb - cam.center_glb[2]) / z_ray
    if depth <= 0:
        raise NegativeDepth(f"ray does not reach height {z_q_glb:g} in front of the camera")
    return depth


def lift_proposal(cam: CameraModel, prop: PixelProposal, strategy: LiftStrategy,
                  agent_from_glb: RigidTransform, eps: float = DEGENERACY_EPS) -> np.ndarray:
    """Lift a 2D proposal to a 3D point in the agent's local frame."""
    if strategy is LiftStrategy.HEIGHT_DERIVED:
        if prop.predicted_global_height is None:
            raise MissingPrediction("height-derived lifting needs predicted_global_height")
        depth = height_derived_depth(cam, prop.u, prop.v, prop.predicted_global_height, eps)
    elif strategy is LiftStrategy.DIRECT_DEPTH:
        if prop.predicted_depth is None:
            raise MissingPrediction("direct-depth lifting needs predicted_depth")
        depth = float(prop.predicted_depth)
        if depth <= 0:
            raise NegativeDepth("predicted depth must be positive")
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    p_cam = depth * unproject_pixel(cam, prop.u, prop.v)
    return (agent_from_glb @ cam.pose_cam2glb).apply(p_cam)
