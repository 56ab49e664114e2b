"""Pinhole X-ray source model and the parallel-beam (orthogonal) baseline.

Camera frame follows the OpenGL habit: the source looks down its local -z
axis, x is detector-right and y is detector-up.  A world point ``x`` maps to
``p = R x + t``; its depth is ``-p_z`` and its detector coordinate is
``principal_point + focal * p_xy / depth``.  ``focal`` is the source-detector
distance in normalized world units, so the detector coordinate is the
magnified transverse offset.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, ParameterError, ProjectionError

DEPTH_EPS = 1e-6
VIEWS = ("PA", "Lat")

# rows are the camera x, y, z axes expressed in world coordinates
_VIEW_ROTATIONS = {
    # source on -y looking +y: detector-right = +x, detector-up = +z
    "PA": np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]]),
    # source on +x looking -x: detector-right = +y, detector-up = +z
    "Lat": np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]),
}

# world axes kept by the parallel-beam model, in detector (u_x, u_y) order
_ORTHO_AXES = {"PA": (0, 2), "Lat": (1, 2)}


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray
    focal: float = 2.0
    principal_point: tuple = (0.0, 0.0)
    view: str = "PA"

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise GeometryError("rotation must be orthonormal with det = 1")
        if not self.focal > 0:
            raise ParameterError(f"focal must be positive, got {self.focal}")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))

    @property
    def source(self) -> np.ndarray:
        """Source position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def axis(self) -> np.ndarray:
        """Unit viewing direction in world coordinates."""
        return -self.rotation[2]

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.ravel().tolist(),
            "translation": self.translation.tolist(),
            "focal": self.focal,
            "principal_point": list(self.principal_point),
            "view": self.view,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(np.reshape(d["rotation"], (3, 3)), d["translation"], d["focal"],
                   tuple(d["principal_point"]), d["view"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "CameraPose":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ProjectionPoint:
    u: np.ndarray
    depth: float


def make_pose(view: str, source_dist: float = 3.0, focal: float = 2.0) -> CameraPose:
    if view not in _VIEW_ROTATIONS:
        raise ParameterError(f"unknown view {view!r}")
    r = _VIEW_ROTATIONS[view]
    # looking down -z_cam means the source sits on +z_cam
    source = source_dist * r[2]
    return CameraPose(r, -r @ source, focal, (0.0, 0.0), view)


def make_biplanar_rig(source_dist: float = 3.0, focal: float = 2.0):
    """PA and lateral sources on perpendicular axes, both aimed at the origin."""
    if source_dist <= math.sqrt(3.0):
        raise GeometryError(
            f"source_dist {source_dist} lies inside the bounding sphere of the unit cube")
    if not focal > 0:
        raise ParameterError("focal must be positive")
    return make_pose("PA", source_dist, focal), make_pose("Lat", source_dist, focal)


def project_points(pose: CameraPose, points: np.ndarray):
    """Vectorized perspective projection; returns ``(u[..., 2], depth[...])``."""
    points = np.asarray(points, dtype=np.float64)
    p = points @ pose.rotation.T + pose.translation
    depth = -p[..., 2]
    if np.any(~(depth > DEPTH_EPS)):
        raise ProjectionError("point at or behind the X-ray source")
    u = np.asarray(pose.principal_point) + pose.focal * p[..., :2] / depth[..., None]
    return u, depth


def project_point(pose: CameraPose, x) -> ProjectionPoint:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3,) or not np.all(np.isfinite(x)):
        raise ParameterError("x must be a finite 3-vector")
    u, depth = project_points(pose, x)
    return ProjectionPoint(u, float(depth))


def project_points_orthogonal(view: str, points: np.ndarray) -> np.ndarray:
    """Parallel-beam model: drop the coordinate along the view axis."""
    if view not in _ORTHO_AXES:
        raise ParameterError(f"unknown view {view!r}")
    points = np.asarray(points, dtype=np.float64)
    return points[..., list(_ORTHO_AXES[view])]


def project_point_orthogonal(view: str, x) -> np.ndarray:
    return project_points_orthogonal(view, np.asarray(x, dtype=np.float64).reshape(3))


def detector_rays(pose: CameraPose, u: np.ndarray):
    """Source position and unit world directions of the rays through detector points ``u``."""
    u = np.asarray(u, dtype=np.float64)
    d_cam = np.empty(u.shape[:-1] + (3,))
    d_cam[..., :2] = (u - np.asarray(pose.principal_point)) / pose.focal
    d_cam[..., 2] = -1.0
    d_world = d_cam @ pose.rotation
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    return pose.source, d_world
