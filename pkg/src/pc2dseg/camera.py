"""Pinhole camera model: rigid poses, intrinsics, projection, view manifests.

Conventions: poses are camera-to-world (or sensor-to-world) with the camera
looking along +Z, +X right, +Y down. Pixel coordinates are continuous with
the origin at the top-left pixel center; rasterization rounds with
floor(x + 0.5). A projection is inside the image iff its rounded pixel lies
in [0, width-1] x [0, height-1].
"""

import json
import math
from dataclasses import dataclass

import numpy as np

VIEW_MANIFEST_SCHEMA = "pc2d-views/1"

ORTHONORMAL_TOL = 1e-6


class PoseError(ValueError):
    """Rotation matrix fails the orthonormality / determinant checks."""


@dataclass
class Pose:
    """Rigid transform: x_world = rotation @ x_local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise PoseError(f"rotation not orthonormal (max deviation {err:.2e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > ORTHONORMAL_TOL:
            raise PoseError(f"rotation determinant {det:.8f}, expected +1")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        """Build from a 3x4 or 4x4 matrix (rotation | translation)."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape == (4, 4):
            m = m[:3, :]
        if m.shape != (3, 4):
            raise PoseError(f"expected 3x4 or 4x4 matrix, got {m.shape}")
        return cls(m[:, :3], m[:, 3])

    def matrix(self):
        """3x4 row-major (rotation | translation)."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def inverse(self):
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def transform(self, points):
        """Local -> world for an (N, 3) array or a single 3-vector."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse_transform(self, points):
        """World -> local."""
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"bad resolution {self.width}x{self.height}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")

    @classmethod
    def from_hfov(cls, width, height, hfov_deg=90.0):
        """Square-pixel intrinsics from a horizontal field of view."""
        fx = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(int(width), int(height), fx, fx, width / 2.0, height / 2.0)


@dataclass
class CameraView:
    """One virtual camera: camera-to-world pose plus intrinsics."""

    pose: Pose
    intrinsics: Intrinsics
    view_id: int
    pose_family: str = ""


def pixel_round(x):
    """Continuous pixel coordinate -> integer pixel index."""
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def project(view, points_world):
    """Project world points into a view.

    Returns (uv, depth, valid): uv is (N, 2) continuous pixel coordinates,
    depth the camera-frame z in meters, valid marks points in front of the
    camera whose rounded pixel falls inside the image.
    """
    p = np.atleast_2d(np.asarray(points_world, dtype=np.float64))
    cam = view.pose.inverse_transform(p)
    z = cam[:, 2]
    k = view.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.cx + k.fx * cam[:, 0] / z
        v = k.cy + k.fy * cam[:, 1] / z
    valid = (
        (z > 0)
        & np.isfinite(u)
        & np.isfinite(v)
        & (u >= -0.5)
        & (u < k.width - 0.5)
        & (v >= -0.5)
        & (v < k.height - 0.5)
    )
    return np.stack([u, v], axis=1), z, valid


def project_point(view, point_world):
    """Single-point projection; returns (u, v, depth) or None if invisible."""
    uv, z, valid = project(view, np.asarray(point_world, dtype=np.float64)[None, :])
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def unproject(view, u, v, depth):
    """Pixel coordinates + camera depth -> world points."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    k = view.intrinsics
    x = (u - k.cx) * z / k.fx
    y = (v - k.cy) * z / k.fy
    cam = np.stack(np.broadcast_arrays(x, y, z), axis=-1)
    return view.pose.transform(cam)


FALLBACK_UP_AXES = (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))

_PARALLEL_TOL = 1e-8


def look_at(eye, target, up_hint=(0.0, 0.0, 1.0)):
    """Camera-to-world pose looking from `eye` toward `target`.

    +Z points at the target; +Y (image down) is -up_hint projected
    orthogonally to the view direction. An up_hint parallel to the view
    direction falls back to world +X (then +Y if that is parallel too).
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    norm = np.linalg.norm(fwd)
    if norm < _PARALLEL_TOL:
        raise ValueError("eye and target coincide")
    z = fwd / norm

    up = np.asarray(up_hint, dtype=np.float64)
    candidates = [up, *FALLBACK_UP_AXES]
    for cand in candidates:
        down = -cand
        y = down - np.dot(down, z) * z
        ny = np.linalg.norm(y)
        if ny > _PARALLEL_TOL:
            y = y / ny
            break
    else:  # pragma: no cover - candidates span R^3
        raise ValueError("degenerate up hint")
    x = np.cross(y, z)
    rot = np.stack([x, y, z], axis=1)
    return Pose(rot, eye)


def save_view_manifest(views, path):
    """Serialize views to a JSON manifest (reproducible across runs)."""
    ids = [v.view_id for v in views]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate view_id in view set")
    entries = []
    for v in views:
        k = v.intrinsics
        entries.append(
            {
                "view_id": v.view_id,
                "family": v.pose_family,
                "pose": [float(x) for x in v.pose.matrix().ravel()],
                "width": k.width,
                "height": k.height,
                "fx": k.fx,
                "fy": k.fy,
                "cx": k.cx,
                "cy": k.cy,
            }
        )
    doc = {"schema": VIEW_MANIFEST_SCHEMA, "views": entries}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_view_manifest(path):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema") != VIEW_MANIFEST_SCHEMA:
        raise ValueError(f"{path}: unknown view manifest schema {doc.get('schema')!r}")
    views = []
    for e in doc["views"]:
        pose = Pose.from_matrix(np.asarray(e["pose"], dtype=np.float64).reshape(3, 4))
        intr = Intrinsics(e["width"], e["height"], e["fx"], e["fy"], e["cx"], e["cy"])
        views.append(CameraView(pose, intr, int(e["view_id"]), e.get("family", "")))
    return views
