"""Rigid-body poses, pinhole cameras, ray generation, and head/camera pose fusion.

Conventions
-----------
* Poses are unit quaternions (w, x, y, z) plus a translation, float64.
* Camera extrinsics are camera-to-world. The camera looks down its local -z
  axis, local +x is right, local +y is up.
* The scene lives inside the unit cube [-1, 1]^3; rays carry the analytic
  slab intersection with that cube.
* Focal length is in normalized image-width units: a point at lateral offset
  X and depth Z projects to horizontal image offset f * X / Z, measured in
  units of the image width.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidArgumentError

SCENE_MIN = -1.0
SCENE_MAX = 1.0

_QUAT_TOL = 1e-9


def _normalize_quat(q: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(q))
    if n < 1e-12:
        raise InvalidArgumentError("quaternion norm is (near) zero")
    return q / n


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    # Shepperd's method: pick the largest diagonal combination for stability.
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    return _normalize_quat(np.array([w, x, y, z], dtype=np.float64))


class RigidPose:
    """6DoF transform: rotation (unit quaternion wxyz) + translation.

    The quaternion is renormalized by every constructor and operation so the
    unit-norm invariant holds to 1e-9 under arbitrarily long compositions.
    """

    __slots__ = ("quaternion", "translation")

    def __init__(self, rotation=(1.0, 0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)):
        q = np.asarray(rotation, dtype=np.float64).reshape(4)
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("pose components must be finite")
        self.quaternion = _normalize_quat(q)
        self.translation = t.copy()

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidPose":
        a = np.asarray(axis, dtype=np.float64).reshape(3)
        n = np.linalg.norm(a)
        if n < 1e-12:
            raise InvalidArgumentError("rotation axis must be nonzero")
        a = a / n
        half = 0.5 * float(angle)
        q = np.concatenate([[np.cos(half)], np.sin(half) * a])
        return cls(q, translation)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape == (4, 4):
            return cls(_matrix_to_quat(m[:3, :3]), m[:3, 3])
        if m.shape == (3, 3):
            return cls(_matrix_to_quat(m))
        raise InvalidArgumentError(f"expected 3x3 or 4x4 matrix, got {m.shape}")

    def rotation_matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.quaternion)

    def matrix(self) -> np.ndarray:
        m = np.eye(4, dtype=np.float64)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation_matrix().T + self.translation

    def to_bytes(self) -> bytes:
        """7 little-endian float32: quaternion wxyz then translation xyz."""
        return struct.pack("<7f", *self.quaternion, *self.translation)

    @classmethod
    def from_bytes(cls, data: bytes) -> "RigidPose":
        if len(data) != 28:
            raise FormatError(f"pose blob must be 28 bytes, got {len(data)}")
        vals = struct.unpack("<7f", data)
        return cls(vals[:4], vals[4:])

    def approx_equal(self, other: "RigidPose", tol: float = 1e-9) -> bool:
        # q and -q encode the same rotation.
        dq = min(
            np.abs(self.quaternion - other.quaternion).max(),
            np.abs(self.quaternion + other.quaternion).max(),
        )
        dt = np.abs(self.translation - other.translation).max()
        return bool(dq <= tol and dt <= tol)

    def __repr__(self) -> str:
        q = np.round(self.quaternion, 6)
        t = np.round(self.translation, 6)
        return f"RigidPose(q={q.tolist()}, t={t.tolist()})"


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """Pose applying b first, then a (matrix product A @ B)."""
    q = _quat_mul(a.quaternion, b.quaternion)
    t = a.apply(b.translation)
    return RigidPose(q, t)


def invert(p: RigidPose) -> RigidPose:
    q = p.quaternion * np.array([1.0, -1.0, -1.0, -1.0])
    t = -(_quat_to_matrix(q) @ p.translation)
    return RigidPose(q, t)


def fuse_head_camera(viewer_head: RigidPose, subject_head: RigidPose) -> RigidPose:
    """Camera pose for rendering the subject's avatar on the viewer's side.

    The subject's inverse head pose is composed with the viewer's head pose:
    S^-1 @ V in camera-to-world convention.
    """
    return compose(invert(subject_head), viewer_head)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with square pixels.

    focal is in normalized image-width units, principal_point in normalized
    [0,1]^2 image coordinates (x right, y down), resolution is (width, height).
    """

    extrinsic: RigidPose = field(default_factory=RigidPose.identity)
    focal: float = 1.4
    principal_point: tuple[float, float] = (0.5, 0.5)
    resolution: tuple[int, int] = (32, 32)

    def __post_init__(self):
        if not self.focal > 0:
            raise InvalidArgumentError(f"focal must be > 0, got {self.focal}")
        w, h = self.resolution
        if w < 1 or h < 1:
            raise InvalidArgumentError(f"resolution components must be >= 1, got {self.resolution}")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), focal: float = 1.4,
                resolution: tuple[int, int] = (32, 32)) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        z = eye - target
        zn = np.linalg.norm(z)
        if zn < 1e-12:
            raise InvalidArgumentError("eye and target coincide")
        z = z / zn
        x = np.cross(up, z)
        xn = np.linalg.norm(x)
        if xn < 1e-12:
            raise InvalidArgumentError("up vector is parallel to the view direction")
        x = x / xn
        y = np.cross(z, x)
        rot = np.stack([x, y, z], axis=1)
        return cls(RigidPose(_matrix_to_quat(rot), eye), focal, (0.5, 0.5), resolution)

    def with_resolution(self, resolution: tuple[int, int]) -> "Camera":
        return Camera(self.extrinsic, self.focal, self.principal_point, resolution)


def stereo_pair(center: Camera, ipd: float) -> tuple[Camera, Camera]:
    """Left/right cameras offset by -/+ ipd/2 along the camera's local x-axis."""
    if not ipd > 0:
        raise InvalidArgumentError(f"ipd must be > 0, got {ipd}")
    r = center.extrinsic.rotation_matrix()
    local_x = r[:, 0]
    half = 0.5 * ipd
    def offset(sign: float) -> Camera:
        pose = RigidPose(center.extrinsic.quaternion,
                         center.extrinsic.translation + sign * half * local_x)
        return Camera(pose, center.focal, center.principal_point, center.resolution)
    return offset(-1.0), offset(+1.0)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    valid: bool = True


class RayGrid:
    """One ray per pixel, row-major (index = iy * width + ix).

    Rays that miss the unit cube have valid=False and t_near == t_far == 0.
    """

    def __init__(self, origins, directions, t_near, t_far, valid, width, height):
        self.origins = origins
        self.directions = directions
        self.t_near = t_near
        self.t_far = t_far
        self.valid = valid
        self.width = width
        self.height = height

    def __len__(self) -> int:
        return self.width * self.height

    def __getitem__(self, n: int) -> Ray:
        return Ray(
            self.origins[n], self.directions[n],
            float(self.t_near[n]), float(self.t_far[n]), bool(self.valid[n]),
        )

    def ray_at(self, ix: int, iy: int) -> Ray:
        return self[iy * self.width + ix]


def generate_rays(cam: Camera) -> RayGrid:
    """Rays through pixel centers, with t ranges from the [-1,1]^3 slab test."""
    w, h = cam.resolution
    px, py = cam.principal_point
    ix = (np.arange(w, dtype=np.float64) + 0.5) / w
    iy = (np.arange(h, dtype=np.float64) + 0.5) / h
    u, v = np.meshgrid(ix, iy)  # (h, w)
    # Horizontal offsets in width units, vertical converted to the same scale.
    dx = (u - px) / cam.focal
    dy = (py - v) * (h / w) / cam.focal
    dirs_cam = np.stack([dx, dy, -np.ones_like(dx)], axis=-1).reshape(-1, 3)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=-1, keepdims=True)

    r = cam.extrinsic.rotation_matrix()
    dirs = dirs_cam @ r.T
    origin = cam.extrinsic.translation
    origins = np.broadcast_to(origin, dirs.shape).copy()

    t_near, t_far, valid = _cube_slab(origins, dirs)
    return RayGrid(origins, dirs, t_near, t_far, valid, w, h)


def _cube_slab(origins: np.ndarray, dirs: np.ndarray):
    """Robust slab intersection with [SCENE_MIN, SCENE_MAX]^3."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (SCENE_MIN - origins) * inv
        t1 = (SCENE_MAX - origins) * inv
    # Axis-parallel rays: +/- inf slabs unless the origin lies outside the slab.
    parallel = dirs == 0.0
    inside = (origins >= SCENE_MIN) & (origins <= SCENE_MAX)
    t0 = np.where(parallel, np.where(inside, -np.inf, np.inf), t0)
    t1 = np.where(parallel, np.where(inside, np.inf, -np.inf), t1)
    lo = np.minimum(t0, t1).max(axis=-1)
    hi = np.maximum(t0, t1).min(axis=-1)
    t_near = np.maximum(lo, 0.0)
    valid = (hi > t_near) & np.isfinite(hi)
    t_near = np.where(valid, t_near, 0.0)
    t_far = np.where(valid, hi, 0.0)
    return t_near, t_far, valid
