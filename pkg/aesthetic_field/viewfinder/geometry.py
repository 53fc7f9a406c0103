"""
Camera models and the 5-DOF pose parameterization used by the viewpoint search.

Conventions: extrinsics are camera-to-world, the camera looks down its local
+Z axis and image +Y points down (pinhole / OpenCV style). Quaternions are
stored scalar-first (w, x, y, z). Roll is never optimized: a search pose is
R = R_yaw(world +Y) . R_pitch(local +X).
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np
from django.core.exceptions import ValidationError
from scipy.spatial.transform import Rotation, Slerp

from .exceptions import DecompositionError, DomainError

logger = logging.getLogger(__name__)

PITCH_LIMIT = math.pi / 2 - 1e-4
ROLL_TOLERANCE = 1e-6
QUATERNION_TOLERANCE = 1e-9
DEFAULT_NEAR = 0.01


def _as_vector(values, size: int, name: str) -> np.ndarray:
    array = np.array(values, dtype=np.float64).reshape(-1)
    if array.shape != (size,):
        raise DomainError(f"{name} must have {size} components, got {array.shape[0]}")
    array.setflags(write=False)
    return array


def to_scipy(q_wxyz: np.ndarray) -> Rotation:
    """Wrap a scalar-first quaternion as a scipy Rotation"""
    w, x, y, z = q_wxyz
    return Rotation.from_quat([x, y, z, w])


def from_scipy(rotation: Rotation) -> np.ndarray:
    """Scalar-first unit quaternion with non-negative w"""
    x, y, z, w = rotation.as_quat()
    q = np.array([w, x, y, z], dtype=np.float64)
    if q[0] < 0.0:
        q = -q
    return q


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels"""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise DomainError(f"Image size must be at least 1x1, got {self.width}x{self.height}")

    def to_dict(self) -> dict:
        return {
            'fx': self.fx, 'fy': self.fy, 'cx': self.cx, 'cy': self.cy,
            'width': self.width, 'height': self.height,
        }


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Rigid camera placement: camera-to-world rotation and camera center"""

    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        rotation = _as_vector(self.rotation, 4, "rotation")
        center = _as_vector(self.center, 3, "center")
        norm = float(np.linalg.norm(rotation))
        if abs(norm - 1.0) > QUATERNION_TOLERANCE:
            raise DomainError(f"Rotation quaternion norm {norm} is not 1")
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'center', center)

    @classmethod
    def from_matrix(cls, c2w) -> 'CameraPose':
        """Build from a 3x4 camera-to-world matrix; the rotation is re-orthonormalized"""
        c2w = np.asarray(c2w, dtype=np.float64).reshape(3, 4)
        q = from_scipy(Rotation.from_matrix(c2w[:, :3]))
        return cls(rotation=q / np.linalg.norm(q), center=c2w[:, 3])

    @property
    def matrix(self) -> np.ndarray:
        """3x3 camera-to-world rotation"""
        return to_scipy(self.rotation).as_matrix()

    def c2w(self) -> np.ndarray:
        return np.hstack([self.matrix, self.center.reshape(3, 1)])

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame"""
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.matrix

    def same_as(self, other: 'CameraPose') -> bool:
        return bool(np.array_equal(self.rotation, other.rotation) and np.array_equal(self.center, other.center))


@dataclass(frozen=True)
class PoseParams5:
    """Search parameterization: world translation, yaw about +Y, pitch about local +X"""

    t: tuple
    yaw: float
    pitch: float

    def __post_init__(self):
        object.__setattr__(self, 't', tuple(float(v) for v in self.t))
        if len(self.t) != 3:
            raise DomainError("Translation must have 3 components")

    def as_array(self) -> np.ndarray:
        return np.array([*self.t, self.yaw, self.pitch], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> 'PoseParams5':
        values = np.asarray(values, dtype=np.float64).reshape(5)
        return cls(t=tuple(values[:3]), yaw=float(values[3]), pitch=float(values[4]))


@dataclass(frozen=True)
class PerturbSpec:
    """In-plane shift radius (world units) and yaw/pitch jitter bound (radians)"""

    shift_radius: float = 0.0
    jitter: float = 0.0

    def __post_init__(self):
        if self.shift_radius < 0 or self.jitter < 0:
            raise DomainError(f"Perturbation bounds must be non-negative, got {self}")


class ProjectedPoint(NamedTuple):
    u: float
    v: float
    depth: float
    culled: bool


class Camera(NamedTuple):
    pose: CameraPose
    intrinsics: CameraIntrinsics


def check_pitch(pitch: float):
    if not (-PITCH_LIMIT < pitch < PITCH_LIMIT):
        raise DomainError(f"Pitch {pitch} outside the open interval (-{PITCH_LIMIT}, {PITCH_LIMIT})")


def clamp_pitch(pitch: float) -> float:
    """Pull pitch back inside its open interval"""
    limit = math.nextafter(PITCH_LIMIT, 0.0)
    return min(max(pitch, -limit), limit)


def pose_from_params(p: PoseParams5) -> CameraPose:
    """Camera pose for translation + yaw + pitch with zero roll"""
    check_pitch(p.pitch)
    rotation = Rotation.from_euler('YX', [p.yaw, p.pitch])
    return CameraPose(rotation=from_scipy(rotation), center=np.array(p.t))


def params_from_pose(c: CameraPose, strict: bool = True) -> PoseParams5:
    """
    Inverse of pose_from_params.

    Strict mode rejects poses with roll. Otherwise the roll is dropped and
    pitch clamped, giving the roll-free pose with the same yaw and pitch.
    """
    yaw, pitch, roll = to_scipy(c.rotation).as_euler('YXZ')
    if strict:
        if abs(roll) > ROLL_TOLERANCE:
            raise DecompositionError(float(roll))
        check_pitch(pitch)
    else:
        pitch = clamp_pitch(pitch)
    return PoseParams5(t=tuple(c.center), yaw=float(yaw), pitch=float(pitch))


def level_pose(c: CameraPose) -> CameraPose:
    """Nearest search-representable pose: same center, yaw and pitch, zero roll"""
    return pose_from_params(params_from_pose(c, strict=False))


def project_point(x, pose: CameraPose, intr: CameraIntrinsics, near: float = DEFAULT_NEAR) -> ProjectedPoint:
    """Pinhole projection of one world point; points at or behind the near plane are culled"""
    xc, yc, zc = pose.world_to_camera(np.asarray(x, dtype=np.float64))
    if zc <= near:
        return ProjectedPoint(math.nan, math.nan, float(zc), True)
    return ProjectedPoint(
        float(intr.fx * xc / zc + intr.cx),
        float(intr.fy * yc / zc + intr.cy),
        float(zc),
        False,
    )


def interpolate_trajectory(input_poses: Sequence[CameraPose], samples_per_segment: int) -> List[CameraPose]:
    """
    Densify an ordered list of poses: S samples per segment at k/S, plus the final pose.

    Positions are interpolated linearly and orientations along the shortest arc.
    Segment starts are the input poses themselves.
    """
    if len(input_poses) < 2:
        raise DomainError(f"Need at least 2 poses to interpolate, got {len(input_poses)}")
    if samples_per_segment < 1:
        raise DomainError(f"Samples per segment must be >= 1, got {samples_per_segment}")

    trajectory = []
    for start, end in zip(input_poses[:-1], input_poses[1:]):
        slerp = Slerp([0.0, 1.0], Rotation.concatenate([to_scipy(start.rotation), to_scipy(end.rotation)]))
        trajectory.append(start)
        for k in range(1, samples_per_segment):
            s = k / samples_per_segment
            rotation = from_scipy(slerp([s])[0])
            center = (1.0 - s) * start.center + s * end.center
            trajectory.append(CameraPose(rotation=rotation, center=center))
    trajectory.append(input_poses[-1])
    return trajectory


def perturb_pose(base: CameraPose, spec: PerturbSpec, rng: np.random.Generator) -> CameraPose:
    """
    Shift the center uniformly inside a disc in the camera's right/up plane and
    jitter yaw and pitch uniformly in [-jitter, jitter].

    Always consumes exactly four draws from rng, so streams stay aligned
    for any radius and jitter.
    """
    u_radius, u_angle = rng.random(2)
    d_yaw, d_pitch = rng.uniform(-1.0, 1.0, size=2) * spec.jitter

    axes = base.matrix
    right, up = axes[:, 0], -axes[:, 1]
    radius = spec.shift_radius * math.sqrt(u_radius)
    angle = 2.0 * math.pi * u_angle
    shift = radius * (math.cos(angle) * right + math.sin(angle) * up)
    center = base.center + shift

    if spec.jitter == 0.0:
        return CameraPose(rotation=base.rotation, center=center)

    params = params_from_pose(base, strict=False)
    jittered = PoseParams5(
        t=tuple(center),
        yaw=params.yaw + d_yaw,
        pitch=clamp_pitch(params.pitch + d_pitch),
    )
    return pose_from_params(jittered)


def geodesic_angle(q_a: np.ndarray, q_b: np.ndarray) -> float:
    """Rotation angle (radians) between two orientations"""
    return float((to_scipy(q_a).inv() * to_scipy(q_b)).magnitude())


def pose_distance(a: CameraPose, b: CameraPose, rotation_weight: float) -> float:
    """Center distance plus weighted geodesic angle"""
    if a.same_as(b):
        return 0.0
    return float(np.linalg.norm(a.center - b.center)) + rotation_weight * geodesic_angle(a.rotation, b.rotation)


def look_at_params(eye, target) -> PoseParams5:
    """Roll-free pose at eye whose optical axis points at target"""
    eye = np.asarray(eye, dtype=np.float64)
    direction = np.asarray(target, dtype=np.float64) - eye
    length = float(np.linalg.norm(direction))
    if length == 0.0:
        raise DomainError("Eye and target coincide")
    dx, dy, dz = direction / length
    return PoseParams5(t=tuple(eye), yaw=math.atan2(dx, dz), pitch=clamp_pitch(math.asin(-dy)))


def orbit_cameras(center, radius: float, height: float, count: int,
                  intr: CameraIntrinsics, arc: float = 2.0 * math.pi) -> List[Camera]:
    """Evenly spaced cameras on a horizontal circle, all looking at center"""
    center = np.asarray(center, dtype=np.float64)
    cameras = []
    for k in range(count):
        theta = arc * k / count
        eye = center + np.array([radius * math.sin(theta), -height, -radius * math.cos(theta)])
        cameras.append(Camera(pose_from_params(look_at_params(eye, center)), intr))
    return cameras


# Camera files

def _camera_error(message: str, index: Optional[int] = None):
    where = f"record {index}: " if index is not None else ""
    return ValidationError(f"Malformed camera file: {where}{message}", code='invalid_camera',
                           params={'index': index})


def load_cameras(path: Union[str, Path]) -> List[Camera]:
    """Read a camera file: a JSON list of {fx, fy, cx, cy, width, height, c2w[12]}"""
    with open(path, 'r', encoding='utf-8') as handle:
        try:
            records = json.load(handle)
        except json.JSONDecodeError as e:
            raise _camera_error(str(e))

    if not isinstance(records, list):
        raise _camera_error("top level must be a list")

    cameras = []
    for index, record in enumerate(records):
        try:
            intr = CameraIntrinsics(
                fx=float(record['fx']), fy=float(record['fy']),
                cx=float(record['cx']), cy=float(record['cy']),
                width=int(record['width']), height=int(record['height']),
            )
            c2w = np.asarray(record['c2w'], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise _camera_error(f"{type(e).__name__}: {e}", index)
        if c2w.shape != (12,) or not np.all(np.isfinite(c2w)):
            raise _camera_error("c2w must be 12 finite numbers", index)
        cameras.append(Camera(CameraPose.from_matrix(c2w), intr))

    logger.info(f"Loaded {len(cameras)} cameras from {path}")
    return cameras


def save_cameras(cameras: Sequence[Camera], path: Union[str, Path]):
    """Write cameras in the format read by load_cameras"""
    records = []
    for camera in cameras:
        record = camera.intrinsics.to_dict()
        record['c2w'] = [float(v) for v in camera.pose.c2w().reshape(-1)]
        records.append(record)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(records, handle, indent=2)
    logger.info(f"Saved {len(records)} cameras to {path}")
