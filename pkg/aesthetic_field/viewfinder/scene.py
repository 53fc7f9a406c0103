"""
Gaussian-splat scenes: representation, covariance construction, the AESF
binary format and synthetic scene generators.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from . import validators
from .exceptions import DomainError, FormatError
from .geometry import to_scipy

logger = logging.getLogger(__name__)

AESF_MAGIC = b'AESF'
AESF_VERSION = 1
AESF_HEADER = struct.Struct('<4sIII')
# Quaternions round-trip through binary32, so unit norm holds to float32 precision only.
SPLAT_QUATERNION_TOLERANCE = 1e-6
DEFAULT_FEATURE_DIM = 32


def _record_dtype(feature_dim: int) -> np.dtype:
    return np.dtype([
        ('center', '<f4', (3,)),
        ('scale', '<f4', (3,)),
        ('rotation', '<f4', (4,)),
        ('opacity', '<f4'),
        ('color', '<f4', (3,)),
        ('features', '<f4', (feature_dim,)),
    ])


def _f32(values) -> np.ndarray:
    """Round to binary32 so values survive a save/load cycle unchanged"""
    return np.asarray(values, dtype=np.float32).astype(np.float64)


def _frozen(values, shape) -> np.ndarray:
    array = np.array(values, dtype=np.float64).reshape(shape)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class GaussianSplat:
    """One anisotropic Gaussian with its aesthetic embedding"""

    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    features: np.ndarray


class Scene:
    """
    Immutable structure-of-arrays container for a splat scene.

    All splats share the feature dimension D. Arrays are read-only; use
    with_features() to obtain a scene carrying a different field.
    """

    def __init__(self, centers, scales, rotations, opacities, colors, features, feature_dim: Optional[int] = None):
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        count = centers.shape[0]
        if feature_dim is None:
            feature_dim = np.asarray(features).shape[-1] if count else DEFAULT_FEATURE_DIM
        self.feature_dim = int(feature_dim)
        self.centers = _frozen(centers, (count, 3))
        self.scales = _frozen(scales, (count, 3))
        self.rotations = _frozen(rotations, (count, 4))
        self.opacities = _frozen(opacities, (count,))
        self.colors = _frozen(colors, (count, 3))
        self.features = _frozen(features, (count, self.feature_dim))

    def __len__(self):
        return self.centers.shape[0]

    @classmethod
    def empty(cls, feature_dim: int = DEFAULT_FEATURE_DIM) -> 'Scene':
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, 3)), np.zeros((0, feature_dim)), feature_dim=feature_dim)

    @property
    def bbox(self) -> Tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box of the centers"""
        if len(self) == 0:
            return np.zeros(3), np.zeros(3)
        return self.centers.min(axis=0), self.centers.max(axis=0)

    @property
    def diagonal(self) -> float:
        low, high = self.bbox
        return float(np.linalg.norm(high - low))

    def splat(self, index: int) -> GaussianSplat:
        return GaussianSplat(
            center=self.centers[index], scale=self.scales[index], rotation=self.rotations[index],
            opacity=float(self.opacities[index]), color=self.colors[index], features=self.features[index],
        )

    @property
    def splats(self) -> List[GaussianSplat]:
        return [self.splat(i) for i in range(len(self))]

    def with_features(self, features) -> 'Scene':
        """Same geometry, new per-splat feature block"""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != len(self):
            raise DomainError(f"Feature block shape {features.shape} does not match {len(self)} splats")
        return Scene(self.centers, self.scales, self.rotations, self.opacities, self.colors,
                     features, feature_dim=features.shape[1])

    def validate(self):
        """Check every splat invariant"""
        for name in ('centers', 'scales', 'rotations', 'opacities', 'colors', 'features'):
            validators.validate_finite(getattr(self, name), name)
        for i in range(len(self)):
            validators.validate_scale(self.scales[i])
            validators.validate_opacity(float(self.opacities[i]))
            validators.validate_unit_quaternion(self.rotations[i], SPLAT_QUATERNION_TOLERANCE)
            validators.validate_color(self.colors[i])


def covariance_of(g: GaussianSplat) -> np.ndarray:
    """Sigma = R(q) diag(s^2) R(q)^T"""
    rotation = to_scipy(g.rotation).as_matrix()
    covariance = rotation @ np.diag(np.square(g.scale)) @ rotation.T
    return 0.5 * (covariance + covariance.T)


def covariances(scene: Scene) -> np.ndarray:
    """Vectorized covariance_of over the whole scene, shape (N, 3, 3)"""
    if len(scene) == 0:
        return np.zeros((0, 3, 3))
    w, x, y, z = scene.rotations.T
    rotations = Rotation.from_quat(np.stack([x, y, z, w], axis=1)).as_matrix()
    scaled = rotations * np.square(scene.scales)[:, None, :]
    covariance = scaled @ np.transpose(rotations, (0, 2, 1))
    return 0.5 * (covariance + np.transpose(covariance, (0, 2, 1)))


# AESF file format

def save_scene(scene: Scene, path: Union[str, Path]):
    """Write a scene as little-endian AESF v1"""
    records = np.zeros(len(scene), dtype=_record_dtype(scene.feature_dim))
    records['center'] = scene.centers
    records['scale'] = scene.scales
    records['rotation'] = scene.rotations
    records['opacity'] = scene.opacities
    records['color'] = scene.colors
    records['features'] = scene.features
    with open(path, 'wb') as handle:
        handle.write(AESF_HEADER.pack(AESF_MAGIC, AESF_VERSION, len(scene), scene.feature_dim))
        handle.write(records.tobytes())
    logger.info(f"Saved scene with {len(scene)} splats (D={scene.feature_dim}) to {path}")


def parse_scene(payload: bytes, path: Optional[str] = None) -> Scene:
    """Decode AESF bytes; errors name the byte offset of the offending data"""
    if len(payload) < AESF_HEADER.size:
        raise FormatError("truncated header", len(payload), path)
    magic, version, count, feature_dim = AESF_HEADER.unpack_from(payload, 0)
    if magic != AESF_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0, path)
    if version != AESF_VERSION:
        raise FormatError(f"version mismatch: expected {AESF_VERSION}, found {version}", 4, path)

    dtype = _record_dtype(feature_dim)
    body = len(payload) - AESF_HEADER.size
    complete = body // dtype.itemsize
    if complete < count:
        raise FormatError(f"truncated record {complete} of {count}",
                          AESF_HEADER.size + complete * dtype.itemsize, path)
    if body > count * dtype.itemsize:
        raise FormatError("trailing bytes after last record",
                          AESF_HEADER.size + count * dtype.itemsize, path)

    if count == 0:
        records = np.zeros(0, dtype=dtype)
    else:
        records = np.frombuffer(payload, dtype=dtype, count=count, offset=AESF_HEADER.size)
    for name in dtype.names if count else ():
        finite = np.isfinite(records[name]).reshape(count, -1).all(axis=1)
        if not finite.all():
            index = int(np.argmin(finite))
            offset = AESF_HEADER.size + index * dtype.itemsize + dtype.fields[name][1]
            raise FormatError(f"non-finite field '{name}' in record {index}", offset, path)

    for index in range(count):
        offset = AESF_HEADER.size + index * dtype.itemsize
        record = records[index]
        validators.validate_scale(record['scale'], offset + dtype.fields['scale'][1])
        validators.validate_unit_quaternion(record['rotation'], SPLAT_QUATERNION_TOLERANCE,
                                            offset + dtype.fields['rotation'][1])
        validators.validate_opacity(float(record['opacity']), offset + dtype.fields['opacity'][1])
        validators.validate_color(record['color'], offset + dtype.fields['color'][1])

    return Scene(
        records['center'], records['scale'], records['rotation'], records['opacity'],
        records['color'], records['features'].reshape(count, feature_dim), feature_dim=feature_dim,
    )


def load_scene(path: Union[str, Path]) -> Scene:
    """Read an AESF scene file"""
    with open(path, 'rb') as handle:
        payload = handle.read()
    scene = parse_scene(payload, str(path))
    logger.info(f"Loaded scene with {len(scene)} splats (D={scene.feature_dim}) from {path}")
    return scene


# Synthetic scenes

GENERATORS = ('subject+clutter', 'grid', 'random')


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for make_synthetic_scene"""

    kind: str = 'subject+clutter'
    feature_dim: int = DEFAULT_FEATURE_DIM
    features: str = 'random'  # random / zeros
    # grid
    n: int = 3
    spacing: float = 1.0
    # random and clutter
    count: int = 200
    extent: float = 2.0
    # subject+clutter
    subject_count: int = 120
    clutter_count: int = 80
    subject_center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    subject_radii: Tuple[float, float, float] = (0.35, 0.5, 0.35)
    splat_scale: float = 0.06

    def __post_init__(self):
        if self.kind not in GENERATORS:
            raise DomainError(f"Unknown generator '{self.kind}', expected one of {', '.join(GENERATORS)}")
        if self.features not in ('random', 'zeros'):
            raise DomainError(f"Unknown feature mode '{self.features}'")
        if self.feature_dim < 1:
            raise DomainError("Feature dimension must be >= 1")
        if self.n < 1 or self.count < 1:
            raise DomainError(f"Grid size and random count must be >= 1, got n={self.n}, count={self.count}")
        if self.subject_count < 0 or self.clutter_count < 0 or self.subject_count + self.clutter_count < 1:
            raise DomainError(f"Subject and clutter counts must be >= 0 with at least one splat, got "
                              f"{self.subject_count} + {self.clutter_count}")
        if min(self.spacing, self.extent, self.splat_scale) <= 0 or min(self.subject_radii) <= 0:
            raise DomainError("Spacing, extent, splat scale and subject radii must be > 0")


def _features(spec: SyntheticSpec, rng: np.random.Generator, count: int) -> np.ndarray:
    if spec.features == 'zeros':
        return np.zeros((count, spec.feature_dim))
    return rng.standard_normal((count, spec.feature_dim))


def _grid(spec: SyntheticSpec, rng: np.random.Generator) -> Scene:
    axis = (np.arange(spec.n) - (spec.n - 1) / 2.0) * spec.spacing
    zz, yy, xx = np.meshgrid(axis, axis, axis, indexing='ij')
    centers = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    count = centers.shape[0]
    return Scene(
        centers=_f32(centers),
        scales=_f32(np.full((count, 3), spec.splat_scale)),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (count, 1)),
        opacities=_f32(np.full(count, 0.8)),
        colors=_f32(np.full((count, 3), 0.7)),
        features=_f32(_features(spec, rng, count)),
        feature_dim=spec.feature_dim,
    )


def _random_block(rng: np.random.Generator, count: int, extent: float, scale: float,
                  color_range: Tuple[float, float], opacity_range: Tuple[float, float]):
    centers = rng.uniform(-extent, extent, size=(count, 3))
    scales = scale * rng.uniform(0.5, 1.5, size=(count, 3))
    rotations = Rotation.random(count, random_state=rng).as_quat() if count else np.zeros((0, 4))
    rotations = rotations[:, [3, 0, 1, 2]]
    opacities = rng.uniform(*opacity_range, size=count)
    colors = rng.uniform(*color_range, size=(count, 3))
    return centers, scales, rotations, opacities, colors


def _random(spec: SyntheticSpec, rng: np.random.Generator) -> Scene:
    centers, scales, rotations, opacities, colors = _random_block(
        rng, spec.count, spec.extent, spec.splat_scale, (0.0, 1.0), (0.2, 0.9))
    return Scene(_f32(centers), _f32(scales), _f32(rotations), _f32(opacities), _f32(colors),
                 _f32(_features(spec, rng, spec.count)), feature_dim=spec.feature_dim)


def _subject_clutter(spec: SyntheticSpec, rng: np.random.Generator) -> Scene:
    # subject: dense bright ellipsoidal cluster
    direction = rng.standard_normal((spec.subject_count, 3))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
    radius = rng.random(spec.subject_count) ** (1.0 / 3.0)
    subject_centers = np.asarray(spec.subject_center) + direction * radius[:, None] * np.asarray(spec.subject_radii)
    subject_scales = spec.splat_scale * rng.uniform(0.8, 1.2, size=(spec.subject_count, 3))
    subject_rotations = np.tile([1.0, 0.0, 0.0, 0.0], (spec.subject_count, 1))
    subject_opacities = rng.uniform(0.85, 0.95, size=spec.subject_count)
    subject_colors = rng.uniform(0.75, 1.0, size=(spec.subject_count, 3))

    # clutter: scattered dim splats
    clutter = _random_block(rng, spec.clutter_count, spec.extent, spec.splat_scale, (0.05, 0.25), (0.3, 0.6))

    centers = np.vstack([subject_centers, clutter[0]])
    count = centers.shape[0]
    return Scene(
        centers=_f32(centers),
        scales=_f32(np.vstack([subject_scales, clutter[1]])),
        rotations=_f32(np.vstack([subject_rotations, clutter[2]])),
        opacities=_f32(np.concatenate([subject_opacities, clutter[3]])),
        colors=_f32(np.vstack([subject_colors, clutter[4]])),
        features=_f32(_features(spec, rng, count)),
        feature_dim=spec.feature_dim,
    )


def make_synthetic_scene(spec: SyntheticSpec, seed: int) -> Scene:
    """Deterministic synthetic scene for a (spec, seed) pair"""
    rng = np.random.default_rng(seed)
    builders = {
        'subject+clutter': _subject_clutter,
        'grid': _grid,
        'random': _random,
    }
    scene = builders[spec.kind](spec, rng)
    logger.info(f"Generated '{spec.kind}' scene with {len(scene)} splats (seed={seed})")
    return scene
