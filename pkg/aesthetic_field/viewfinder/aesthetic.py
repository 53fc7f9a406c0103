"""
Aesthetic head: area-pool alignment of rendered feature maps to the teacher
grid, channel projection, logistic score readout, a procedural teacher and
the FMAP teacher-map file format.
"""

import logging
import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch

from . import validators
from .exceptions import DomainError, FormatError
from .geometry import CameraIntrinsics, CameraPose
from .rasterizer import DEFAULT_SETTINGS, DTYPE, FeatureImage, RasterSettings, render, to_tensor
from .scene import Scene

logger = logging.getLogger(__name__)

TEACHER_GRID = (14, 14)
TEACHER_CHANNELS = 8
SPATIAL_TOLERANCE = 1e-9

FMAP_MAGIC = b'FMAP'
FMAP_VERSION = 1
FMAP_HEADER = struct.Struct('<4sIIIIf')

# Procedural teacher constants
LUMA = np.array([0.299, 0.587, 0.114])
THIRDS_WEIGHT = 0.7
COVERAGE_WEIGHT = 0.3
THIRDS_SIGMA = 0.15
COVERAGE_TARGET = 0.4
COVERAGE_SIGMA = 0.2
SALIENCY_FLOOR = 1e-12
THIRD_POINTS = np.array([[1 / 3, 1 / 3], [2 / 3, 1 / 3], [1 / 3, 2 / 3], [2 / 3, 2 / 3]])


# Area pooling

@lru_cache(maxsize=64)
def _pooling_matrix(source: int, target: int) -> np.ndarray:
    if target > source:
        raise DomainError(f"Cannot pool {source} samples down to {target}")
    if target < 1:
        raise DomainError(f"Target size must be >= 1, got {target}")
    step = source / target
    edges = np.arange(source + 1, dtype=np.float64)
    matrix = np.zeros((target, source))
    for i in range(target):
        low, high = i * step, (i + 1) * step
        overlap = np.minimum(edges[1:], high) - np.maximum(edges[:-1], low)
        matrix[i] = np.clip(overlap, 0.0, None) / step
    matrix.setflags(write=False)
    return matrix


def pooling_matrix(source: int, target: int) -> np.ndarray:
    """(target, source) matrix whose rows are the fractional-overlap weights of each output cell"""
    return _pooling_matrix(int(source), int(target))


def pool_tensor(data: torch.Tensor, target: Tuple[int, int]) -> torch.Tensor:
    """Area-pool a (C, H, W) tensor to (C, H_t, W_t)"""
    rows = to_tensor(pooling_matrix(data.shape[1], target[0]), data.dtype)
    cols = to_tensor(pooling_matrix(data.shape[2], target[1]), data.dtype)
    return torch.einsum('ih,chw,jw->cij', rows, data, cols)


def downsample_area(image: FeatureImage, height: int, width: int) -> FeatureImage:
    """Exact area-weighted average pooling of every channel and of alpha"""
    rows = pooling_matrix(image.height, height)
    cols = pooling_matrix(image.width, width)
    data = np.einsum('ih,chw,jw->cij', rows, image.data, cols)
    alpha = rows @ image.alpha @ cols.T
    return FeatureImage(data, alpha)


# Decoder

@dataclass(frozen=True, eq=False)
class DecoderWeights:
    """
    Student-to-teacher channel projection plus logistic readout.

    projection: (D_t, D); spatial: (H_t, W_t), non-negative and summing to 1;
    readout: (D_t,); bias: scalar.
    """

    projection: np.ndarray
    spatial: np.ndarray
    readout: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        projection = np.array(self.projection, dtype=np.float64)
        spatial = np.array(self.spatial, dtype=np.float64)
        readout = np.array(self.readout, dtype=np.float64).reshape(-1)
        if projection.ndim != 2 or spatial.ndim != 2:
            raise DomainError("Projection and spatial weights must be matrices")
        if readout.shape[0] != projection.shape[0]:
            raise DomainError(f"Readout length {readout.shape[0]} does not match "
                              f"{projection.shape[0]} teacher channels")
        if np.any(spatial < 0) or abs(spatial.sum() - 1.0) > SPATIAL_TOLERANCE:
            raise DomainError(f"Spatial weights must be non-negative and sum to 1, got sum {spatial.sum()}")
        for name, value in (('projection', projection), ('spatial', spatial), ('readout', readout)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, 'bias', float(self.bias))

    @property
    def feature_dim(self) -> int:
        return self.projection.shape[1]

    @property
    def teacher_channels(self) -> int:
        return self.projection.shape[0]

    @property
    def grid(self) -> Tuple[int, int]:
        return self.spatial.shape

    @classmethod
    def initial(cls, feature_dim: int, teacher_channels: int = TEACHER_CHANNELS,
                grid: Tuple[int, int] = TEACHER_GRID, seed: Optional[int] = None) -> 'DecoderWeights':
        """Uniform spatial pooling, zero readout; projection random when seeded, else zero"""
        if seed is None:
            projection = np.zeros((teacher_channels, feature_dim))
        else:
            rng = np.random.default_rng(seed)
            projection = rng.standard_normal((teacher_channels, feature_dim)) / math.sqrt(feature_dim)
        spatial = np.full(grid, 1.0 / (grid[0] * grid[1]))
        return cls(projection, spatial, np.zeros(teacher_channels), 0.0)

    @classmethod
    def random(cls, feature_dim: int, teacher_channels: int = TEACHER_CHANNELS,
               grid: Tuple[int, int] = TEACHER_GRID, seed: int = 0, readout_scale: float = 2.0) -> 'DecoderWeights':
        """Random projection and readout; ground-truth decoder for self-distillation"""
        rng = np.random.default_rng(seed)
        projection = rng.standard_normal((teacher_channels, feature_dim)) / math.sqrt(feature_dim)
        readout = readout_scale * rng.standard_normal(teacher_channels)
        spatial = np.full(grid, 1.0 / (grid[0] * grid[1]))
        return cls(projection, spatial, readout, 0.0)

    def replace(self, **changes) -> 'DecoderWeights':
        values = {'projection': self.projection, 'spatial': self.spatial,
                  'readout': self.readout, 'bias': self.bias}
        values.update(changes)
        return DecoderWeights(**values)

    def to_dict(self) -> dict:
        return {
            'projection': self.projection.tolist(),
            'spatial': self.spatial.tolist(),
            'readout': self.readout.tolist(),
            'bias': self.bias,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'DecoderWeights':
        return cls(data['projection'], data['spatial'], data['readout'], data['bias'])


def project_channels(pooled: torch.Tensor, projection: torch.Tensor) -> torch.Tensor:
    """(D, H_t, W_t) -> (D_t, H_t, W_t)"""
    return torch.einsum('td,dij->tij', projection, pooled)


def head_logit(aligned: torch.Tensor, weights: DecoderWeights) -> torch.Tensor:
    spatial = to_tensor(weights.spatial, aligned.dtype)
    readout = to_tensor(weights.readout, aligned.dtype)
    summary = torch.einsum('tij,ij->t', aligned, spatial)
    return readout @ summary + weights.bias


def _check_aligned(shape, weights: DecoderWeights):
    expected = (weights.teacher_channels, *weights.grid)
    if tuple(shape) != expected:
        raise DomainError(f"Aligned map shape {tuple(shape)} does not match decoder shape {expected}")


def decode_score(aligned, weights: DecoderWeights) -> float:
    """logistic(readout . sum_cells(spatial * cell) + bias) for a (D_t, H_t, W_t) map"""
    aligned = to_tensor(aligned)
    _check_aligned(aligned.shape, weights)
    with torch.no_grad():
        return float(torch.sigmoid(head_logit(aligned, weights)))


def decode_score_and_grad(aligned, weights: DecoderWeights):
    """Score and its gradient w.r.t. the aligned map"""
    aligned = to_tensor(aligned).requires_grad_(True)
    _check_aligned(aligned.shape, weights)
    score = torch.sigmoid(head_logit(aligned, weights))
    (gradient,) = torch.autograd.grad(score, (aligned,))
    return float(score), gradient.numpy()


def aligned_map(data: torch.Tensor, weights: DecoderWeights) -> torch.Tensor:
    """Rendered (D, H, W) features pooled to the teacher grid and projected to teacher channels"""
    if data.shape[0] != weights.feature_dim:
        raise DomainError(f"Rendered {data.shape[0]} channels, decoder expects {weights.feature_dim}")
    projection = to_tensor(weights.projection, data.dtype)
    return project_channels(pool_tensor(data, weights.grid), projection)


def image_score(image: FeatureImage, weights: DecoderWeights) -> float:
    data = to_tensor(image.data)
    with torch.no_grad():
        return float(torch.sigmoid(head_logit(aligned_map(data, weights), weights)))


def image_score_and_grad(image: FeatureImage, weights: DecoderWeights):
    """Score of a rendered feature image and its gradient w.r.t. the image data"""
    data = to_tensor(image.data).requires_grad_(True)
    score = torch.sigmoid(head_logit(aligned_map(data, weights), weights))
    (gradient,) = torch.autograd.grad(score, (data,))
    return float(score), gradient.numpy()


def score_view(scene: Scene, features, pose: CameraPose, intr: CameraIntrinsics, weights: DecoderWeights,
               settings: RasterSettings = DEFAULT_SETTINGS) -> float:
    """Render the field at pose, align it and decode a score"""
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (len(scene), weights.feature_dim):
        raise DomainError(f"Feature block {features.shape} does not match scene of {len(scene)} splats "
                          f"with D={weights.feature_dim}")
    image, ctx = render(scene.with_features(features), pose, intr, 'features', settings)
    ctx.release()
    return image_score(image, weights)


# Teacher maps

@dataclass(frozen=True, eq=False)
class TeacherMap:
    """Teacher features on the H_t x W_t grid, stored planar (D_t, H_t, W_t), and an optional score"""

    grid: np.ndarray
    score: Optional[float] = None

    def __post_init__(self):
        grid = np.array(self.grid, dtype=np.float64)
        if grid.ndim != 3:
            raise DomainError(f"Teacher grid must be (D, H, W), got shape {grid.shape}")
        validators.validate_finite(grid, 'grid')
        validators.validate_score(self.score)
        grid.setflags(write=False)
        object.__setattr__(self, 'grid', grid)
        object.__setattr__(self, 'score', None if self.score is None else float(self.score))

    @property
    def shape(self) -> Tuple[int, int, int]:
        """(H_t, W_t, D_t)"""
        channels, height, width = self.grid.shape
        return height, width, channels

    @property
    def channels(self) -> int:
        return self.grid.shape[0]


def thirds_term(x, y):
    """exp(-d^2 / 2 sigma^2) for the distance d from (x, y) to the nearest third-point"""
    x = torch.as_tensor(x, dtype=DTYPE)
    y = torch.as_tensor(y, dtype=DTYPE)
    points = to_tensor(THIRD_POINTS)
    d2 = torch.min((points[:, 0] - x) ** 2 + (points[:, 1] - y) ** 2)
    return torch.exp(-d2 / (2.0 * THIRDS_SIGMA ** 2))


def coverage_term(coverage):
    coverage = torch.as_tensor(coverage, dtype=DTYPE)
    return torch.exp(-((coverage - COVERAGE_TARGET) ** 2) / (2.0 * COVERAGE_SIGMA ** 2))


def saliency_centroid(saliency: torch.Tensor):
    """Saliency-weighted mean of normalized cell centers; image center when nothing is salient"""
    total = saliency.sum()
    if float(total) < SALIENCY_FLOOR:
        half = torch.tensor(0.5, dtype=DTYPE)
        return half, half
    height, width = saliency.shape
    xs = (torch.arange(width, dtype=DTYPE) + 0.5) / width
    ys = (torch.arange(height, dtype=DTYPE) + 0.5) / height
    return saliency.sum(dim=0) @ xs / total, saliency.sum(dim=1) @ ys / total


class _TeacherPlanes:
    """Per-pixel planes the procedural teacher pools"""

    def __init__(self, rgb: torch.Tensor, alpha: torch.Tensor, grid: Tuple[int, int]):
        height, width = alpha.shape
        self.rows = to_tensor(pooling_matrix(height, grid[0]))
        self.cols = to_tensor(pooling_matrix(width, grid[1]))
        self.rgb = rgb
        self.alpha = alpha
        self.luminance = torch.tensordot(to_tensor(LUMA), rgb, dims=1)
        # forward differences, zero in the last column / row
        self.grad_x = torch.nn.functional.pad(self.luminance[:, 1:] - self.luminance[:, :-1], (0, 1))
        self.grad_y = torch.nn.functional.pad(self.luminance[1:, :] - self.luminance[:-1, :], (0, 0, 0, 1))

    def pool(self, plane: torch.Tensor) -> torch.Tensor:
        return self.rows @ plane @ self.cols.T

    def saliency(self) -> torch.Tensor:
        return self.pool(self.grad_x.abs()) + self.pool(self.grad_y.abs())

    def score(self) -> torch.Tensor:
        x, y = saliency_centroid(self.saliency())
        return THIRDS_WEIGHT * thirds_term(x, y) + COVERAGE_WEIGHT * coverage_term(self.alpha.mean())

    def cells(self) -> torch.Tensor:
        mean_l = self.pool(self.luminance)
        std_l = torch.sqrt(torch.clamp(self.pool(self.luminance * self.luminance) - mean_l * mean_l, min=0.0))
        return torch.stack([
            mean_l,
            std_l,
            self.pool(self.grad_x.abs()),
            self.pool(self.grad_y.abs()),
            self.pool(self.alpha),
            self.pool(self.rgb[0]),
            self.pool(self.rgb[1]),
            self.pool(self.rgb[2]),
        ])


def teacher_score_tensor(rgb: torch.Tensor, alpha: torch.Tensor, grid: Tuple[int, int] = TEACHER_GRID):
    """Differentiable procedural teacher score of a (3, H, W) color image and (H, W) alpha"""
    return _TeacherPlanes(rgb, alpha, grid).score()


def procedural_teacher(rgb: FeatureImage, grid: Tuple[int, int] = TEACHER_GRID) -> TeacherMap:
    """
    Closed-form stand-in for a pretrained aesthetic model.

    Channels per cell: luminance, luminance std, mean |dL/dx|, mean |dL/dy|,
    alpha, R, G, B. Score mixes a rule-of-thirds term on the gradient-energy
    centroid with a coverage term on mean alpha.
    """
    if rgb.channels != 3:
        raise DomainError(f"Procedural teacher needs a 3-channel color image, got {rgb.channels}")
    if grid[0] > rgb.height or grid[1] > rgb.width:
        raise DomainError(f"Teacher grid {grid} larger than image {rgb.height}x{rgb.width}")
    with torch.no_grad():
        planes = _TeacherPlanes(to_tensor(rgb.data), to_tensor(rgb.alpha), grid)
        cells = planes.cells().numpy().copy()
        score = float(planes.score())
    return TeacherMap(cells, min(max(score, 0.0), 1.0))


# FMAP file format

def save_teacher_map(teacher: TeacherMap, path: Union[str, Path]):
    """Write little-endian FMAP v1; planar channel-major binary32 payload"""
    channels, height, width = teacher.grid.shape
    score = math.nan if teacher.score is None else teacher.score
    with open(path, 'wb') as handle:
        handle.write(FMAP_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, height, width, channels, score))
        handle.write(np.ascontiguousarray(teacher.grid, dtype='<f4').tobytes())
    logger.debug(f"Saved teacher map {height}x{width}x{channels} to {path}")


def parse_teacher_map(payload: bytes, path: Optional[str] = None) -> TeacherMap:
    if len(payload) < FMAP_HEADER.size:
        raise FormatError("truncated header", len(payload), path)
    magic, version, height, width, channels, score = FMAP_HEADER.unpack_from(payload, 0)
    if magic != FMAP_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0, path)
    if version != FMAP_VERSION:
        raise FormatError(f"version mismatch: expected {FMAP_VERSION}, found {version}", 4, path)
    expected = FMAP_HEADER.size + 4 * height * width * channels
    if len(payload) != expected:
        raise FormatError(f"payload of {len(payload) - FMAP_HEADER.size} bytes does not match "
                          f"{height}x{width}x{channels} header", min(len(payload), expected), path)
    values = np.frombuffer(payload, dtype='<f4', offset=FMAP_HEADER.size).astype(np.float64)
    if not np.all(np.isfinite(values)):
        index = int(np.argmin(np.isfinite(values)))
        raise FormatError("non-finite feature value", FMAP_HEADER.size + 4 * index, path)
    if not math.isnan(score) and not 0.0 <= score <= 1.0:
        raise FormatError(f"score {score} outside [0, 1]", 20, path)
    return TeacherMap(values.reshape(channels, height, width), None if math.isnan(score) else score)


def load_teacher_map(path: Union[str, Path]) -> TeacherMap:
    with open(path, 'rb') as handle:
        payload = handle.read()
    return parse_teacher_map(payload, str(path))
