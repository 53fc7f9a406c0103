"""
Tile-based front-to-back splatting of per-Gaussian values (aesthetic features
and/or colors), with adjoints for the per-splat values and for the 5-DOF pose.

Each tile blends its depth-sorted splats in chunks that double in size; a
pixel leaves the blend once its transmittance falls below the termination
floor and the tile stops when no pixel is left. render() composites in
float64 and records how deep every tile blended, so the backward passes
recompute exactly the same weights and stop at the same depth.
render_image() is the forward-only path and composites in the configured
forward precision. Per-tile partials are reduced in fixed tile order, so
results do not depend on the number of worker threads.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .exceptions import DomainError, RenderContractError
from .geometry import CameraIntrinsics, CameraPose, params_from_pose
from .scene import GaussianSplat, Scene, covariance_of, covariances

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CHANNEL_SELECTS = ('features', 'color', 'both', 'rgba')
PRECISIONS = {'float32': torch.float32, 'float64': torch.float64}


@dataclass(frozen=True)
class RasterSettings:
    """Anti-aliasing, culling, termination and batching constants"""

    tile_size: int = 16
    lowpass: float = 0.3
    cull_sigma: float = 3.0
    min_contribution: float = 1.0 / 255.0
    min_transmittance: float = 1e-4
    near: float = 0.01
    threads: int = 1
    chunk: int = 32  # first chunk of splats blended per tile
    forward_precision: str = 'float32'  # render_image only

    def __post_init__(self):
        if self.tile_size < 1 or self.chunk < 1:
            raise DomainError("Tile size and chunk size must be >= 1")
        if self.forward_precision not in PRECISIONS:
            raise DomainError(f"Unknown precision '{self.forward_precision}', expected one of {tuple(PRECISIONS)}")

    def exact(self) -> 'RasterSettings':
        """Same settings with contribution skipping and early termination disabled"""
        return replace(self, min_contribution=0.0, min_transmittance=0.0)


DEFAULT_SETTINGS = RasterSettings()


def to_tensor(values, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """Tensor over a private copy of values; scene, pose and decoder arrays are read-only"""
    return torch.from_numpy(np.array(values, dtype=np.float64)).to(dtype)


@dataclass(frozen=True)
class Projected2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    culled: bool


@dataclass
class FeatureImage:
    """Planar channel-major image (C, H, W) with accumulated opacity (H, W)"""

    data: np.ndarray
    alpha: np.ndarray

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> 'FeatureImage':
        return cls(np.zeros((channels, height, width)), np.zeros((height, width)))


@dataclass
class _Tile:
    x0: int
    y0: int
    x1: int
    y1: int
    order: np.ndarray  # depth-sorted indices into the visible subset
    depth: Optional[int] = None  # splats blended before every pixel terminated

    @property
    def blended(self) -> np.ndarray:
        return self.order if self.depth is None else self.order[:self.depth]


@dataclass
class RenderContext:
    """Everything a backward pass needs; valid only for the forward call that produced it"""

    scene: Scene
    pose: CameraPose
    intrinsics: CameraIntrinsics
    channel_select: str
    settings: RasterSettings
    values: torch.Tensor
    visible: np.ndarray
    means2d: torch.Tensor
    conics: torch.Tensor
    opacities: torch.Tensor
    tiles: List[_Tile] = field(default_factory=list)
    released: bool = False

    @property
    def shape(self):
        return (self.values.shape[1], self.intrinsics.height, self.intrinsics.width)

    def release(self):
        """Drop saved buffers; any later backward call fails"""
        self.tiles = []
        self.released = True

    def check(self, gradient: np.ndarray):
        if self.released:
            raise RenderContractError("Render context was released")
        if tuple(gradient.shape) != self.shape:
            raise RenderContractError(
                f"Gradient shape {tuple(gradient.shape)} does not match rendered shape {self.shape}")


def select_values(scene: Scene, channel_select: str) -> np.ndarray:
    if channel_select == 'features':
        return np.asarray(scene.features)
    if channel_select == 'color':
        return np.asarray(scene.colors)
    if channel_select == 'both':
        return np.hstack([scene.features, scene.colors])
    if channel_select == 'rgba':
        # constant unit channel composites to the coverage alpha
        return np.hstack([scene.colors, np.ones((len(scene), 1))])
    raise DomainError(f"Unknown channel selection '{channel_select}', expected one of {CHANNEL_SELECTS}")


# Projection

def project_gaussian(g: GaussianSplat, pose: CameraPose, intr: CameraIntrinsics,
                     settings: RasterSettings = DEFAULT_SETTINGS) -> Projected2D:
    """EWA projection of a single splat"""
    x, y, z = pose.world_to_camera(g.center)
    if z <= settings.near:
        return Projected2D(np.full(2, np.nan), np.full((2, 2), np.nan), float(z), True)

    jacobian = np.array([
        [intr.fx / z, 0.0, -intr.fx * x / (z * z)],
        [0.0, intr.fy / z, -intr.fy * y / (z * z)],
    ])
    world_to_camera = pose.matrix.T
    transform = jacobian @ world_to_camera
    cov2d = transform @ covariance_of(g) @ transform.T + settings.lowpass * np.eye(2)
    mean2d = np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])
    culled = _outside_image(mean2d[0], mean2d[1], cov2d[0, 0], cov2d[1, 1], intr, settings.cull_sigma)
    return Projected2D(mean2d, cov2d, float(z), bool(culled))


def _outside_image(mx, my, var_x, var_y, intr: CameraIntrinsics, sigmas: float):
    ex = sigmas * np.sqrt(var_x)
    ey = sigmas * np.sqrt(var_y)
    return (mx + ex < 0) | (mx - ex > intr.width - 1) | (my + ey < 0) | (my - ey > intr.height - 1)


def rotation_from_angles(yaw: torch.Tensor, pitch: torch.Tensor) -> torch.Tensor:
    """R_yaw(+Y) @ R_pitch(+X), differentiable"""
    one, zero = torch.ones((), dtype=DTYPE), torch.zeros((), dtype=DTYPE)
    cy, sy = torch.cos(yaw), torch.sin(yaw)
    cp, sp = torch.cos(pitch), torch.sin(pitch)
    r_yaw = torch.stack([
        torch.stack([cy, zero, sy]),
        torch.stack([zero, one, zero]),
        torch.stack([-sy, zero, cy]),
    ])
    r_pitch = torch.stack([
        torch.stack([one, zero, zero]),
        torch.stack([zero, cp, -sp]),
        torch.stack([zero, sp, cp]),
    ])
    return r_yaw @ r_pitch


def _project_batch(centers: torch.Tensor, cov3d: torch.Tensor, rotation: torch.Tensor,
                   camera_center: torch.Tensor, intr: CameraIntrinsics, lowpass: float):
    """Vectorized EWA projection; returns means2d (N, 2), cov2d (N, 2, 2), depth (N,)"""
    local = (centers - camera_center) @ rotation
    x, y, z = local[:, 0], local[:, 1], local[:, 2]
    zeros = torch.zeros_like(z)
    jacobian = torch.stack([
        torch.stack([intr.fx / z, zeros, -intr.fx * x / (z * z)], dim=-1),
        torch.stack([zeros, intr.fy / z, -intr.fy * y / (z * z)], dim=-1),
    ], dim=-2)
    transform = jacobian @ rotation.T
    cov2d = transform @ cov3d @ transform.transpose(1, 2)
    cov2d = cov2d + lowpass * torch.eye(2, dtype=DTYPE)
    means2d = torch.stack([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy], dim=-1)
    return means2d, cov2d, z


def _conics(cov2d: torch.Tensor) -> torch.Tensor:
    """Inverse 2D covariances packed as (a, b, c): power = -(a dx^2 + c dy^2)/2 - b dx dy"""
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], dim=-1)


# Compositing

@lru_cache(maxsize=16)
def _pixel_basis(width: int, height: int, dtype: torch.dtype) -> torch.Tensor:
    """Row-major tile-local pixel monomials (u^2, uv, v^2, u, v, 1), shape (P, 6)"""
    v, u = torch.meshgrid(torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing='ij')
    u, v = u.reshape(-1), v.reshape(-1)
    return torch.stack([u * u, u * v, v * v, u, v, torch.ones_like(u)], dim=1)


def _coefficients(means: torch.Tensor, conics: torch.Tensor, x0: int, y0: int) -> torch.Tensor:
    """Quadratic form of every splat in tile-local coordinates, so power = -0.5 * basis @ coefficients.T"""
    mx, my = means[:, 0] - x0, means[:, 1] - y0
    a, b, c = conics[:, 0], conics[:, 1], conics[:, 2]
    return torch.stack([
        a, 2.0 * b, c,
        -2.0 * (a * mx + b * my),
        -2.0 * (b * mx + c * my),
        a * mx * mx + 2.0 * b * mx * my + c * my * my,
    ], dim=1)


def _chunks(count: int, first: int) -> Iterator[Tuple[int, int]]:
    """Consecutive [start, stop) ranges whose sizes double from `first`"""
    start, size = 0, first
    while start < count:
        stop = min(start + size, count)
        yield start, stop
        start, size = stop, size * 2


def _chunk_weights(basis: torch.Tensor, coefficients: torch.Tensor, opacities: torch.Tensor,
                   transmittance: torch.Tensor, settings: RasterSettings) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Weights (P, k) of k depth-ordered splats over pixels whose transmittance
    in front of them is `transmittance` (P,), and the transmittance behind them.
    """
    power = -0.5 * (basis @ coefficients.T)
    alpha = opacities * torch.exp(torch.clamp(power, max=0.0))
    if settings.min_contribution > 0:
        alpha = alpha * (alpha >= settings.min_contribution)
    through = torch.cumprod(1.0 - alpha, dim=1)
    ahead = transmittance[:, None]
    before = torch.cat([ahead, ahead * through[:, :-1]], dim=1)
    if settings.min_transmittance > 0:
        before = before * (before >= settings.min_transmittance)
    return alpha * before, transmittance * through[:, -1]


def _composite_tile(tile: _Tile, order: np.ndarray, means: torch.Tensor, conics: torch.Tensor,
                    opacities: torch.Tensor, values: torch.Tensor, settings: RasterSettings):
    """Blend one tile; returns (values (P, C), coverage (P,), number of splats blended)"""
    dtype = values.dtype
    index = torch.as_tensor(order)
    basis = _pixel_basis(tile.x1 - tile.x0, tile.y1 - tile.y0, dtype)
    pixels = basis.shape[0]

    out = torch.zeros((pixels, values.shape[1]), dtype=dtype)
    coverage = torch.zeros(pixels, dtype=dtype)
    transmittance = torch.ones(pixels, dtype=dtype)
    active = torch.arange(pixels)
    depth = 0
    for start, stop in _chunks(len(order), settings.chunk):
        # splats behind the termination depth are never gathered
        chunk = index[start:stop]
        coefficients = _coefficients(means[chunk], conics[chunk], tile.x0, tile.y0)
        weights, behind = _chunk_weights(basis[active], coefficients, opacities[chunk], transmittance[active],
                                         settings)
        out.index_add_(0, active, weights @ values[chunk])
        coverage.index_add_(0, active, weights.sum(dim=1))
        transmittance[active] = behind
        depth = stop
        if settings.min_transmittance > 0:
            active = active[behind >= settings.min_transmittance]
            if active.numel() == 0:
                break
    return out, coverage.clamp(0.0, 1.0), depth


def _tile_weights(tile: _Tile, means: torch.Tensor, conics: torch.Tensor, opacities: torch.Tensor,
                  settings: RasterSettings) -> torch.Tensor:
    """Weights (P, K) of the tile's blended splats, by the same chunked arithmetic as the forward pass"""
    basis = _pixel_basis(tile.x1 - tile.x0, tile.y1 - tile.y0, DTYPE)
    coefficients = _coefficients(means, conics, tile.x0, tile.y0)
    transmittance = torch.ones(basis.shape[0], dtype=DTYPE)
    parts = []
    for start, stop in _chunks(means.shape[0], settings.chunk):
        weights, transmittance = _chunk_weights(basis, coefficients[start:stop], opacities[start:stop],
                                                transmittance, settings)
        parts.append(weights)
    return torch.cat(parts, dim=1)


def _bin_tiles(means: np.ndarray, cov2d: np.ndarray, opacities: np.ndarray, order: np.ndarray,
               intr: CameraIntrinsics, settings: RasterSettings) -> List[_Tile]:
    """
    Assign depth-sorted splats to every tile their contributing footprint touches.

    Splats whose opacity is below the contribution floor touch no tile. The
    (tile, splat) pairs are sorted stably by tile, so every tile keeps depth order.
    """
    size = settings.tile_size
    tiles_x, tiles_y = -(-intr.width // size), -(-intr.height // size)
    if settings.min_contribution > 0:
        # alpha * G >= floor  <=>  d^T cov^-1 d <= 2 ln(alpha / floor)
        ratio = np.maximum(opacities / settings.min_contribution, 1.0)
        reach = 2.0 * np.log(ratio)
        contributes = opacities >= settings.min_contribution
    else:
        reach = np.full(opacities.shape, np.inf)
        contributes = np.ones(opacities.shape, dtype=bool)

    with np.errstate(invalid='ignore'):
        ex = np.sqrt(reach * cov2d[:, 0, 0]) * (1 + 1e-9) + 1e-9
        ey = np.sqrt(reach * cov2d[:, 1, 1]) * (1 + 1e-9) + 1e-9
        x_lo = np.clip(np.ceil(means[:, 0] - ex), 0, intr.width - 1)
        x_hi = np.clip(np.floor(means[:, 0] + ex), 0, intr.width - 1)
        y_lo = np.clip(np.ceil(means[:, 1] - ey), 0, intr.height - 1)
        y_hi = np.clip(np.floor(means[:, 1] + ey), 0, intr.height - 1)
        valid = contributes & (x_lo <= x_hi) & (y_lo <= y_hi)

    ranked = order[valid[order]]
    tx_lo = (x_lo[ranked] // size).astype(np.int64)
    ty_lo = (y_lo[ranked] // size).astype(np.int64)
    span_x = (x_hi[ranked] // size).astype(np.int64) - tx_lo + 1
    span_y = (y_hi[ranked] // size).astype(np.int64) - ty_lo + 1
    counts = span_x * span_y

    owner = np.repeat(np.arange(ranked.size), counts)
    offset = np.arange(owner.size) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_ids = (ty_lo[owner] + offset // span_x[owner]) * tiles_x + tx_lo[owner] + offset % span_x[owner]
    keys = tile_ids.astype(np.uint16) if tiles_x * tiles_y <= np.iinfo(np.uint16).max else tile_ids
    by_tile = np.argsort(keys, kind='stable')
    members = ranked[owner[by_tile]]
    bounds = np.searchsorted(tile_ids[by_tile], np.arange(tiles_x * tiles_y + 1))

    tiles = []
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            x0, y0 = tx * size, ty * size
            tiles.append(_Tile(x0, y0, min(x0 + size, intr.width), min(y0 + size, intr.height),
                               members[bounds[t]:bounds[t + 1]]))
    return tiles


def ordered_map(function, items: Sequence, threads: int) -> list:
    """Apply function to every item on up to `threads` workers; results keep input order"""
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            return list(executor.map(function, items))
    return [function(item) for item in items]


@dataclass
class _Projection:
    visible: np.ndarray
    means2d: torch.Tensor
    conics: torch.Tensor
    opacities: torch.Tensor
    tiles: List[_Tile]


def _project_scene(scene: Scene, pose: CameraPose, intr: CameraIntrinsics, settings: RasterSettings) -> _Projection:
    """Cull, project and bin the scene; all geometry in float64"""
    empty = _Projection(np.zeros(0, dtype=np.int64), torch.zeros((0, 2), dtype=DTYPE),
                        torch.zeros((0, 3), dtype=DTYPE), torch.zeros(0, dtype=DTYPE), [])
    if not len(scene):
        return empty
    local_z = pose.world_to_camera(scene.centers)[:, 2]
    in_front = np.nonzero(local_z > settings.near)[0]
    if not in_front.size:
        return empty

    with torch.no_grad():
        means, cov2d, depth = _project_batch(
            to_tensor(scene.centers[in_front]),
            to_tensor(covariances(scene)[in_front]),
            to_tensor(pose.matrix),
            to_tensor(pose.center),
            intr, settings.lowpass,
        )
        means_np, cov_np = means.numpy(), cov2d.numpy()
        keep = ~_outside_image(means_np[:, 0], means_np[:, 1], cov_np[:, 0, 0], cov_np[:, 1, 1],
                               intr, settings.cull_sigma)
        visible = in_front[keep]
        means, cov2d, depth = means[keep], cov2d[keep], depth[keep]
        conics = _conics(cov2d)
        opacities = to_tensor(scene.opacities[visible])
        order = np.argsort(depth.numpy(), kind='stable')
        tiles = _bin_tiles(means.numpy(), cov2d.numpy(), opacities.numpy(), order, intr, settings)
    return _Projection(visible, means, conics, opacities, tiles)


def _composite_image(tiles: List[_Tile], means: torch.Tensor, conics: torch.Tensor, opacities: torch.Tensor,
                     values: torch.Tensor, intr: CameraIntrinsics, settings: RasterSettings,
                     record_depth: bool = False) -> FeatureImage:
    """Blend every tile; values are the visible splats' values in the compositing precision"""
    image = FeatureImage.zeros(values.shape[1], intr.height, intr.width)

    def forward_tile(tile: _Tile):
        order = tile.blended
        if order.size == 0:
            return None
        with torch.no_grad():
            out, coverage, depth = _composite_tile(tile, order, means, conics, opacities, values, settings)
        if record_depth:
            tile.depth = depth
        return out.numpy(), coverage.numpy()

    for tile, result in zip(tiles, ordered_map(forward_tile, tiles, settings.threads)):
        if result is None:
            continue
        out, coverage = result
        h, w = tile.y1 - tile.y0, tile.x1 - tile.x0
        image.data[:, tile.y0:tile.y1, tile.x0:tile.x1] = out.T.reshape(-1, h, w)
        image.alpha[tile.y0:tile.y1, tile.x0:tile.x1] = coverage.reshape(h, w)
    return image


def render(scene: Scene, pose: CameraPose, intr: CameraIntrinsics, channel_select: str = 'features',
           settings: RasterSettings = DEFAULT_SETTINGS):
    """Render per-splat values in float64; returns (FeatureImage, RenderContext)"""
    values = to_tensor(select_values(scene, channel_select))
    projection = _project_scene(scene, pose, intr, settings)
    ctx = RenderContext(scene, pose, intr, channel_select, settings, values, projection.visible,
                        projection.means2d, projection.conics, projection.opacities, projection.tiles)
    if not projection.tiles:
        return FeatureImage.zeros(values.shape[1], intr.height, intr.width), ctx
    return _composite_image(projection.tiles, projection.means2d, projection.conics, projection.opacities,
                            values[torch.as_tensor(projection.visible)], intr, settings, record_depth=True), ctx


def render_image(scene: Scene, pose: CameraPose, intr: CameraIntrinsics, channel_select: str = 'features',
                 settings: RasterSettings = DEFAULT_SETTINGS) -> FeatureImage:
    """Forward-only render composited in settings.forward_precision; no context is kept"""
    values = select_values(scene, channel_select)
    projection = _project_scene(scene, pose, intr, settings)
    if not projection.tiles:
        return FeatureImage.zeros(values.shape[1], intr.height, intr.width)
    dtype = PRECISIONS[settings.forward_precision]
    return _composite_image(projection.tiles, projection.means2d.to(dtype), projection.conics.to(dtype),
                            projection.opacities.to(dtype), to_tensor(values[projection.visible], dtype),
                            intr, settings)


def composite_values(ctx: RenderContext, values) -> FeatureImage:
    """Forward render of other per-splat values over the geometry saved in ctx"""
    if ctx.released:
        raise RenderContractError("Render context was released")
    values = to_tensor(values)
    if values.ndim != 2 or values.shape[0] != ctx.values.shape[0]:
        raise RenderContractError(f"Expected values for {ctx.values.shape[0]} splats, got {tuple(values.shape)}")
    if not ctx.tiles:
        return FeatureImage.zeros(values.shape[1], ctx.intrinsics.height, ctx.intrinsics.width)
    return _composite_image(ctx.tiles, ctx.means2d, ctx.conics, ctx.opacities,
                            values[torch.as_tensor(ctx.visible)], ctx.intrinsics, ctx.settings)


def _tile_gradient(gradient: torch.Tensor, tile: _Tile) -> torch.Tensor:
    """(P, C) slice of the image gradient covering one tile"""
    return gradient[:, tile.y0:tile.y1, tile.x0:tile.x1].reshape(gradient.shape[0], -1).T


def render_backward_features(ctx: RenderContext, dL_dF) -> np.ndarray:
    """
    Gradient w.r.t. the rendered per-splat values, shape (N, C).

    Rendering is linear in the values for fixed geometry, so the adjoint is
    the transpose of each tile's weight matrix applied to the image gradient.
    """
    dL_dF = np.asarray(dL_dF, dtype=np.float64)
    ctx.check(dL_dF)
    result = torch.zeros(ctx.values.shape, dtype=DTYPE)
    if not ctx.tiles:
        return result.numpy()
    gradient = to_tensor(dL_dF)

    def backward_tile(tile: _Tile):
        order = tile.blended
        if order.size == 0:
            return None
        index = torch.as_tensor(order)
        with torch.no_grad():
            weights = _tile_weights(tile, ctx.means2d[index], ctx.conics[index], ctx.opacities[index], ctx.settings)
            return weights.T @ _tile_gradient(gradient, tile)

    visible = torch.as_tensor(ctx.visible)
    for tile, partial in zip(ctx.tiles, ordered_map(backward_tile, ctx.tiles, ctx.settings.threads)):
        if partial is not None:
            result.index_add_(0, visible[torch.as_tensor(tile.blended)], partial)
    return result.numpy()


def render_backward_pose(ctx: RenderContext, dL_dF) -> np.ndarray:
    """Gradient w.r.t. the pose parameters (t_x, t_y, t_z, yaw, pitch)"""
    dL_dF = np.asarray(dL_dF, dtype=np.float64)
    ctx.check(dL_dF)
    params = params_from_pose(ctx.pose)
    if not ctx.tiles or not np.any(dL_dF):
        return np.zeros(5)

    gradient = to_tensor(dL_dF)
    visible_values = ctx.values[torch.as_tensor(ctx.visible)]

    def backward_tile(tile: _Tile):
        order = tile.blended
        if order.size == 0:
            return None
        index = torch.as_tensor(order)
        means = ctx.means2d[index].clone().requires_grad_(True)
        conics = ctx.conics[index].clone().requires_grad_(True)
        with torch.enable_grad():
            weights = _tile_weights(tile, means, conics, ctx.opacities[index], ctx.settings)
            out = weights @ visible_values[index]
            g_means, g_conics = torch.autograd.grad(out, (means, conics),
                                                    grad_outputs=_tile_gradient(gradient, tile))
        return g_means, g_conics

    g_means = torch.zeros_like(ctx.means2d)
    g_conics = torch.zeros_like(ctx.conics)
    for tile, partial in zip(ctx.tiles, ordered_map(backward_tile, ctx.tiles, ctx.settings.threads)):
        if partial is None:
            continue
        index = torch.as_tensor(tile.blended)
        g_means.index_add_(0, index, partial[0])
        g_conics.index_add_(0, index, partial[1])

    scene = ctx.scene
    pose_params = torch.tensor(params.as_array(), dtype=DTYPE, requires_grad=True)
    with torch.enable_grad():
        rotation = rotation_from_angles(pose_params[3], pose_params[4])
        means, cov2d, _ = _project_batch(
            to_tensor(scene.centers[ctx.visible]),
            to_tensor(covariances(scene)[ctx.visible]),
            rotation, pose_params[:3], ctx.intrinsics, ctx.settings.lowpass,
        )
        (result,) = torch.autograd.grad((means, _conics(cov2d)), (pose_params,),
                                        grad_outputs=(g_means, g_conics))
    return result.numpy().copy()


# Reference oracle

def render_reference(scene: Scene, pose: CameraPose, intr: CameraIntrinsics, channel_select: str = 'features',
                     settings: RasterSettings = DEFAULT_SETTINGS) -> FeatureImage:
    """
    Naive per-pixel compositing over every splat in depth order.

    No tiling and no footprint bounds; the same contribution floor and
    transmittance floor as render() are applied unless disabled in settings.
    """
    values = select_values(scene, channel_select)
    image = FeatureImage.zeros(values.shape[1], intr.height, intr.width)
    projected = [project_gaussian(scene.splat(i), pose, intr, settings) for i in range(len(scene))]
    candidates = [i for i, p in enumerate(projected) if not p.culled]
    order = sorted(candidates, key=lambda i: (projected[i].depth, i))

    ys, xs = np.mgrid[0:intr.height, 0:intr.width].astype(np.float64)
    transmittance = np.ones((intr.height, intr.width))
    for i in order:
        p = projected[i]
        inverse = np.linalg.inv(p.cov2d)
        dx, dy = xs - p.mean2d[0], ys - p.mean2d[1]
        power = -0.5 * (inverse[0, 0] * dx * dx + inverse[1, 1] * dy * dy) - inverse[0, 1] * dx * dy
        alpha = scene.opacities[i] * np.exp(np.minimum(power, 0.0))
        if settings.min_contribution > 0:
            alpha = np.where(alpha >= settings.min_contribution, alpha, 0.0)
        if settings.min_transmittance > 0:
            alpha = np.where(transmittance >= settings.min_transmittance, alpha, 0.0)
        weight = alpha * transmittance
        image.data += weight[None, :, :] * values[i][:, None, None]
        transmittance = transmittance * (1.0 - alpha)
    image.alpha[:] = np.clip(1.0 - transmittance, 0.0, 1.0)
    return image
