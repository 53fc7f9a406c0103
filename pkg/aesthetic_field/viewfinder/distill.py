"""
Per-scene distillation of the aesthetic field: fit per-splat features (and the
channel projection) so rendered, aligned feature maps match teacher maps.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .aesthetic import DecoderWeights, TeacherMap, head_logit, pool_tensor, project_channels, score_view
from .exceptions import DivergenceError, DomainError
from .geometry import Camera, CameraIntrinsics, CameraPose
from .rasterizer import (DEFAULT_SETTINGS, DTYPE, RasterSettings, RenderContext, composite_values, render,
                         render_backward_features, to_tensor)
from .scene import Scene, load_scene, save_scene

logger = logging.getLogger(__name__)

SCHEDULES = ('constant', 'cosine')
SCORE_CLIP = 1e-4


@dataclass(frozen=True)
class DistillConfig:
    iterations: int = 500
    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    calibrate_decoder: bool = True
    fit_projection: bool = True
    schedule: str = 'constant'
    log_every: int = 50

    def __post_init__(self):
        if self.iterations < 1:
            raise DomainError(f"Distillation needs at least one iteration, got {self.iterations}")
        if not self.step_size > 0:
            raise DomainError(f"Step size must be positive, got {self.step_size}")
        if self.weight_decay < 0:
            raise DomainError(f"Weight decay must be non-negative, got {self.weight_decay}")
        if self.schedule not in SCHEDULES:
            raise DomainError(f"Unknown schedule '{self.schedule}', expected one of {SCHEDULES}")

    @classmethod
    def from_settings(cls, **overrides) -> 'DistillConfig':
        """Defaults from Django settings; None-valued overrides are ignored"""
        from django.conf import settings

        values = {
            'iterations': settings.AESFIELD_DISTILL_ITERATIONS,
            'step_size': settings.AESFIELD_DISTILL_STEP_SIZE,
            'weight_decay': settings.AESFIELD_DISTILL_WEIGHT_DECAY,
            'schedule': settings.AESFIELD_DISTILL_SCHEDULE,
            'log_every': settings.AESFIELD_DISTILL_LOG_EVERY,
        }
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)


class TrainingView(NamedTuple):
    pose: CameraPose
    intrinsics: CameraIntrinsics
    teacher: TeacherMap


@dataclass
class FieldFit:
    """Fitted per-splat features, decoder weights and the loss trace (initial loss first)"""

    features: np.ndarray
    decoder: DecoderWeights
    loss_trace: List[float] = field(default_factory=list)
    seed: Optional[int] = None

    @property
    def best_loss(self) -> float:
        return min(self.loss_trace) if self.loss_trace else math.nan


class DistillLoss(NamedTuple):
    loss: float
    grad_features: np.ndarray
    grad_projection: np.ndarray


class EvalRow(NamedTuple):
    view: int
    predicted: float
    teacher: Optional[float]
    map_mse: float


def _check_views(views: Sequence[TrainingView], decoder: DecoderWeights):
    expected = (decoder.teacher_channels, *decoder.grid)
    for index, view in enumerate(views):
        if view.teacher.grid.shape != expected:
            raise DomainError(f"Teacher map {index} has shape {view.teacher.grid.shape}, expected {expected}")


def render_contexts(scene: Scene, features, views: Sequence, settings: RasterSettings = DEFAULT_SETTINGS
                    ) -> List[RenderContext]:
    """Render state per view; the geometry is reusable for any feature block of the same width"""
    carrier = scene.with_features(features)
    return [render(carrier, view[0], view[1], 'features', settings)[1] for view in views]


def _aligned(data: torch.Tensor, projection: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
    return project_channels(pool_tensor(data, grid), projection)


def distill_loss(scene: Scene, features, views: Sequence[TrainingView], decoder: DecoderWeights,
                 weight_decay: float = 0.0, contexts: Optional[Sequence[RenderContext]] = None,
                 settings: RasterSettings = DEFAULT_SETTINGS) -> DistillLoss:
    """
    Mean over views of the mean squared difference between the aligned render
    and the teacher grid, plus 0.5 * weight_decay * |features|^2.

    Returns the loss with its gradients w.r.t. the features and the channel
    projection. Views are reduced in list order.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (len(scene), decoder.feature_dim):
        raise DomainError(f"Feature block {features.shape} does not match ({len(scene)}, {decoder.feature_dim})")
    if not views:
        raise DomainError("Distillation loss needs at least one view")
    _check_views(views, decoder)
    if contexts is None:
        contexts = render_contexts(scene, features, views, settings)

    projection = to_tensor(decoder.projection).requires_grad_(True)
    grad_features = weight_decay * features
    grad_projection = torch.zeros_like(projection)
    total = 0.0
    for view, ctx in zip(views, contexts):
        image = composite_values(ctx, features)
        data = to_tensor(image.data).requires_grad_(True)
        target = to_tensor(view.teacher.grid)
        loss = torch.mean((_aligned(data, projection, decoder.grid) - target) ** 2) / len(views)
        g_data, g_projection = torch.autograd.grad(loss, (data, projection))
        grad_features = grad_features + render_backward_features(ctx, g_data.numpy())
        grad_projection += g_projection
        total += float(loss)

    total += 0.5 * weight_decay * float(np.sum(features * features))
    return DistillLoss(total, grad_features, grad_projection.numpy())


def calibrate_readout(summaries: np.ndarray, scores: np.ndarray) -> Tuple[np.ndarray, float]:
    """Least-squares readout and bias mapping view summaries to logit(teacher score)"""
    clipped = np.clip(scores, SCORE_CLIP, 1.0 - SCORE_CLIP)
    targets = np.log(clipped / (1.0 - clipped))
    design = np.hstack([summaries, np.ones((summaries.shape[0], 1))])
    solution, *_ = np.linalg.lstsq(design, targets, rcond=None)
    return solution[:-1], float(solution[-1])


def _view_summaries(contexts, features, decoder: DecoderWeights) -> np.ndarray:
    projection = to_tensor(decoder.projection)
    spatial = to_tensor(decoder.spatial)
    rows = []
    with torch.no_grad():
        for ctx in contexts:
            data = to_tensor(composite_values(ctx, features).data)
            rows.append(torch.einsum('tij,ij->t', _aligned(data, projection, decoder.grid), spatial).numpy())
    return np.array(rows)


def fit_field(scene: Scene, views: Sequence[TrainingView], cfg: DistillConfig, seed: int,
              decoder: Optional[DecoderWeights] = None,
              settings: RasterSettings = DEFAULT_SETTINGS) -> FieldFit:
    """
    Adam on zero-initialized features (and the projection unless fixed) for
    cfg.iterations updates. The trace holds the initial loss and the loss after
    every update. Decoder readout is optionally calibrated afterwards.
    """
    if not views:
        raise DomainError("fit_field needs at least one training view")
    if decoder is None:
        teacher = views[0].teacher
        decoder = DecoderWeights.initial(scene.feature_dim, teacher.channels, teacher.grid.shape[1:], seed)
    _check_views(views, decoder)

    torch.manual_seed(seed)
    features = torch.zeros((len(scene), decoder.feature_dim), dtype=DTYPE, requires_grad=True)
    projection = to_tensor(decoder.projection).requires_grad_(cfg.fit_projection)
    parameters = [features, projection] if cfg.fit_projection else [features]
    optimizer = torch.optim.Adam(parameters, lr=cfg.step_size, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    scheduler = None
    if cfg.schedule == 'cosine':
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.iterations)

    contexts = render_contexts(scene, np.zeros((len(scene), decoder.feature_dim)), views, settings)
    logger.info(f"Distilling {len(scene)} splats over {len(views)} views for {cfg.iterations} iterations "
                f"(step={cfg.step_size}, schedule={cfg.schedule}, seed={seed})")

    def evaluate(iteration: int) -> DistillLoss:
        current = decoder.replace(projection=projection.detach().numpy().copy())
        result = distill_loss(scene, features.detach().numpy(), views, current, cfg.weight_decay, contexts)
        if not math.isfinite(result.loss):
            logger.error(f"Distillation diverged at iteration {iteration}: loss={result.loss}")
            raise DivergenceError(iteration, result.loss)
        return result

    trace = []
    for iteration in range(cfg.iterations):
        result = evaluate(iteration)
        trace.append(result.loss)
        if iteration % cfg.log_every == 0:
            logger.info(f"Iteration {iteration}: loss={result.loss:.6e}")
        optimizer.zero_grad()
        features.grad = torch.from_numpy(result.grad_features)
        if cfg.fit_projection:
            projection.grad = torch.from_numpy(result.grad_projection)
        optimizer.step()
        if scheduler is not None:
            scheduler.step()

    final = evaluate(cfg.iterations)
    trace.append(final.loss)
    logger.info(f"Iteration {cfg.iterations}: loss={final.loss:.6e} (initial {trace[0]:.6e})")

    fitted = features.detach().numpy().copy()
    decoder = decoder.replace(projection=projection.detach().numpy().copy())
    if cfg.calibrate_decoder:
        scored = [i for i, view in enumerate(views) if view.teacher.score is not None]
        if scored:
            summaries = _view_summaries([contexts[i] for i in scored], fitted, decoder)
            readout, bias = calibrate_readout(summaries, np.array([views[i].teacher.score for i in scored]))
            decoder = decoder.replace(readout=readout, bias=bias)
            logger.info(f"Calibrated decoder readout on {len(scored)} teacher scores (bias={bias:.4f})")
        else:
            logger.warning("No teacher scores available, decoder readout left uncalibrated")

    for ctx in contexts:
        ctx.release()
    return FieldFit(fitted, decoder, trace, seed)


def eval_field(scene: Scene, fit: FieldFit, heldout: Sequence[TrainingView],
               settings: RasterSettings = DEFAULT_SETTINGS) -> List[EvalRow]:
    """Predicted score, teacher score and aligned-map MSE for every held-out view"""
    rows = []
    if not heldout:
        return rows
    _check_views(heldout, fit.decoder)
    projection = to_tensor(fit.decoder.projection)
    carrier = scene.with_features(fit.features)
    for index, view in enumerate(heldout):
        image, ctx = render(carrier, view.pose, view.intrinsics, 'features', settings)
        ctx.release()
        with torch.no_grad():
            aligned = _aligned(to_tensor(image.data), projection, fit.decoder.grid)
            predicted = float(torch.sigmoid(head_logit(aligned, fit.decoder)))
        mse = float(np.mean((aligned.numpy() - view.teacher.grid) ** 2))
        rows.append(EvalRow(index, predicted, view.teacher.score, mse))
    logger.info(f"Evaluated field on {len(rows)} held-out views")
    return rows


def teacher_from_features(scene: Scene, features, cameras: Sequence[Camera], decoder: DecoderWeights,
                          settings: RasterSettings = DEFAULT_SETTINGS) -> List[TeacherMap]:
    """Aligned maps and decoded scores of a known field; self-distillation targets"""
    carrier = scene.with_features(features)
    projection = to_tensor(decoder.projection)
    maps = []
    for camera in cameras:
        image, ctx = render(carrier, camera.pose, camera.intrinsics, 'features', settings)
        ctx.release()
        with torch.no_grad():
            aligned = _aligned(to_tensor(image.data), projection, decoder.grid)
            score = float(torch.sigmoid(head_logit(aligned, decoder)))
        maps.append(TeacherMap(aligned.numpy().copy(), score))
    return maps


def predicted_scores(scene: Scene, fit: FieldFit, cameras: Sequence[Camera],
                     settings: RasterSettings = DEFAULT_SETTINGS) -> List[float]:
    return [score_view(scene, fit.features, c.pose, c.intrinsics, fit.decoder, settings) for c in cameras]


# Persistence

def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + '.json')


def save_field(scene: Scene, fit: FieldFit, path: Union[str, Path], config: Optional[DistillConfig] = None):
    """Scene with the fitted feature block as AESF, plus a JSON sidecar for the decoder and trace"""
    save_scene(scene.with_features(fit.features), path)
    sidecar = {
        'decoder': fit.decoder.to_dict(),
        'loss_trace': [float(v) for v in fit.loss_trace],
        'seed': fit.seed,
        'config': asdict(config) if config is not None else None,
    }
    with open(sidecar_path(path), 'w', encoding='utf-8') as handle:
        json.dump(sidecar, handle, indent=2)
    logger.info(f"Saved field to {path} (sidecar {sidecar_path(path)})")


def load_field(path: Union[str, Path]) -> Tuple[Scene, FieldFit]:
    scene = load_scene(path)
    with open(sidecar_path(path), 'r', encoding='utf-8') as handle:
        sidecar = json.load(handle)
    decoder = DecoderWeights.from_dict(sidecar['decoder'])
    if decoder.feature_dim != scene.feature_dim:
        raise DomainError(f"Sidecar decoder expects D={decoder.feature_dim}, scene has D={scene.feature_dim}")
    fit = FieldFit(np.array(scene.features), decoder, sidecar.get('loss_trace', []), sidecar.get('seed'))
    return scene, fit
