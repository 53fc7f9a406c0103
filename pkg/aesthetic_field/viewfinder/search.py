"""
Two-stage viewpoint suggestion.

Stage 1 densifies the input trajectory, perturbs every trajectory pose and
scores everything; a greedy score-ordered sweep keeps the top-K distinct
candidates. Stage 2 runs Adam ascent on each candidate's 5-DOF pose and keeps
the best iterate.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch

from .aesthetic import DecoderWeights, TEACHER_GRID, image_score, image_score_and_grad, teacher_score_tensor
from .exceptions import DomainError
from .geometry import (CameraIntrinsics, CameraPose, PerturbSpec, PoseParams5, clamp_pitch, interpolate_trajectory,
                       level_pose, params_from_pose, perturb_pose, pose_distance, pose_from_params)
from .rasterizer import (DEFAULT_SETTINGS, DTYPE, RasterSettings, ordered_map, render, render_backward_pose,
                         render_image, to_tensor)
from .scene import Scene

logger = logging.getLogger(__name__)

STATUS_OK = 'ok'
STATUS_NO_VIABLE = 'no_viable_viewpoint'


@dataclass(frozen=True)
class SearchConfig:
    """
    Stage-1 sampling, selection and Stage-2 ascent settings.

    shift_radius, dedup_eps and rotation_weight left as None are derived from
    the scene's bounding-box diagonal by resolve().
    """

    samples_per_segment: int = 16
    neighbors: int = 8
    top_k: int = 2
    shift_radius: Optional[float] = None
    jitter: float = math.radians(5.0)
    dedup_eps: Optional[float] = None
    rotation_weight: Optional[float] = None
    refine_steps: int = 25
    step_size: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    threads: int = 1
    shift_fraction: float = 0.05
    dedup_fraction: float = 0.02
    rotation_weight_fraction: float = 0.1

    def __post_init__(self):
        if self.samples_per_segment < 1:
            raise DomainError(f"Samples per segment must be >= 1, got {self.samples_per_segment}")
        if self.neighbors < 0:
            raise DomainError(f"Neighbors must be >= 0, got {self.neighbors}")
        if self.top_k < 1:
            raise DomainError(f"K must be >= 1, got {self.top_k}")
        if self.refine_steps < 0:
            raise DomainError(f"Refinement steps must be >= 0, got {self.refine_steps}")
        if not self.step_size > 0:
            raise DomainError(f"Step size must be positive, got {self.step_size}")
        if self.jitter < 0:
            raise DomainError(f"Jitter must be non-negative, got {self.jitter}")
        if self.seed < 0:
            raise DomainError(f"Seed must be >= 0, got {self.seed}")

    @classmethod
    def from_settings(cls, **overrides) -> 'SearchConfig':
        """Defaults from Django settings; None-valued overrides are ignored"""
        from django.conf import settings

        values = {
            'samples_per_segment': settings.AESFIELD_SEARCH_SAMPLES_PER_SEGMENT,
            'neighbors': settings.AESFIELD_SEARCH_NEIGHBORS,
            'top_k': settings.AESFIELD_SEARCH_TOP_K,
            'refine_steps': settings.AESFIELD_SEARCH_REFINE_STEPS,
            'step_size': settings.AESFIELD_SEARCH_STEP_SIZE,
            'jitter': settings.AESFIELD_SEARCH_JITTER,
            'shift_fraction': settings.AESFIELD_SEARCH_SHIFT_FRACTION,
            'dedup_fraction': settings.AESFIELD_SEARCH_DEDUP_FRACTION,
            'rotation_weight_fraction': settings.AESFIELD_SEARCH_ROTATION_WEIGHT_FRACTION,
        }
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)

    def resolve(self, diagonal: float) -> 'SearchConfig':
        """Fill scale-derived defaults from the scene diagonal"""
        return replace(
            self,
            shift_radius=self.shift_fraction * diagonal if self.shift_radius is None else self.shift_radius,
            dedup_eps=self.dedup_fraction * diagonal if self.dedup_eps is None else self.dedup_eps,
            rotation_weight=(self.rotation_weight_fraction * diagonal
                             if self.rotation_weight is None else self.rotation_weight),
        )

    @property
    def perturb(self) -> PerturbSpec:
        return PerturbSpec(shift_radius=self.shift_radius or 0.0, jitter=self.jitter)

    def to_dict(self) -> dict:
        return {
            'samples_per_segment': self.samples_per_segment,
            'neighbors': self.neighbors,
            'top_k': self.top_k,
            'shift_radius': self.shift_radius,
            'jitter': self.jitter,
            'dedup_eps': self.dedup_eps,
            'rotation_weight': self.rotation_weight,
            'refine_steps': self.refine_steps,
            'step_size': self.step_size,
            'beta1': self.beta1,
            'beta2': self.beta2,
            'eps': self.eps,
        }


class Provenance(NamedTuple):
    """Where a Stage-1 pose came from; neighbor None means on the trajectory"""

    segment: int
    sample: int
    neighbor: Optional[int] = None

    def key(self) -> Tuple[int, int, int]:
        return self.segment, self.sample, -1 if self.neighbor is None else self.neighbor

    def to_dict(self) -> dict:
        return {'segment': self.segment, 'sample': self.sample, 'neighbor': self.neighbor}


class SampledPose(NamedTuple):
    pose: CameraPose
    provenance: Provenance


class ScoredPose(NamedTuple):
    pose: CameraPose
    provenance: Provenance
    score: float
    viable: bool = True


class ViewEvaluation(NamedTuple):
    score: float
    viable: bool


@dataclass
class Candidate:
    """A refined suggestion: best pose found, its score and the full ascent trace"""

    pose: CameraPose
    score: float
    provenance: Provenance
    stage1_score: float
    trace: List[Tuple[np.ndarray, float]] = field(default_factory=list)
    best_step: Optional[int] = None
    aborted: bool = False
    diagnostic: Optional[str] = None

    def to_dict(self) -> dict:
        params = params_from_pose(self.pose, strict=False)
        return {
            'provenance': self.provenance.to_dict(),
            'params': [float(v) for v in params.as_array()],
            'c2w': [float(v) for v in self.pose.c2w().reshape(-1)],
            'stage1_score': self.stage1_score,
            'score': self.score,
            'best_step': self.best_step,
            'aborted': self.aborted,
            'diagnostic': self.diagnostic,
            'trace': [{'params': [float(v) for v in p], 'score': s} for p, s in self.trace],
        }


@dataclass
class SuggestionReport:
    status: str
    candidates: List[Candidate]
    samples: List[ScoredPose]
    config: SearchConfig
    seed: int
    timing: dict = field(default_factory=dict)

    @property
    def viable(self) -> bool:
        return self.status == STATUS_OK

    def to_dict(self) -> dict:
        """Serializable form; timing is left out so equal runs serialize identically"""
        return {
            'status': self.status,
            'seed': self.seed,
            'config': self.config.to_dict(),
            'candidates': [dict(rank=rank, **c.to_dict()) for rank, c in enumerate(self.candidates)],
            'samples': [
                {
                    'provenance': s.provenance.to_dict(),
                    'position': [float(v) for v in s.pose.center],
                    'score': s.score,
                    'viable': s.viable,
                }
                for s in self.samples
            ],
        }


# Objectives

class ViewObjective(Protocol):
    """Score of a camera pose, and its gradient w.r.t. the 5-DOF parameters"""

    def evaluate(self, pose: CameraPose) -> ViewEvaluation:
        ...

    def value_and_grad(self, params: PoseParams5) -> Tuple[float, np.ndarray]:
        ...


class FieldObjective:
    """Decoded aesthetic score of the rendered feature field"""

    def __init__(self, scene: Scene, features, decoder: DecoderWeights, intr: CameraIntrinsics,
                 settings: RasterSettings = DEFAULT_SETTINGS):
        self.scene = scene.with_features(features)
        self.decoder = decoder
        self.intrinsics = intr
        self.settings = settings

    @property
    def diagonal(self) -> float:
        return self.scene.diagonal

    def evaluate(self, pose: CameraPose) -> ViewEvaluation:
        image = render_image(self.scene, pose, self.intrinsics, 'features', self.settings)
        return ViewEvaluation(image_score(image, self.decoder), bool(np.any(image.alpha > 0)))

    def value_and_grad(self, params: PoseParams5) -> Tuple[float, np.ndarray]:
        image, ctx = render(self.scene, pose_from_params(params), self.intrinsics, 'features', self.settings)
        score, gradient = image_score_and_grad(image, self.decoder)
        pose_gradient = render_backward_pose(ctx, gradient)
        ctx.release()
        return score, pose_gradient


class TeacherObjective:
    """Procedural teacher score of the rendered color image"""

    def __init__(self, scene: Scene, intr: CameraIntrinsics, grid: Tuple[int, int] = TEACHER_GRID,
                 settings: RasterSettings = DEFAULT_SETTINGS):
        self.scene = scene
        self.intrinsics = intr
        self.grid = grid
        self.settings = settings

    @property
    def diagonal(self) -> float:
        return self.scene.diagonal

    def _score(self, data: torch.Tensor) -> torch.Tensor:
        return teacher_score_tensor(data[:3], data[3], self.grid)

    def evaluate(self, pose: CameraPose) -> ViewEvaluation:
        image = render_image(self.scene, pose, self.intrinsics, 'rgba', self.settings)
        with torch.no_grad():
            score = float(self._score(to_tensor(image.data)))
        return ViewEvaluation(score, bool(np.any(image.alpha > 0)))

    def value_and_grad(self, params: PoseParams5) -> Tuple[float, np.ndarray]:
        image, ctx = render(self.scene, pose_from_params(params), self.intrinsics, 'rgba', self.settings)
        data = to_tensor(image.data).requires_grad_(True)
        score = self._score(data)
        (gradient,) = torch.autograd.grad(score, (data,))
        pose_gradient = render_backward_pose(ctx, gradient.numpy())
        ctx.release()
        return float(score), pose_gradient


# Stage 1

def coarse_sample(input_poses: Sequence[CameraPose], cfg: SearchConfig) -> List[SampledPose]:
    """
    Trajectory poses (S per segment plus the final pose), each followed by its
    N perturbations. Poses are levelled to zero roll. Every perturbation draws
    from its own generator seeded by (seed, segment, sample, neighbor).
    """
    samples_per_segment = cfg.samples_per_segment
    trajectory = interpolate_trajectory(input_poses, samples_per_segment)
    segments = len(input_poses) - 1
    spec = cfg.perturb

    sampled = []
    for index, pose in enumerate(trajectory):
        segment, sample = divmod(index, samples_per_segment)
        if segment == segments:
            segment, sample = segments - 1, samples_per_segment
        base = level_pose(pose)
        sampled.append(SampledPose(base, Provenance(segment, sample)))
        for neighbor in range(cfg.neighbors):
            rng = np.random.default_rng([cfg.seed, segment, sample, neighbor])
            sampled.append(SampledPose(perturb_pose(base, spec, rng), Provenance(segment, sample, neighbor)))
    return sampled


def score_candidates(objective: ViewObjective, samples: Sequence[SampledPose], threads: int = 1
                     ) -> List[ScoredPose]:
    """Evaluate every sample; results in input order whatever the thread count"""
    evaluations = ordered_map(lambda s: objective.evaluate(s.pose), list(samples), threads)
    return [ScoredPose(s.pose, s.provenance, e.score, e.viable) for s, e in zip(samples, evaluations)]


def select_topk(scored: Sequence[ScoredPose], k: int, dedup_eps: float, rotation_weight: float
                ) -> List[ScoredPose]:
    """Greedy sweep by descending score (ties by input order) skipping near-duplicates"""
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].score, i))
    accepted: List[ScoredPose] = []
    for i in order:
        if len(accepted) >= k:
            break
        candidate = scored[i]
        if dedup_eps > 0 and any(pose_distance(candidate.pose, kept.pose, rotation_weight) <= dedup_eps
                                 for kept in accepted):
            continue
        accepted.append(candidate)
    return accepted


# Stage 2

def ascend(objective: ViewObjective, start: CameraPose, cfg: SearchConfig,
           provenance: Provenance = Provenance(0, 0), start_score: Optional[float] = None) -> Candidate:
    """
    Adam ascent on (t_x, t_y, t_z, yaw, pitch) for cfg.refine_steps steps.

    The trace holds every iterate including the start. The returned pose is
    the best iterate; when start_score is given the start pose itself wins
    ties, so the result never scores below it.
    """
    params = torch.tensor(params_from_pose(start, strict=False).as_array(), dtype=DTYPE, requires_grad=True)
    optimizer = torch.optim.Adam([params], lr=cfg.step_size, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                                 maximize=True)
    trace: List[Tuple[np.ndarray, float]] = []
    aborted, diagnostic = False, None

    for step in range(cfg.refine_steps + 1):
        current = PoseParams5.from_array(params.detach().numpy())
        value, gradient = objective.value_and_grad(current)
        if not math.isfinite(value) or not np.all(np.isfinite(gradient)):
            aborted = True
            diagnostic = f"non-finite score or gradient at step {step}"
            logger.warning(f"Refinement of {provenance} aborted: {diagnostic}")
            break
        trace.append((current.as_array(), value))
        if step == cfg.refine_steps:
            break
        optimizer.zero_grad()
        params.grad = torch.from_numpy(np.array(gradient, dtype=np.float64))
        optimizer.step()
        with torch.no_grad():
            params[4] = clamp_pitch(float(params[4]))

    if start_score is None and not trace:
        start_score = objective.evaluate(start).score
    if trace:
        best_step = int(np.argmax([score for _, score in trace]))
        best_score = trace[best_step][1]
    else:
        best_step, best_score = None, -math.inf

    if start_score is not None and start_score >= best_score:
        return Candidate(start, start_score, provenance, start_score, trace, None, aborted, diagnostic)
    best_pose = pose_from_params(PoseParams5.from_array(trace[best_step][0]))
    stage1 = start_score if start_score is not None else trace[0][1]
    return Candidate(best_pose, best_score, provenance, stage1, trace, best_step, aborted, diagnostic)


def refine_pose(scene: Scene, features, decoder: DecoderWeights, intr: CameraIntrinsics, start: CameraPose,
                cfg: SearchConfig, settings: RasterSettings = DEFAULT_SETTINGS) -> Candidate:
    """Ascend the field's decoded score from start"""
    return ascend(FieldObjective(scene, features, decoder, intr, settings), start, cfg)


def _rank(candidates: Sequence[Candidate]) -> List[Candidate]:
    return sorted(candidates, key=lambda c: (-c.score, c.provenance.key()))


def suggest_with(objective: ViewObjective, input_poses: Sequence[CameraPose], cfg: SearchConfig,
                 diagonal: float) -> SuggestionReport:
    """Full two-stage search against any objective"""
    cfg = cfg.resolve(diagonal)
    timing = {}
    started = time.perf_counter()

    samples = coarse_sample(input_poses, cfg)
    scored = score_candidates(objective, samples, cfg.threads)
    timing['stage1'] = time.perf_counter() - started
    viable = [s for s in scored if s.viable]
    logger.info(f"Stage 1 scored {len(scored)} poses ({len(viable)} viable)")

    if not viable:
        logger.warning("No viable viewpoint: every Stage-1 sample renders empty")
        return SuggestionReport(STATUS_NO_VIABLE, [], scored, cfg, cfg.seed, timing)

    selected = select_topk(viable, cfg.top_k, cfg.dedup_eps, cfg.rotation_weight)
    logger.info(f"Selected {len(selected)} candidates: "
                f"{', '.join(f'{s.score:.4f}' for s in selected)}")

    refine_started = time.perf_counter()
    candidates = ordered_map(
        lambda s: ascend(objective, s.pose, cfg, s.provenance, s.score),
        selected, cfg.threads,
    )
    for candidate in candidates:
        logger.info(f"Refined {tuple(candidate.provenance)}: {candidate.stage1_score:.4f} -> {candidate.score:.4f}")
    timing['stage2'] = time.perf_counter() - refine_started
    timing['total'] = time.perf_counter() - started
    return SuggestionReport(STATUS_OK, _rank(candidates), scored, cfg, cfg.seed, timing)


def suggest(scene: Scene, features, decoder: DecoderWeights, intr: CameraIntrinsics,
            input_poses: Sequence[CameraPose], cfg: SearchConfig,
            settings: RasterSettings = DEFAULT_SETTINGS) -> SuggestionReport:
    """Suggest viewpoints maximizing the field's decoded aesthetic score"""
    objective = FieldObjective(scene, features, decoder, intr, settings)
    return suggest_with(objective, input_poses, cfg, scene.diagonal)
