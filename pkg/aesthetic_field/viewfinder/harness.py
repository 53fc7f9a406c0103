"""
Desk-scale experiment harnesses: toy benchmark scenes, a brute-force grid
optimum, gradient-ascent improvement studies and search ablations.
"""

import itertools
import logging
import math
from dataclasses import replace
from typing import Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np

from .exceptions import DomainError
from .geometry import (CameraIntrinsics, CameraPose, PoseParams5, clamp_pitch, interpolate_trajectory,
                       orbit_cameras, params_from_pose, pose_from_params)
from .metrics import delta_score
from .scene import Scene, SyntheticSpec, make_synthetic_scene
from .search import SearchConfig, TeacherObjective, ViewObjective, ascend, suggest_with

logger = logging.getLogger(__name__)

TOY_INTRINSICS = CameraIntrinsics(fx=40.0, fy=40.0, cx=23.5, cy=23.5, width=48, height=48)


class ToyBenchmark(NamedTuple):
    scene: Scene
    input_poses: List[CameraPose]
    objective: TeacherObjective


class SearchRegion(NamedTuple):
    """Axis-aligned box in (t_x, t_y, t_z, yaw, pitch)"""

    low: np.ndarray
    high: np.ndarray

    def sample(self, rng: np.random.Generator) -> PoseParams5:
        values = rng.uniform(self.low, self.high)
        values[4] = clamp_pitch(values[4])
        return PoseParams5.from_array(values)


class GridOptimum(NamedTuple):
    score: float
    params: PoseParams5
    evaluated: int


class AscentStudy(NamedTuple):
    traces: List[List[float]]
    mean_delta: float
    monotone: bool


def toy_benchmark(seed: int, views: int = 3, intr: CameraIntrinsics = TOY_INTRINSICS,
                  radius: float = 3.0, height: float = 0.6) -> ToyBenchmark:
    """Subject+clutter scene, an input arc of orbit cameras and the procedural teacher objective"""
    spec = SyntheticSpec(kind='subject+clutter', feature_dim=1, features='zeros',
                         subject_count=60, clutter_count=40, extent=1.5)
    scene = make_synthetic_scene(spec, seed)
    cameras = orbit_cameras(np.zeros(3), radius, height, views, intr, arc=math.pi / 2)
    return ToyBenchmark(scene, [camera.pose for camera in cameras], TeacherObjective(scene, intr))


def search_region(input_poses: Sequence[CameraPose], cfg: SearchConfig) -> SearchRegion:
    """Bounds of the Stage-1 sampling region of a resolved config"""
    trajectory = interpolate_trajectory(input_poses, cfg.samples_per_segment)
    params = np.array([params_from_pose(p, strict=False).as_array() for p in trajectory])
    margin = np.array([cfg.shift_radius or 0.0] * 3 + [cfg.jitter] * 2)
    low = params.min(axis=0) - margin
    high = params.max(axis=0) + margin
    low[4], high[4] = clamp_pitch(low[4]), clamp_pitch(high[4])
    return SearchRegion(low, high)


def grid_search_optimum(objective: ViewObjective, region: SearchRegion, translation_steps: int = 6,
                        angle_steps: int = 8) -> GridOptimum:
    """Exhaustive evaluation on a regular grid over the region; first maximum wins"""
    if translation_steps < 1 or angle_steps < 1:
        raise DomainError("Grid resolution must be >= 1 per axis")
    axes = [np.linspace(region.low[i], region.high[i], translation_steps) for i in range(3)]
    axes += [np.linspace(region.low[i], region.high[i], angle_steps) for i in (3, 4)]
    best_score, best_params, evaluated = -math.inf, None, 0
    for values in itertools.product(*axes):
        params = PoseParams5.from_array(values)
        score = objective.evaluate(pose_from_params(params)).score
        evaluated += 1
        if score > best_score:
            best_score, best_params = score, params
    logger.info(f"Grid search evaluated {evaluated} poses, best score {best_score:.4f}")
    return GridOptimum(best_score, best_params, evaluated)


def gradient_ascent_study(objective: ViewObjective, region: SearchRegion, cfg: SearchConfig,
                          starts: int = 50, seed: int = 0) -> AscentStudy:
    """Ascend from random starts in the region; reports mean best-minus-initial improvement"""
    rng = np.random.default_rng(seed)
    traces = []
    for _ in range(starts):
        start = pose_from_params(region.sample(rng))
        candidate = ascend(objective, start, cfg)
        traces.append([score for _, score in candidate.trace])
    best_so_far = [np.maximum.accumulate(trace) for trace in traces if trace]
    monotone = all(np.all(np.diff(b) >= 0) for b in best_so_far)
    return AscentStudy(traces, delta_score([t for t in traces if t]), monotone)


def _suggestion_score(objective: ViewObjective, input_poses, cfg: SearchConfig, diagonal: float) -> float:
    report = suggest_with(objective, input_poses, cfg, diagonal)
    return report.candidates[0].score if report.candidates else math.nan


def sampling_ablation(benchmarks: Sequence[ToyBenchmark], cfg: SearchConfig,
                      grid: Iterable[Tuple[int, int]] = ((4, 4), (16, 8))) -> List[dict]:
    """Mean top suggestion score over the benchmarks for each (S, N)"""
    rows = []
    for samples, neighbors in grid:
        config = replace(cfg, samples_per_segment=samples, neighbors=neighbors)
        scores = [_suggestion_score(b.objective, b.input_poses, config, b.scene.diagonal) for b in benchmarks]
        rows.append({'samples_per_segment': samples, 'neighbors': neighbors, 'mean_score': float(np.nanmean(scores))})
        logger.info(f"Sampling ablation S={samples} N={neighbors}: mean score {rows[-1]['mean_score']:.4f}")
    return rows


def ablate_search(benchmarks: Sequence[ToyBenchmark], cfg: SearchConfig, top_ks: Sequence[int] = (1, 2, 4),
                  steps: Sequence[int] = (0, 10, 25)) -> List[dict]:
    """Mean final score and mean refinement gain for each (K, refinement steps)"""
    rows = []
    for k, step_count in itertools.product(top_ks, steps):
        config = replace(cfg, top_k=k, refine_steps=step_count)
        finals, gains = [], []
        for benchmark in benchmarks:
            report = suggest_with(benchmark.objective, benchmark.input_poses, config, benchmark.scene.diagonal)
            if not report.candidates:
                continue
            finals.append(report.candidates[0].score)
            gains.append(float(np.mean([c.score - c.stage1_score for c in report.candidates])))
        rows.append({
            'top_k': k,
            'refine_steps': step_count,
            'mean_score': float(np.mean(finals)) if finals else math.nan,
            'mean_delta': float(np.mean(gains)) if gains else math.nan,
        })
        logger.info(f"Search ablation K={k} steps={step_count}: {rows[-1]}")
    return rows
