import itertools
import math
import warnings

import numpy as np
from django.test import SimpleTestCase

from viewfinder.exceptions import DomainError
from viewfinder.geometry import PoseParams5, interpolate_trajectory, orbit_cameras, params_from_pose, pose_from_params
from viewfinder.harness import (TOY_INTRINSICS, SearchRegion, ToyBenchmark, ablate_search, grid_search_optimum,
                                gradient_ascent_study, sampling_ablation, search_region, toy_benchmark)
from viewfinder.rasterizer import DEFAULT_SETTINGS
from viewfinder.scene import Scene
from viewfinder.search import SearchConfig, TeacherObjective, suggest_with

from .helpers import BumpObjective, assert_gradient_close, central_difference

PEAK = (0.4, 0.0, -3.0, 0.15, 0.0)


def bump_benchmark() -> ToyBenchmark:
    poses = [pose_from_params(PoseParams5((0.0, 0.0, -3.0), 0.0, 0.0)),
             pose_from_params(PoseParams5((1.0, 0.0, -3.0), 0.3, 0.0))]
    return ToyBenchmark(Scene.empty(1), poses, BumpObjective(PEAK))


def short_arc(seed: int) -> ToyBenchmark:
    """Toy scene seen from two close orbit cameras, so a coarse grid spans the whole search neighbourhood"""
    benchmark = toy_benchmark(seed)
    cameras = orbit_cameras(np.zeros(3), 3.0, 0.6, 2, TOY_INTRINSICS, arc=0.4)
    return benchmark._replace(input_poses=[camera.pose for camera in cameras])


class ToyBenchmarkTests(SimpleTestCase):
    def test_layout(self):
        benchmark = toy_benchmark(1, views=3)
        self.assertEqual(len(benchmark.scene), 100)
        self.assertEqual(len(benchmark.input_poses), 3)
        evaluation = benchmark.objective.evaluate(benchmark.input_poses[0])
        self.assertTrue(evaluation.viable)
        self.assertTrue(0.0 <= evaluation.score <= 1.0)

    def test_inputs_look_at_the_subject(self):
        for pose in toy_benchmark(2).input_poses:
            forward = pose.matrix[:, 2]
            np.testing.assert_allclose(forward, -pose.center / np.linalg.norm(pose.center), atol=1e-9)


class SearchRegionTests(SimpleTestCase):
    def test_contains_trajectory_and_margin(self):
        benchmark = bump_benchmark()
        cfg = SearchConfig(samples_per_segment=4).resolve(2.0)
        region = search_region(benchmark.input_poses, cfg)
        for pose in interpolate_trajectory(benchmark.input_poses, 4):
            values = params_from_pose(pose).as_array()
            self.assertTrue(np.all(values >= region.low + [cfg.shift_radius] * 3 + [cfg.jitter] * 2 - 1e-12))
            self.assertTrue(np.all(values <= region.high - [cfg.shift_radius] * 3 - [cfg.jitter] * 2 + 1e-12))

    def test_samples_stay_inside(self):
        region = SearchRegion(np.array([-1.0, -1.0, -4.0, -0.5, -0.2]), np.array([1.0, 1.0, -2.0, 0.5, 0.2]))
        rng = np.random.default_rng(0)
        for _ in range(100):
            values = region.sample(rng).as_array()
            self.assertTrue(np.all(values >= region.low) and np.all(values <= region.high))


class GridOptimumTests(SimpleTestCase):
    def test_is_maximum_over_grid(self):
        objective = BumpObjective(PEAK)
        region = SearchRegion(np.array([0.0, -0.5, -3.5, -0.2, -0.2]), np.array([1.0, 0.5, -2.5, 0.4, 0.2]))
        optimum = grid_search_optimum(objective, region, translation_steps=3, angle_steps=2)
        self.assertEqual(optimum.evaluated, 3 ** 3 * 2 ** 2)
        axes = [np.linspace(region.low[i], region.high[i], 3 if i < 3 else 2) for i in range(5)]
        brute = max(objective.evaluate(pose_from_params(PoseParams5.from_array(v))).score
                    for v in itertools.product(*axes))
        self.assertEqual(optimum.score, brute)

    def test_rejects_empty_grid(self):
        region = SearchRegion(np.zeros(5), np.ones(5) * 0.1)
        with self.assertRaises(DomainError):
            grid_search_optimum(BumpObjective(PEAK), region, translation_steps=0)


class StudyTests(SimpleTestCase):
    def test_gradient_ascent_improves(self):
        objective = BumpObjective(PEAK)
        region = SearchRegion(np.array(PEAK) - 0.3, np.array(PEAK) + 0.3)
        study = gradient_ascent_study(objective, region, SearchConfig(refine_steps=25, step_size=0.01),
                                      starts=10, seed=4)
        self.assertEqual(len(study.traces), 10)
        self.assertTrue(all(len(trace) == 26 for trace in study.traces))
        self.assertGreater(study.mean_delta, 0.0)
        self.assertTrue(study.monotone)

    def test_denser_sampling_never_hurts(self):
        cfg = SearchConfig(refine_steps=0, top_k=1, shift_radius=0.1, seed=2)
        rows = sampling_ablation([bump_benchmark()], cfg, grid=((1, 0), (2, 1)))
        self.assertEqual([(r['samples_per_segment'], r['neighbors']) for r in rows], [(1, 0), (2, 1)])
        self.assertGreaterEqual(rows[1]['mean_score'], rows[0]['mean_score'] - 0.01)

    def test_search_ablation_rows(self):
        cfg = SearchConfig(samples_per_segment=2, neighbors=1, shift_radius=0.1, seed=2)
        rows = ablate_search([bump_benchmark()], cfg, top_ks=(1, 2), steps=(0, 5))
        self.assertEqual([(r['top_k'], r['refine_steps']) for r in rows], [(1, 0), (1, 5), (2, 0), (2, 5)])
        for row in rows:
            if row['refine_steps'] == 0:
                self.assertEqual(row['mean_delta'], 0.0)
            else:
                self.assertGreaterEqual(row['mean_delta'], 0.0)
            self.assertFalse(math.isnan(row['mean_score']))


class TeacherObjectiveStudyTests(SimpleTestCase):
    """The harnesses on rendered toy scenes scored by the procedural teacher"""

    def test_suggestion_reaches_grid_optimum(self):
        benchmark = short_arc(1)
        cfg = SearchConfig(samples_per_segment=8, neighbors=8, top_k=2, refine_steps=25, seed=3)
        region = search_region(benchmark.input_poses, cfg.resolve(benchmark.scene.diagonal))
        optimum = grid_search_optimum(benchmark.objective, region, translation_steps=3, angle_steps=3)
        self.assertEqual(optimum.evaluated, 3 ** 5)
        report = suggest_with(benchmark.objective, benchmark.input_poses, cfg, benchmark.scene.diagonal)
        self.assertGreater(optimum.score, 0.0)
        self.assertGreaterEqual(report.candidates[0].score, 0.99 * optimum.score)

    def test_gradient_ascent_improves_from_random_starts(self):
        benchmark = toy_benchmark(2)
        cfg = SearchConfig(refine_steps=8, step_size=0.02).resolve(benchmark.scene.diagonal)
        region = search_region(benchmark.input_poses, cfg)
        study = gradient_ascent_study(benchmark.objective, region, cfg, starts=50, seed=5)
        self.assertEqual(len(study.traces), 50)
        self.assertGreater(study.mean_delta, 0.0)
        self.assertTrue(study.monotone)

    def test_dense_sampling_beats_sparse(self):
        benchmarks = [toy_benchmark(seed) for seed in (1, 2, 3)]
        rows = sampling_ablation(benchmarks, SearchConfig(refine_steps=0, top_k=1, seed=4))
        self.assertEqual([(r['samples_per_segment'], r['neighbors']) for r in rows], [(4, 4), (16, 8)])
        self.assertGreaterEqual(rows[1]['mean_score'], rows[0]['mean_score'])

    def test_pose_gradient_matches_finite_differences(self):
        benchmark = toy_benchmark(1)
        objective = TeacherObjective(benchmark.scene, TOY_INTRINSICS, settings=DEFAULT_SETTINGS.exact())
        for pose in benchmark.input_poses[:2]:
            params = params_from_pose(pose)
            value, analytic = objective.value_and_grad(params)
            self.assertEqual(analytic.shape, (5,))
            self.assertTrue(0.0 < value < 1.0)

            def score(values):
                return objective.value_and_grad(PoseParams5.from_array(values))[0]

            numeric = central_difference(score, params.as_array(), 1e-5)
            assert_gradient_close(self, analytic, numeric, rtol=1e-3, atol=1e-6)

    def test_objective_raises_no_warnings(self):
        benchmark = toy_benchmark(3)
        with warnings.catch_warnings():
            warnings.simplefilter('error')
            benchmark.objective.evaluate(benchmark.input_poses[0])
            benchmark.objective.value_and_grad(params_from_pose(benchmark.input_poses[0]))
