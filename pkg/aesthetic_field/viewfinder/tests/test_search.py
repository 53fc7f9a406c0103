import json
import math
from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase
from scipy.spatial.transform import Rotation

from viewfinder.aesthetic import DecoderWeights
from viewfinder.exceptions import DomainError
from viewfinder.geometry import CameraPose, PoseParams5, from_scipy, params_from_pose, pose_from_params
from viewfinder.harness import grid_search_optimum, search_region, toy_benchmark
from viewfinder.search import (STATUS_NO_VIABLE, STATUS_OK, FieldObjective, Provenance, ScoredPose, SearchConfig,
                               ascend, coarse_sample, refine_pose, score_candidates, select_topk, suggest,
                               suggest_with)

from .helpers import IDENTITY_POSE, SMALL_INTRINSICS, BumpObjective, random_scene

PEAK = (0.5, 0.05, -2.95, 0.1, 0.02)


def arc_poses():
    return [pose_from_params(PoseParams5((0.0, 0.0, -3.0), 0.0, 0.0)),
            pose_from_params(PoseParams5((1.0, 0.0, -3.0), 0.2, 0.0))]


def three_poses():
    return arc_poses() + [pose_from_params(PoseParams5((1.5, 0.2, -2.5), 0.4, -0.1))]


class NonFiniteObjective(BumpObjective):
    def value_and_grad(self, params):
        return math.nan, np.zeros(5)


class SearchConfigTests(SimpleTestCase):
    def test_resolve_derives_scale_from_diagonal(self):
        cfg = SearchConfig().resolve(10.0)
        self.assertAlmostEqual(cfg.shift_radius, 0.5)
        self.assertAlmostEqual(cfg.dedup_eps, 0.2)
        self.assertAlmostEqual(cfg.rotation_weight, 1.0)

    def test_resolve_keeps_explicit_values(self):
        cfg = SearchConfig(shift_radius=0.3, dedup_eps=0.0).resolve(10.0)
        self.assertEqual(cfg.shift_radius, 0.3)
        self.assertEqual(cfg.dedup_eps, 0.0)

    def test_defaults(self):
        cfg = SearchConfig()
        self.assertEqual((cfg.samples_per_segment, cfg.neighbors, cfg.top_k, cfg.refine_steps), (16, 8, 2, 25))
        self.assertEqual(cfg.step_size, 0.01)
        self.assertAlmostEqual(cfg.jitter, math.radians(5.0))

    def test_rejects_bad_values(self):
        for changes in ({'samples_per_segment': 0}, {'neighbors': -1}, {'top_k': 0}, {'refine_steps': -1},
                        {'step_size': 0.0}, {'seed': -1}):
            with self.assertRaises(DomainError):
                SearchConfig(**changes)


class CoarseSampleTests(SimpleTestCase):
    def setUp(self):
        self.cfg = SearchConfig(samples_per_segment=4, neighbors=2, shift_radius=0.3, seed=11)

    def test_count_and_provenance(self):
        samples = coarse_sample(three_poses(), self.cfg)
        self.assertEqual(len(samples), (4 * 2 + 1) * (1 + 2))
        self.assertEqual(samples[0].provenance, Provenance(0, 0))
        self.assertEqual(samples[1].provenance, Provenance(0, 0, 0))
        self.assertEqual(samples[2].provenance, Provenance(0, 0, 1))
        self.assertEqual(samples[12].provenance, Provenance(1, 0))
        self.assertEqual(samples[24].provenance, Provenance(1, 4))
        np.testing.assert_allclose(samples[24].pose.center, three_poses()[-1].center)

    def test_neighbors_stay_in_shift_disc(self):
        samples = coarse_sample(three_poses(), self.cfg)
        for index in range(0, len(samples), 3):
            base = samples[index].pose
            for neighbor in samples[index + 1:index + 3]:
                self.assertLessEqual(float(np.linalg.norm(neighbor.pose.center - base.center)), 0.3 + 1e-12)

    def test_same_seed_same_samples(self):
        a = coarse_sample(three_poses(), self.cfg)
        b = coarse_sample(three_poses(), self.cfg)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.pose.center, y.pose.center)
            np.testing.assert_array_equal(x.pose.rotation, y.pose.rotation)

    def test_neighbor_streams_are_independent_of_count(self):
        fewer = coarse_sample(three_poses(), self.cfg)
        more = coarse_sample(three_poses(), replace(self.cfg, neighbors=3))
        np.testing.assert_array_equal(fewer[1].pose.center, more[1].pose.center)
        np.testing.assert_array_equal(fewer[2].pose.center, more[2].pose.center)
        np.testing.assert_array_equal(fewer[3].pose.center, more[4].pose.center)

    def test_samples_are_levelled(self):
        rolled = CameraPose(rotation=from_scipy(Rotation.from_euler('YXZ', [0.1, 0.05, 0.3])),
                            center=[0.0, 0.0, -3.0])
        samples = coarse_sample([rolled] + arc_poses()[1:], self.cfg)
        for sample in samples:
            params_from_pose(sample.pose)


class SelectTopKTests(SimpleTestCase):
    def setUp(self):
        rotation = [1.0, 0.0, 0.0, 0.0]
        self.scored = [
            ScoredPose(CameraPose(rotation=rotation, center=[x, 0.0, 0.0]), Provenance(0, i), score)
            for i, (x, score) in enumerate([(0.0, 0.9), (0.01, 0.95), (1.0, 0.5), (2.0, 0.5)])
        ]

    def test_skips_near_duplicates(self):
        chosen = select_topk(self.scored, 3, dedup_eps=0.1, rotation_weight=1.0)
        self.assertEqual([s.provenance.sample for s in chosen], [1, 2, 3])

    def test_ties_keep_input_order(self):
        chosen = select_topk(self.scored, 2, dedup_eps=0.1, rotation_weight=1.0)
        self.assertEqual([s.provenance.sample for s in chosen], [1, 2])

    def test_no_dedup(self):
        chosen = select_topk(self.scored, 2, dedup_eps=0.0, rotation_weight=1.0)
        self.assertEqual([s.provenance.sample for s in chosen], [1, 0])

    def test_fewer_than_k(self):
        self.assertEqual(len(select_topk(self.scored[:2], 5, dedup_eps=0.1, rotation_weight=0.0)), 1)


class AscendTests(SimpleTestCase):
    def setUp(self):
        self.objective = BumpObjective(PEAK)
        self.start = pose_from_params(PoseParams5.from_array(np.array(PEAK) + [0.2, -0.2, 0.15, -0.2, 0.2]))

    def test_converges_to_maximizer(self):
        cfg = SearchConfig(refine_steps=300, step_size=0.01)
        candidate = ascend(self.objective, self.start, cfg)
        self.assertEqual(len(candidate.trace), 301)
        best = params_from_pose(candidate.pose).as_array()
        np.testing.assert_allclose(best, PEAK, atol=0.05)
        self.assertGreater(candidate.score, 0.999)
        self.assertEqual(candidate.trace[candidate.best_step][1], candidate.score)

    def test_never_scores_below_start(self):
        rng = np.random.default_rng(3)
        cfg = SearchConfig(refine_steps=5, step_size=0.3)
        for _ in range(10):
            start = pose_from_params(PoseParams5.from_array(np.array(PEAK) + rng.uniform(-0.3, 0.3, 5)))
            start_score = self.objective.evaluate(start).score
            candidate = ascend(self.objective, start, cfg, start_score=start_score)
            self.assertGreaterEqual(candidate.score, start_score)
            self.assertEqual(candidate.stage1_score, start_score)

    def test_start_at_peak_is_kept(self):
        start = pose_from_params(PoseParams5.from_array(PEAK))
        candidate = ascend(self.objective, start, SearchConfig(refine_steps=10), start_score=1.0)
        self.assertIs(candidate.pose, start)
        self.assertIsNone(candidate.best_step)

    def test_zero_steps_evaluates_start_only(self):
        candidate = ascend(self.objective, self.start, SearchConfig(refine_steps=0))
        self.assertEqual(len(candidate.trace), 1)

    def test_non_finite_gradient_aborts(self):
        candidate = ascend(NonFiniteObjective(PEAK), self.start, SearchConfig(refine_steps=5), start_score=0.3)
        self.assertTrue(candidate.aborted)
        self.assertIn('step 0', candidate.diagnostic)
        self.assertEqual(candidate.score, 0.3)
        self.assertIs(candidate.pose, self.start)


class SuggestTests(SimpleTestCase):
    def test_reaches_grid_optimum(self):
        objective = BumpObjective(PEAK)
        cfg = SearchConfig(samples_per_segment=4, neighbors=4, top_k=2, refine_steps=200, step_size=0.01)
        report = suggest_with(objective, arc_poses(), cfg, diagonal=2.0)
        self.assertEqual(report.status, STATUS_OK)
        optimum = grid_search_optimum(objective, search_region(arc_poses(), cfg.resolve(2.0)), 4, 4)
        self.assertGreaterEqual(report.candidates[0].score, 0.99 * optimum.score)
        scores = [c.score for c in report.candidates]
        self.assertEqual(scores, sorted(scores, reverse=True))
        for candidate in report.candidates:
            self.assertGreaterEqual(candidate.score, candidate.stage1_score)

    def test_no_viable_viewpoint(self):
        cfg = SearchConfig(samples_per_segment=2, neighbors=1)
        report = suggest_with(BumpObjective(PEAK, viable=False), arc_poses(), cfg, diagonal=2.0)
        self.assertEqual(report.status, STATUS_NO_VIABLE)
        self.assertFalse(report.viable)
        self.assertEqual(report.candidates, [])
        self.assertEqual(len(report.samples), (2 + 1) * 2)

    def test_scores_in_input_order(self):
        samples = coarse_sample(arc_poses(), SearchConfig(samples_per_segment=3, neighbors=2, shift_radius=0.1))
        objective = BumpObjective(PEAK)
        single = score_candidates(objective, samples, threads=1)
        threaded = score_candidates(objective, samples, threads=3)
        self.assertEqual([s.score for s in single], [s.score for s in threaded])
        self.assertEqual([s.provenance for s in single], [s.provenance for s in samples])

    def test_report_identical_across_thread_counts(self):
        benchmark = toy_benchmark(0)
        cfg = SearchConfig(samples_per_segment=2, neighbors=1, top_k=1, refine_steps=2, seed=5)
        reports = [
            suggest_with(benchmark.objective, benchmark.input_poses, replace(cfg, threads=threads),
                         benchmark.scene.diagonal)
            for threads in (1, 3)
        ]
        first, second = (json.dumps(r.to_dict(), sort_keys=True) for r in reports)
        self.assertEqual(first, second)
        self.assertNotIn('timing', json.loads(first))


class FieldSearchTests(SimpleTestCase):
    def setUp(self):
        self.scene = random_scene(21, count=12, feature_dim=3)
        self.decoder = DecoderWeights.random(3, 2, (4, 4), seed=1)
        self.poses = [IDENTITY_POSE, pose_from_params(PoseParams5((0.2, 0.0, 0.0), 0.05, 0.0))]

    def objective(self):
        return FieldObjective(self.scene, self.scene.features, self.decoder, SMALL_INTRINSICS)

    def test_refine_pose_ascends_field_score(self):
        cfg = SearchConfig(refine_steps=3)
        candidate = refine_pose(self.scene, self.scene.features, self.decoder, SMALL_INTRINSICS, IDENTITY_POSE, cfg)
        expected = ascend(self.objective(), IDENTITY_POSE, cfg)
        self.assertEqual(len(candidate.trace), 4)
        self.assertEqual([s for _, s in candidate.trace], [s for _, s in expected.trace])
        self.assertGreaterEqual(candidate.score, candidate.stage1_score)
        self.assertAlmostEqual(candidate.stage1_score, self.objective().evaluate(IDENTITY_POSE).score, delta=1e-5)

    def test_suggest_runs_field_objective(self):
        cfg = SearchConfig(samples_per_segment=2, neighbors=1, top_k=1, refine_steps=2, seed=4)
        report = suggest(self.scene, self.scene.features, self.decoder, SMALL_INTRINSICS, self.poses, cfg)
        self.assertEqual(report.status, STATUS_OK)
        self.assertEqual(len(report.samples), (2 + 1) * 2)
        self.assertEqual(len(report.candidates), 1)
        self.assertGreaterEqual(report.candidates[0].score, report.candidates[0].stage1_score)
        direct = suggest_with(self.objective(), self.poses, cfg, self.scene.diagonal)
        self.assertEqual(json.dumps(report.to_dict(), sort_keys=True), json.dumps(direct.to_dict(), sort_keys=True))
