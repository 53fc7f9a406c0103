import json
import shutil
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from viewfinder.aesthetic import load_teacher_map
from viewfinder.geometry import load_cameras, save_cameras
from viewfinder.scene import load_scene


def run(*args):
    out = StringIO()
    call_command(*args, stdout=out)
    return out.getvalue()


class CommandTestCase(SimpleTestCase):
    def assertExitCode(self, code, *args):
        with self.assertRaises(CommandError) as caught:
            run(*args)
        self.assertEqual(caught.exception.returncode, code)


class GenCommandTests(CommandTestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_grid_is_deterministic(self):
        first, second = self.tmp / 'a.aesf', self.tmp / 'b.aesf'
        for path in (first, second):
            run('gen', '--seed', '4', '--kind', 'grid', '--n', '3', '--feature-dim', '2', '--out', str(path))
        self.assertEqual(len(load_scene(first)), 27)
        self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_writes_orbit_cameras(self):
        cameras = self.tmp / 'cams.json'
        run('gen', '--seed', '0', '--kind', 'random', '--count', '10', '--out', str(self.tmp / 's.aesf'),
            '--views', '5', '--cameras-out', str(cameras))
        self.assertEqual(len(load_cameras(cameras)), 5)

    def test_unknown_kind_is_usage_error(self):
        self.assertExitCode(2, 'gen', '--seed', '0', '--kind', 'spiral', '--out', str(self.tmp / 's.aesf'))

    def test_missing_seed_is_usage_error(self):
        self.assertExitCode(2, 'gen', '--out', str(self.tmp / 's.aesf'))

    def test_bad_thread_count(self):
        self.assertExitCode(2, 'gen', '--seed', '0', '--threads', '0', '--out', str(self.tmp / 's.aesf'))

    def test_non_positive_sizes_are_usage_errors(self):
        out = self.tmp / 's.aesf'
        for flags in (('--kind', 'grid', '--n', '0'), ('--kind', 'grid', '--n', '-1'),
                      ('--kind', 'random', '--count', '0'), ('--feature-dim', '0'),
                      ('--subject-count', '0', '--clutter-count', '0'), ('--splat-scale', 'nan')):
            with self.subTest(flags=flags):
                self.assertExitCode(2, 'gen', '--seed', '0', '--out', str(out), *flags)
                self.assertFalse(out.exists())

    def test_negative_seed_is_usage_error(self):
        out = self.tmp / 's.aesf'
        self.assertExitCode(2, 'gen', '--seed', '-5', '--kind', 'grid', '--n', '2', '--out', str(out))
        self.assertFalse(out.exists())


class PipelineCommandTests(CommandTestCase):
    """gen -> teacher -> distill -> score/search/eval on one small scene"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = Path(tempfile.mkdtemp())
        cls.scene = cls.tmp / 'scene.aesf'
        cls.cameras = cls.tmp / 'cams.json'
        cls.maps = cls.tmp / 'maps'
        cls.field = cls.tmp / 'field.aesf'
        run('gen', '--seed', '1', '--subject-count', '20', '--clutter-count', '5', '--feature-dim', '4',
            '--splat-scale', '0.1', '--out', str(cls.scene), '--views', '4', '--cameras-out', str(cls.cameras),
            '--arc-degrees', '90')
        run('teacher', '--seed', '1', '--scene', str(cls.scene), '--cameras', str(cls.cameras),
            '--out', str(cls.maps))
        cls.distill_output = run('distill', '--seed', '1', '--scene', str(cls.scene), '--cameras', str(cls.cameras),
                                 '--maps', str(cls.maps), '--out', str(cls.field), '--iterations', '1')

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp)
        super().tearDownClass()

    def test_teacher_maps(self):
        names = sorted(p.name for p in self.maps.iterdir())
        self.assertEqual(names, ['view_000.fmap', 'view_001.fmap', 'view_002.fmap', 'view_003.fmap'])
        teacher = load_teacher_map(self.maps / 'view_000.fmap')
        self.assertEqual(teacher.shape, (14, 14, 8))
        self.assertIsNotNone(teacher.score)

    def test_distill_trace(self):
        sidecar = json.loads(Path(str(self.field) + '.json').read_text())
        self.assertEqual(len(sidecar['loss_trace']), 2)
        self.assertIn('Final loss', self.distill_output)

    def test_distill_missing_maps_is_io_error(self):
        self.assertExitCode(3, 'distill', '--seed', '1', '--scene', str(self.scene), '--cameras', str(self.cameras),
                            '--maps', str(self.tmp / 'nowhere'), '--out', str(self.tmp / 'x.aesf'),
                            '--iterations', '1')

    def test_distill_rejects_unknown_config_keys(self):
        config = self.tmp / 'bad.json'
        config.write_text(json.dumps({'iterations': 1, 'momentum': 0.5}))
        self.assertExitCode(4, 'distill', '--seed', '1', '--scene', str(self.scene), '--cameras', str(self.cameras),
                            '--maps', str(self.maps), '--out', str(self.tmp / 'x.aesf'), '--config', str(config))

    def test_flag_ranges_are_usage_errors(self):
        self.assertExitCode(2, 'distill', '--seed', '1', '--scene', str(self.scene), '--cameras', str(self.cameras),
                            '--maps', str(self.maps), '--out', str(self.tmp / 'x.aesf'), '--iterations', '0')
        self.assertExitCode(2, 'search', '--seed', '1', '--scene', str(self.field), '--cameras', str(self.cameras),
                            '--out', str(self.tmp / 'r0.json'), '--samples', '0')
        self.assertExitCode(2, 'search', '--seed', '-1', '--scene', str(self.field), '--cameras', str(self.cameras),
                            '--out', str(self.tmp / 'r0.json'))
        self.assertFalse((self.tmp / 'x.aesf').exists())
        self.assertFalse((self.tmp / 'r0.json').exists())

    def test_config_file_ranges_are_malformed_input(self):
        config = self.tmp / 'zero.json'
        config.write_text(json.dumps({'iterations': 0}))
        self.assertExitCode(4, 'distill', '--seed', '1', '--scene', str(self.scene), '--cameras', str(self.cameras),
                            '--maps', str(self.maps), '--out', str(self.tmp / 'x.aesf'), '--config', str(config))

    def test_distill_is_thread_independent(self):
        outputs = []
        for threads in ('1', '8'):
            out = self.tmp / f'field_{threads}.aesf'
            run('distill', '--seed', '3', '--threads', threads, '--scene', str(self.scene),
                '--cameras', str(self.cameras), '--maps', str(self.maps), '--out', str(out), '--iterations', '3')
            outputs.append((out.read_bytes(), Path(str(out) + '.json').read_bytes()))
        self.assertEqual(outputs[0], outputs[1])

    def test_render_is_thread_independent(self):
        outputs = []
        for threads in ('1', '8'):
            out = self.tmp / f'renders_{threads}'
            run('render', '--seed', '0', '--threads', threads, '--scene', str(self.field),
                '--cameras', str(self.cameras), '--out', str(out), '--channels', 'both')
            outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        self.assertEqual(len(outputs[0]), 8)
        self.assertEqual(outputs[0], outputs[1])

    def test_eval_is_thread_independent(self):
        outputs = []
        for threads in ('1', '8'):
            out = self.tmp / f'eval_{threads}.json'
            run('eval', '--seed', '0', '--threads', threads, '--scene', str(self.field),
                '--cameras', str(self.cameras), '--maps', str(self.maps), '--out', str(out))
            outputs.append((out.read_bytes(), out.with_suffix('.txt').read_bytes()))
        self.assertEqual(outputs[0], outputs[1])

    def test_score(self):
        scores = json.loads(run('score', '--seed', '0', '--scene', str(self.field), '--cameras', str(self.cameras)))
        self.assertEqual(len(scores), 4)
        self.assertTrue(all(0.0 < s < 1.0 for s in scores))

    def test_search_report_is_thread_independent(self):
        reports = []
        for threads in ('1', '3'):
            out = self.tmp / f'report_{threads}.json'
            run('search', '--seed', '7', '--threads', threads, '--scene', str(self.field),
                '--cameras', str(self.cameras), '--out', str(out), '--samples', '2', '--neighbors', '1',
                '--steps', '0')
            reports.append(out.read_bytes())
        self.assertEqual(reports[0], reports[1])
        report = json.loads(reports[0])
        self.assertEqual(report['status'], 'ok')
        self.assertEqual(len(report['samples']), (2 * 3 + 1) * 2)
        self.assertEqual(report['run_config']['refine_steps'], 0)

    def test_search_writes_ply(self):
        ply = self.tmp / 'samples.ply'
        run('search', '--seed', '7', '--scene', str(self.field), '--cameras', str(self.cameras),
            '--out', str(self.tmp / 'r.json'), '--samples', '1', '--neighbors', '0', '--steps', '0',
            '--ply', str(ply), '--render-top', '1')
        self.assertIn('element vertex 4', ply.read_text())
        self.assertTrue((self.tmp / 'suggestion_00.ppm').exists())

    def test_eval_single_view_is_undefined(self):
        single = self.tmp / 'single.json'
        save_cameras(load_cameras(self.cameras)[:1], single)
        self.assertExitCode(7, 'eval', '--seed', '0', '--scene', str(self.field), '--cameras', str(single),
                            '--maps', str(self.maps), '--out', str(self.tmp / 'eval.json'))

    def test_eval_bad_magic_is_malformed(self):
        broken = self.tmp / 'broken.aesf'
        broken.write_bytes(b'XXXX' + self.field.read_bytes()[4:])
        self.assertExitCode(4, 'eval', '--seed', '0', '--scene', str(broken), '--cameras', str(self.cameras),
                            '--maps', str(self.maps), '--out', str(self.tmp / 'eval.json'))

    def test_eval_mismatched_groups(self):
        self.assertExitCode(2, 'eval', '--seed', '0', '--scene', str(self.field), '--scene', str(self.field),
                            '--cameras', str(self.cameras), '--maps', str(self.maps),
                            '--out', str(self.tmp / 'eval.json'))

    def test_eval_table(self):
        out = self.tmp / 'eval_ok.json'
        run('eval', '--seed', '0', '--scene', str(self.field), '--cameras', str(self.cameras),
            '--maps', str(self.maps), '--out', str(out))
        payload = json.loads(out.read_text())
        self.assertEqual(payload['table'][-1]['scene'], 'average')
        self.assertEqual(len(payload['views']), 4)
        self.assertTrue(out.with_suffix('.txt').exists())
