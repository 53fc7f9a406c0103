import math

from django.core.management.base import CommandError

from viewfinder.exceptions import DomainError
from viewfinder.forms import default_intrinsics
from viewfinder.scene import DEFAULT_FEATURE_DIM, GENERATORS, SyntheticSpec
from viewfinder.services import viewfinder_service

from ._base import EXIT_USAGE, PipelineCommand, at_least, positive


class Command(PipelineCommand):
    help = 'Generate a synthetic splat scene (and optionally an orbit of cameras around it)'

    def add_command_arguments(self, parser):
        parser.add_argument('--kind', choices=GENERATORS, default='subject+clutter')
        parser.add_argument('--out', required=True, help='Output AESF scene file')
        parser.add_argument('--feature-dim', type=at_least(1), default=DEFAULT_FEATURE_DIM)
        parser.add_argument('--features', choices=('random', 'zeros'), default='random')
        parser.add_argument('--n', type=at_least(1), default=3, help='Grid points per axis')
        parser.add_argument('--spacing', type=positive, default=1.0)
        parser.add_argument('--count', type=at_least(1), default=200, help='Splats of the random generator')
        parser.add_argument('--extent', type=positive, default=2.0)
        parser.add_argument('--subject-count', type=at_least(0), default=120)
        parser.add_argument('--clutter-count', type=at_least(0), default=80)
        parser.add_argument('--splat-scale', type=positive, default=0.06)
        parser.add_argument('--views', type=at_least(0), default=0, help='Orbit cameras to write with --cameras-out')
        parser.add_argument('--cameras-out', help='Camera file for the orbit views')
        parser.add_argument('--arc-degrees', type=float, default=360.0, help='Angular span of the orbit')

    def run(self, **options):
        try:
            spec = SyntheticSpec(
                kind=options['kind'],
                feature_dim=options['feature_dim'],
                features=options['features'],
                n=options['n'],
                spacing=options['spacing'],
                count=options['count'],
                extent=options['extent'],
                subject_count=options['subject_count'],
                clutter_count=options['clutter_count'],
                splat_scale=options['splat_scale'],
            )
        except DomainError as e:
            raise CommandError(str(e), returncode=EXIT_USAGE)
        scene = viewfinder_service.generate_scene(
            spec, options['seed'], options['out'], options['views'], options['cameras_out'],
            default_intrinsics(), math.radians(options['arc_degrees']),
        )
        self.stdout.write(f"Wrote {len(scene)} splats to {options['out']}")
