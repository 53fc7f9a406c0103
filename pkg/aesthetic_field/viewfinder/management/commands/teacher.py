from viewfinder.services import viewfinder_service

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Write one teacher map (FMAP) per camera: view_000.fmap, view_001.fmap, ...'

    def add_command_arguments(self, parser):
        parser.add_argument('--scene', required=True)
        parser.add_argument('--cameras', required=True)
        parser.add_argument('--out', required=True, help='Output directory')
        parser.add_argument('--source', choices=('procedural', 'features'), default='procedural',
                            help="'features' renders the scene's own features (self-distillation targets)")

    def run(self, **options):
        paths = viewfinder_service.produce_teacher_maps(
            options['scene'], options['cameras'], options['out'], options['source'],
            options['seed'], options['threads'],
        )
        self.stdout.write(f"Wrote {len(paths)} teacher maps to {options['out']}")
