from viewfinder.services import viewfinder_service

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Render color (PPM) and/or features (FMAP) for every camera of a camera file'

    def add_command_arguments(self, parser):
        parser.add_argument('--scene', required=True)
        parser.add_argument('--cameras', required=True)
        parser.add_argument('--out', required=True, help='Output directory')
        parser.add_argument('--channels', choices=('color', 'features', 'both'), default='color')

    def run(self, **options):
        paths = viewfinder_service.render_views(
            options['scene'], options['cameras'], options['out'], options['channels'], options['threads'])
        self.stdout.write(f"Wrote {len(paths)} files to {options['out']}")
