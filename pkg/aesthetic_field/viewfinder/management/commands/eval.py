from django.core.management.base import CommandError

from viewfinder.services import viewfinder_service

from ._base import EXIT_USAGE, PipelineCommand


class Command(PipelineCommand):
    help = 'PLCC/SRCC between predicted and teacher scores on held-out views, per scene and averaged'

    def add_command_arguments(self, parser):
        parser.add_argument('--scene', action='append', required=True, help='Fitted scene; repeat per scene')
        parser.add_argument('--cameras', action='append', required=True, help='Held-out cameras; one per --scene')
        parser.add_argument('--maps', action='append', required=True, help='Held-out teacher maps; one per --scene')
        parser.add_argument('--out', required=True, help='JSON table')
        parser.add_argument('--table', help='Plain-text table (default: --out with .txt suffix)')

    def run(self, **options):
        groups = list(zip(options['scene'], options['cameras'], options['maps']))
        if not len(options['scene']) == len(options['cameras']) == len(options['maps']):
            raise CommandError("--scene, --cameras and --maps must be given the same number of times",
                               returncode=EXIT_USAGE)
        table = viewfinder_service.evaluate(groups, options['out'], options['table'], options['threads'],
                                           options['seed'])
        average = table[-1]
        self.stdout.write(f"Average PLCC {average['plcc']:.4f}, SRCC {average['srcc']:.4f} over {len(groups)} scenes")
