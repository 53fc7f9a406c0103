from viewfinder.forms import RunConfigForm
from viewfinder.services import viewfinder_service

from ._base import PipelineCommand, at_least


class Command(PipelineCommand):
    help = 'Sampling-density and (K, refinement steps) ablations on seeded toy scenes'

    def add_command_arguments(self, parser):
        parser.add_argument('--out', required=True, help='JSON results')
        parser.add_argument('--scenes', type=at_least(1), default=3, help='Toy scenes, seeded seed..seed+scenes-1')
        parser.add_argument('--kind', choices=('sampling', 'search', 'all'), default='all')
        parser.add_argument('--config', help='JSON run configuration')

    def run(self, **options):
        form = RunConfigForm.from_sources(options['config'])
        cfg = form.search_config(options['seed'], options['threads'])
        seeds = [options['seed'] + i for i in range(options['scenes'])]
        results = viewfinder_service.ablate(seeds, cfg, options['out'], options['kind'])
        for name in ('sampling', 'search'):
            for row in results.get(name, []):
                self.stdout.write(f"{name}: {row}")
