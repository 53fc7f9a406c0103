from viewfinder.forms import RunConfigForm
from viewfinder.services import viewfinder_service

from ._base import PipelineCommand, at_least, positive


class Command(PipelineCommand):
    help = 'Fit the aesthetic field of a scene to teacher maps'

    def add_command_arguments(self, parser):
        parser.add_argument('--scene', required=True)
        parser.add_argument('--cameras', required=True, help='Training cameras')
        parser.add_argument('--maps', required=True, help='Directory of view_NNN.fmap teacher maps')
        parser.add_argument('--out', required=True, help='Fitted AESF scene; sidecar written to <out>.json')
        parser.add_argument('--config', help='JSON run configuration')
        parser.add_argument('--decoder', help='Known decoder weights (JSON); fixes projection and readout')
        parser.add_argument('--iterations', type=at_least(1))
        parser.add_argument('--step-size', type=positive)
        parser.add_argument('--weight-decay', type=at_least(0.0, float))
        parser.add_argument('--schedule', choices=('constant', 'cosine'))

    def run(self, **options):
        fixed = {'fit_projection': False, 'calibrate_decoder': False} if options['decoder'] else {}
        form = RunConfigForm.from_sources(
            options['config'],
            iterations=options['iterations'],
            step_size=options['step_size'],
            weight_decay=options['weight_decay'],
            schedule=options['schedule'],
            **fixed,
        )
        fit = viewfinder_service.distill(
            options['scene'], options['cameras'], options['maps'], form.distill_config(), options['seed'],
            options['out'], options['decoder'], options['threads'],
        )
        self.stdout.write(f"Final loss {fit.loss_trace[-1]:.6e} (initial {fit.loss_trace[0]:.6e})")
