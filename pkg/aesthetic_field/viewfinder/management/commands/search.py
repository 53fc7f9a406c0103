from viewfinder.forms import RunConfigForm
from viewfinder.services import viewfinder_service

from ._base import PipelineCommand, at_least, positive


class Command(PipelineCommand):
    help = 'Suggest aesthetic viewpoints around an input camera trajectory'

    def add_command_arguments(self, parser):
        parser.add_argument('--scene', required=True, help='Fitted scene (or any scene with --objective teacher)')
        parser.add_argument('--cameras', required=True, help='Ordered input cameras (at least two)')
        parser.add_argument('--out', required=True, help='Report JSON')
        parser.add_argument('--config', help='JSON run configuration')
        parser.add_argument('--objective', choices=('field', 'teacher'), default='field')
        parser.add_argument('--ply', help='Stage-1 samples colored by score')
        parser.add_argument('--render-top', type=at_least(0), default=0, help='PPM renders of the top suggestions')
        parser.add_argument('--samples', type=at_least(1), help='Samples per trajectory segment (S)')
        parser.add_argument('--neighbors', type=at_least(0), help='Perturbations per sample (N)')
        parser.add_argument('--top-k', type=at_least(1))
        parser.add_argument('--steps', type=at_least(0), help='Refinement steps')
        parser.add_argument('--step-size', type=positive)
        parser.add_argument('--shift-radius', type=at_least(0.0, float))
        parser.add_argument('--jitter-degrees', type=at_least(0.0, float))
        parser.add_argument('--dedup-eps', type=at_least(0.0, float))

    def run(self, **options):
        form = RunConfigForm.from_sources(
            options['config'],
            samples_per_segment=options['samples'],
            neighbors=options['neighbors'],
            top_k=options['top_k'],
            refine_steps=options['steps'],
            search_step_size=options['step_size'],
            shift_radius=options['shift_radius'],
            jitter_degrees=options['jitter_degrees'],
            dedup_eps=options['dedup_eps'],
        )
        cfg = form.search_config(options['seed'], options['threads'])
        report = viewfinder_service.search(
            options['scene'], options['cameras'], cfg, options['out'], options['ply'], options['render_top'],
            options['objective'], form.intrinsics(), form.effective(),
        )
        best = report.candidates[0]
        self.stdout.write(f"Best suggestion score {best.score:.4f} (stage 1 {best.stage1_score:.4f})")
