import json

from viewfinder.formats import write_json
from viewfinder.services import viewfinder_service

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Score every camera with a fitted field or with the procedural teacher'

    def add_command_arguments(self, parser):
        parser.add_argument('--scene', required=True)
        parser.add_argument('--cameras', required=True)
        parser.add_argument('--source', choices=('field', 'procedural'), default='field')
        parser.add_argument('--out', help='JSON list of scores (printed when omitted)')

    def run(self, **options):
        scores = viewfinder_service.score_views(
            options['scene'], options['cameras'], options['source'], options['threads'])
        if options['out']:
            write_json({'seed': options['seed'], 'source': options['source'], 'scores': scores}, options['out'])
        else:
            self.stdout.write(json.dumps(scores))
