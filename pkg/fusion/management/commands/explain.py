import pathlib

from modules.experiments import explain, gnuplot_table
from modules.synthetic import make_scene
from modules.training import load_model

from ._common import PipelineCommand, write_json


class Command(PipelineCommand):
    help = ('Export the horizontal and vertical routing coefficients of one '
            'pixel of one scene at one fused stage.')
    config_arguments = False

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True,
                            help='run or checkpoint directory')
        parser.add_argument('--scene', type=int, default=0,
                            help='scene index in the checkpoint dataset')
        parser.add_argument('--stage', type=int,
                            help='fused backbone stage (default: the first)')
        parser.add_argument('--row', type=int, default=0)
        parser.add_argument('--col', type=int, default=0)
        parser.add_argument('--out', help='JSON path (default: '
                            'explain.json next to the checkpoint)')
        parser.add_argument('--table', help='also write a gnuplot-ready table')

    def run(self, options):
        model, config = load_model(options['checkpoint'])
        scene = make_scene(config.task, options['scene'],
                           config.resolved_image_size, config.seed)
        stage = options['stage']
        if stage is None:
            stage = model.fused_stages[0]
        explanation = explain(model, config, scene, stage,
                              (options['row'], options['col']))
        path = pathlib.Path(options['out'] or
                            pathlib.Path(options['checkpoint']) / 'explain.json')
        write_json(path, explanation)
        if options['table']:
            pathlib.Path(options['table']).write_text(
                gnuplot_table(explanation))
        self.stdout.write(self.style.SUCCESS(
            f'{len(explanation["records"])} coefficients -> {path}'))
