import math
import pathlib

from modules.experiments import evaluate, export_predictions
from modules.synthetic import generate_dataset
from modules.training import load_model

from ._common import PipelineCommand, write_json


def _clean(value):
    # JSON has no NaN
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


class Command(PipelineCommand):
    help = ('Evaluate a checkpoint on its synthetic scene set and write a '
            'metric report (JSON, or CSV with --csv).')
    config_arguments = False

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True,
                            help='run or checkpoint directory')
        parser.add_argument('--scenes', type=int,
                            help='number of scenes (default: n_scenes of the '
                            'checkpoint config)')
        parser.add_argument('--report', help='report path (default: '
                            'report.json or report.csv next to the checkpoint)')
        parser.add_argument('--csv', action='store_true',
                            help='write per-scene rows as CSV')
        parser.add_argument('--export', help='directory for PGM predictions')

    def run(self, options):
        model, config = load_model(options['checkpoint'])
        count = options['scenes']
        if count is None:
            count = config.n_scenes
        scenes = generate_dataset(config.task, count,
                                  config.resolved_image_size, config.seed)
        per_scene, aggregate, report, predictions = evaluate(model, config,
                                                             scenes)
        root = pathlib.Path(options['checkpoint'])
        if options['csv']:
            path = pathlib.Path(options['report'] or root / 'report.csv')
            per_scene.to_csv(path, index=False)
        else:
            path = pathlib.Path(options['report'] or root / 'report.json')
            payload = {
                'per_image': per_scene.to_dict(orient='records'),
                'aggregate': aggregate,
            }
            if report is not None:
                payload['per_class'] = {
                    name: {k: _clean(v) for k, v in row.items()}
                    for name, row in report.to_dict(orient='index').items()}
            write_json(path, payload)
        if options['export']:
            export_predictions(options['export'], config, scenes, predictions)
        summary = ', '.join(f'{k} {v:.4f}' for k, v in aggregate.items())
        self.stdout.write(self.style.SUCCESS(f'{summary} -> {path}'))
