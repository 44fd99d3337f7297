from modules.experiments import SWEEP_AXES, sweep

from ._common import PipelineCommand, config_from_options, output_path


class Command(PipelineCommand):
    help = ('Matched-budget ablation: train every setting on one axis '
            '--repeats times and write a CSV comparison table.')

    def add_command_arguments(self, parser):
        parser.add_argument('--axis', required=True, choices=SWEEP_AXES)
        parser.add_argument('--workers', type=int, default=1,
                            help='parallel training processes')

    def run(self, options):
        config = config_from_options(options)
        table = sweep(config, options['axis'], workers=options['workers'])
        path = output_path(config) / f'sweep_{options["axis"]}.csv'
        path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False)
        self.stdout.write(table.to_string(index=False))
        self.stdout.write(self.style.SUCCESS(f'{len(table)} runs -> {path}'))
