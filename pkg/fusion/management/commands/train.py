from modules.training import metric_name, train

from ._common import PipelineCommand, config_from_options, output_path


class Command(PipelineCommand):
    help = ('Train a model on its synthetic scene set; writes log.csv and a '
            'checkpoint directory under --out.')

    def run(self, options):
        config = config_from_options(options)
        result = train(config, output_dir=output_path(config))
        last = result.log.iloc[-1]
        metric = metric_name(config)
        self.stdout.write(self.style.SUCCESS(
            f'trained {len(result.log)} epochs: loss {last["loss"]:.6f} '
            f'{metric} {last[metric]:.4f} -> {result.output_dir}'))
