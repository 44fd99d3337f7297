from modules import storage
from modules.synthetic import dataset_for

from ._common import (PipelineCommand, config_from_options, output_path,
                      write_json)


class Command(PipelineCommand):
    help = ('Generate a synthetic scene set: per-modality tensor dumps, label '
            'maps as PGM and the replayable recipes.')

    def run(self, options):
        config = config_from_options(options)
        scenes = dataset_for(config)
        root = output_path(config) / 'scenes'
        for scene in scenes:
            folder = root / f'scene_{scene.recipe["index"]:04d}'
            for name, values in scene.modalities.items():
                storage.write_tensor(folder / f'{name}.tensor', values.data)
            if config.task == 'smm':
                storage.write_pgm(folder / 'labels.pgm', scene.labels)
            else:
                storage.write_pgm(folder / 'labels.pgm', scene.labels * 255)
        write_json(root / 'recipes.json', [s.recipe for s in scenes])
        self.stdout.write(self.style.SUCCESS(
            f'wrote {len(scenes)} {config.task} scenes to {root}'))
