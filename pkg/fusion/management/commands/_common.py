"""Shared plumbing for the pipeline management commands."""
import dataclasses
import json
import pathlib

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from modules.config import PipelineConfig
from modules.errors import ConfigError, PWRFError

# fields whose default is None need an explicit argument type
OPTIONAL_TYPES = {'whole_types': int, 'image_size': int,
                  'target_metric': float}
BOOLEAN_WORDS = {'true': True, 'yes': True, '1': True,
                 'false': False, 'no': False, '0': False}


def boolean(text):
    try:
        return BOOLEAN_WORDS[text.lower()]
    except KeyError:
        raise ValueError(f'not a boolean: {text!r}') from None


def add_config_arguments(parser):
    """One flag per PipelineConfig field plus ``--config`` for a JSON file."""
    parser.add_argument('--config', help='JSON file of PipelineConfig fields; '
                        'flags override its values')
    for field in dataclasses.fields(PipelineConfig):
        if field.name == 'output_dir':
            parser.add_argument('--out', dest='output_dir',
                                help='output directory')
            continue
        flag = '--' + field.name.replace('_', '-')
        if field.name in ('modalities', 'lambda_schedule'):
            kind = str if field.name == 'modalities' else float
            parser.add_argument(flag, dest=field.name, nargs='+', type=kind)
        elif isinstance(field.default, bool):
            parser.add_argument(flag, dest=field.name, type=boolean,
                                metavar='{true,false}')
        elif field.name in OPTIONAL_TYPES:
            parser.add_argument(flag, dest=field.name,
                                type=OPTIONAL_TYPES[field.name])
        elif field.default is dataclasses.MISSING:
            parser.add_argument(flag, dest=field.name, type=int)
        else:
            parser.add_argument(flag, dest=field.name,
                                type=type(field.default))


def config_from_options(options, **overrides):
    values = {}
    if options.get('config'):
        path = pathlib.Path(options['config'])
        try:
            values = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f'cannot read config {path}: {exc}') from exc
    for field in dataclasses.fields(PipelineConfig):
        if options.get(field.name) is not None:
            values[field.name] = options[field.name]
    values.update(overrides)
    return PipelineConfig.from_dict(values)


def output_path(config):
    path = pathlib.Path(config.output_dir)
    if not path.is_absolute():
        path = pathlib.Path(settings.PWRF['OUTPUT_ROOT']) / path
    return path


def write_json(path, payload):
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n')


class PipelineCommand(BaseCommand):
    """Base class: subclasses implement ``run(options)``.

    Library errors leave the command as a single ``<CODE>: <message>`` line
    with exit status 2.
    """

    config_arguments = True

    def add_arguments(self, parser):
        if self.config_arguments:
            add_config_arguments(parser)
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def run(self, options):
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            self.run(options)
        except PWRFError as exc:
            raise CommandError(f'{exc.code}: {exc}', returncode=2) from exc
