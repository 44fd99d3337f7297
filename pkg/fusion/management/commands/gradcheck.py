import dataclasses
import logging

from django.conf import settings
from django.core.management.base import CommandError

from modules.config import PipelineConfig
from modules.synthetic import make_scene
from modules.tensor import grad_check
from modules.training import build_model, scene_loss

from ._common import PipelineCommand, config_from_options

logger = logging.getLogger(__name__)

# a tiny model keeps one finite-difference pass in seconds
TINY = {'channels': 4, 'capsule_types': 2}
# below 16 pixels the deepest saliency stage is 1x1, where every normalized
# map equals its offset and sits on the ReLU kink
TINY_SIZE = {'smm': 8, 'vdt': 16}


def shrink(config):
    """Swap untouched defaults for the tiny model's sizes."""
    defaults = {f.name: f.default for f in dataclasses.fields(PipelineConfig)}
    changes = {k: v for k, v in TINY.items()
               if getattr(config, k) == defaults[k]}
    if config.image_size is None:
        changes['image_size'] = TINY_SIZE[config.task]
    return config.replace(**changes)


class Command(PipelineCommand):
    help = ('Compare analytic gradients of the full forward pass and loss '
            'with central differences on one synthetic scene.')

    def add_command_arguments(self, parser):
        parser.add_argument('--eps', type=float, default=1e-5)
        parser.add_argument('--max-coords', type=int, default=2,
                            help='coordinates checked per parameter')
        parser.add_argument('--tolerance', type=float,
                            help='maximum relative error (default: '
                            "settings.PWRF['GRADCHECK_TOLERANCE'])")

    def run(self, options):
        # hard-example selection is piecewise constant in the logits
        config = shrink(config_from_options(options, keep_fraction=1.0))
        model = build_model(config)
        scene = make_scene(config.task, 0, config.resolved_image_size,
                           config.seed)
        error = grad_check(lambda: scene_loss(model, scene, config)[0],
                           model.parameters(), eps=options['eps'],
                           max_coords=options['max_coords'], seed=config.seed)
        tolerance = options['tolerance'] or \
            settings.PWRF['GRADCHECK_TOLERANCE']
        logger.info('%s gradient check: max relative error %.3e', config.task,
                    error)
        if error >= tolerance:
            raise CommandError(
                f'E_GRADCHECK: max relative error {error:.3e} exceeds '
                f'{tolerance:.1e}', returncode=2)
        self.stdout.write(self.style.SUCCESS(
            f'{config.task}: max relative error {error:.3e} < {tolerance:.1e}'))
