import numpy as np

from modules import tensor as T
from modules.config import PipelineConfig
from modules.tensor import Parameter


def tiny_config(task='smm', **changes):
    values = dict(seed=0, task=task, channels=4, capsule_types=2,
                  image_size=8, n_scenes=2, epochs=1, batch=2, min_kept=4)
    values.update(changes)
    return PipelineConfig.from_dict(values)


def random_parameter(rng, *shape, scale=1.0):
    return Parameter(rng.normal(0.0, scale, shape), name='p')


def weighted_total(values, rng):
    """Scalar that depends on every entry with a distinct random weight."""
    weights = rng.normal(size=values.shape)
    return T.sum_(values * weights)
