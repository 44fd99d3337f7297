"""Synthetic multi-modal scenes.

Segmentation scenes hold up to three shapes over a background. A shape's
class is two bits: depth shows the first bit, the event sensor the second bit
and all outlines, LiDAR a sparse noisy mix of both, and RGB only a faint noisy
copy. No single modality determines the class.

Saliency scenes hold one salient ellipse seen by visible, depth and thermal
sensors, each hit by a different corruption: low contrast (LI), random noise
(RD) or an occluding patch (II).

A scene is rendered from its recipe alone, so a recipe replays bit-exactly.
"""
import logging
from dataclasses import dataclass

import numpy as np

from modules.config import SMM_PRIMARY, TASK_MODALITIES, TASKS
from modules.errors import ConfigError
from modules.tensor import Tensor

logger = logging.getLogger(__name__)

SMM_MODALITIES = (SMM_PRIMARY,) + TASK_MODALITIES['smm']
VDT_MODALITIES = TASK_MODALITIES['vdt']
CORRUPTIONS = ('LI', 'RD', 'II')
CHANNELS = 3
# class id -> (depth bit, event bit)
CLASS_BITS = {0: (0, 0), 1: (1, 1), 2: (1, 0), 3: (0, 1)}


@dataclass(frozen=True)
class SyntheticScene:
    kind: str
    modalities: dict
    labels: np.ndarray
    recipe: dict

    def inputs(self):
        return dict(self.modalities)


def _shape_mask(shape, size):
    rows, cols = np.mgrid[0:size, 0:size] + 0.5
    if shape['form'] == 'ellipse':
        return (((rows - shape['row']) / shape['radius_r']) ** 2
                + ((cols - shape['col']) / shape['radius_c']) ** 2) <= 1.0
    return ((np.abs(rows - shape['row']) <= shape['radius_r'])
            & (np.abs(cols - shape['col']) <= shape['radius_c']))


def _outline(mask):
    padded = np.pad(mask, 1, mode='edge')
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def smm_recipe(rng, size, index, seed):
    shapes = []
    for _ in range(int(rng.integers(1, 4))):
        shapes.append({
            'form': str(rng.choice(['rect', 'ellipse'])),
            'row': float(rng.uniform(0.2, 0.8) * size),
            'col': float(rng.uniform(0.2, 0.8) * size),
            'radius_r': float(rng.uniform(0.15, 0.3) * size),
            'radius_c': float(rng.uniform(0.15, 0.3) * size),
            'class_id': int(rng.integers(1, 4)),
        })
    return {'kind': 'smm', 'size': size, 'seed': seed, 'index': index,
            'noise_seed': int(rng.integers(2 ** 31)), 'shapes': shapes}


def render_smm_labels(recipe):
    size = recipe['size']
    labels = np.zeros((size, size), dtype=np.int64)
    for shape in recipe['shapes']:
        labels[_shape_mask(shape, size)] = shape['class_id']
    return labels


def render_smm(recipe):
    size = recipe['size']
    rng = np.random.default_rng(recipe['noise_seed'])
    labels = render_smm_labels(recipe)
    bits = np.array([CLASS_BITS[k] for k in range(4)], dtype=np.float64)
    depth_bit, event_bit = bits[labels, 0], bits[labels, 1]
    outline = np.zeros((size, size), dtype=bool)
    for shape in recipe['shapes']:
        outline |= _outline(_shape_mask(shape, size))
    ramp = np.linspace(0.0, 0.2, size)[None, :].repeat(size, axis=0)

    def noise(scale):
        return rng.normal(0.0, scale, (size, size))

    rgb = np.stack([0.3 * depth_bit + noise(0.3), 0.3 * event_bit + noise(0.3),
                    noise(0.3)], axis=2)
    depth = np.stack([depth_bit + noise(0.1), ramp, noise(0.1)], axis=2)
    event = np.stack([event_bit + noise(0.1), outline.astype(np.float64),
                      noise(0.1)], axis=2)
    hits = (rng.uniform(size=(size, size)) < 0.3).astype(np.float64)
    lidar = np.stack([hits * 0.5 * (depth_bit + event_bit) + noise(0.2),
                      hits, hits * noise(0.5)], axis=2)
    modalities = {SMM_PRIMARY: rgb, 'depth': depth, 'event': event,
                  'lidar': lidar}
    return {name: Tensor(modalities[name]) for name in SMM_MODALITIES}, labels


def vdt_recipe(rng, size, index, seed):
    corruption = [str(c) for c in rng.permutation(CORRUPTIONS)]
    return {
        'kind': 'vdt', 'size': size, 'seed': seed, 'index': index,
        'noise_seed': int(rng.integers(2 ** 31)),
        'blob': {'form': 'ellipse',
                 'row': float(rng.uniform(0.3, 0.7) * size),
                 'col': float(rng.uniform(0.3, 0.7) * size),
                 'radius_r': float(rng.uniform(0.15, 0.3) * size),
                 'radius_c': float(rng.uniform(0.15, 0.3) * size)},
        'corruption': dict(zip(VDT_MODALITIES, corruption)),
        'occluder': {'row': float(rng.uniform(0.2, 0.8) * size),
                     'col': float(rng.uniform(0.2, 0.8) * size),
                     'half': float(rng.uniform(0.1, 0.2) * size)},
    }


def render_vdt_labels(recipe):
    return _shape_mask(recipe['blob'], recipe['size']).astype(np.int64)


def _corrupt(image, mode, recipe, rng):
    size = recipe['size']
    if mode == 'LI':
        return 0.2 * image + 0.4
    if mode == 'RD':
        return image + rng.normal(0.0, 0.5, image.shape)
    occluder = recipe['occluder']
    rows, cols = np.mgrid[0:size, 0:size] + 0.5
    patch = ((np.abs(rows - occluder['row']) <= occluder['half'])
             & (np.abs(cols - occluder['col']) <= occluder['half']))
    occluded = image.copy()
    occluded[patch] = image[~patch].mean(axis=0) if (~patch).any() else 0.0
    return occluded


def render_vdt(recipe):
    size = recipe['size']
    rng = np.random.default_rng(recipe['noise_seed'])
    mask = render_vdt_labels(recipe).astype(np.float64)
    texture = rng.normal(0.0, 0.05, (size, size, CHANNELS))
    clean = {
        'visible': mask[:, :, None] * np.array([0.9, 0.6, 0.2])
        + (1 - mask[:, :, None]) * np.array([0.2, 0.4, 0.5]) + texture,
        'depth': np.stack([0.8 * mask + 0.1, mask,
                           np.linspace(0, 0.3, size)[:, None].repeat(size, 1)],
                          axis=2),
        'thermal': np.stack([mask, 0.5 * mask + 0.2, 0.3 * mask], axis=2),
    }
    modalities = {}
    for name in VDT_MODALITIES:
        image = _corrupt(clean[name], recipe['corruption'][name], recipe, rng)
        modalities[name] = Tensor(image)
    return modalities, render_vdt_labels(recipe)


def render(recipe):
    """Rebuild a scene from its recipe."""
    renderer = render_smm if recipe['kind'] == 'smm' else render_vdt
    modalities, labels = renderer(recipe)
    return SyntheticScene(recipe['kind'], modalities, labels, recipe)


def make_scene(kind, index, size, seed):
    """Scene number ``index`` of the dataset drawn with ``seed``."""
    if not isinstance(index, int) or index < 0:
        raise ConfigError(f'scene index must be non-negative, got {index!r}')
    make_recipe = smm_recipe if kind == 'smm' else vdt_recipe
    rng = np.random.default_rng([seed, index])
    return render(make_recipe(rng, size, index, seed))


def generate_dataset(kind, n, size, seed):
    """``n`` scenes of ``size`` x ``size`` pixels.

    Parameters
    ----------
    kind: {'smm', 'vdt'}

    n, size: int
        Scene count and side length; both must be positive.

    seed: int
        Scene ``i`` draws its recipe from a generator seeded with
        ``[seed, i]``.
    """
    if kind not in TASKS:
        raise ConfigError(f'unknown scene kind {kind!r}')
    if not isinstance(n, int) or n <= 0:
        raise ConfigError(f'scene count must be positive, got {n!r}')
    if not isinstance(size, int) or size <= 0:
        raise ConfigError(f'scene size must be positive, got {size!r}')
    scenes = [make_scene(kind, index, size, seed) for index in range(n)]
    logger.info('generated %d %s scenes of size %d', n, kind, size)
    return scenes


def dataset_for(config):
    return generate_dataset(config.task, config.n_scenes,
                            config.resolved_image_size, config.seed)


def pixel_table(scenes, modalities):
    """Stack per-pixel modality values into (pixels, features) with labels;
    the input of a linear classifier."""
    features = np.concatenate([
        np.concatenate([s.modalities[m].data for m in modalities],
                       axis=2).reshape(-1, len(modalities) * CHANNELS)
        for s in scenes])
    labels = np.concatenate([s.labels.reshape(-1) for s in scenes])
    return features, labels
