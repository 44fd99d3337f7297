"""Committed reference files compared byte for byte.

The files under ``golden/linear`` and ``golden/saliency.pgm`` hold exactly
representable values written by hand. The model outputs are written by the
library itself: run with PWRF_UPDATE_GOLDEN=1 to (re)generate them, commit
the result, and every later run must reproduce the bytes.
"""
import os
import pathlib
import tempfile

import numpy as np
from django.test import SimpleTestCase

from modules import storage
from modules import tensor as T
from modules.layers import Linear
from modules.synthetic import make_scene
from modules.training import build_model

from .utils import tiny_config

GOLDEN = pathlib.Path(__file__).resolve().parent / 'golden'
UPDATE = os.environ.get('PWRF_UPDATE_GOLDEN') == '1'

WEIGHT = np.array([[1.0, 2.0], [0.5, -1.0]])
BIAS = np.array([0.25, -2.5])


class HandWrittenFilesTest(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_tensor_payload(self):
        np.testing.assert_array_equal(
            storage.read_tensor(GOLDEN / 'linear' / 'weight.tensor'), WEIGHT)
        storage.write_tensor(self.root / 'bias.tensor', BIAS)
        self.assertEqual((self.root / 'bias.tensor').read_bytes(),
                         (GOLDEN / 'linear' / 'bias.tensor').read_bytes())

    def test_checkpoint_bytes(self):
        storage.save_checkpoint(self.root, {},
                                {'weight': WEIGHT, 'bias': BIAS})
        for name in ('manifest.json', 'weight.tensor', 'bias.tensor'):
            self.assertEqual((self.root / name).read_bytes(),
                             (GOLDEN / 'linear' / name).read_bytes(),
                             msg=name)

    def test_checkpoint_forward(self):
        layer = Linear(np.random.default_rng(0), 2, 2)
        _, state = storage.load_checkpoint(GOLDEN / 'linear')
        layer.load_state(state)
        # 2*1 + 4*0.5 + 0.25 and 2*2 + 4*-1 - 2.5
        np.testing.assert_array_equal(layer(np.array([[2.0, 4.0]])).data,
                                      [[4.25, -2.5]])

    def test_saliency_map(self):
        probabilities = np.array([[0.0, 0.5, 1.0], [1.0, 0.0, 0.25]])
        image = storage.saliency_to_pgm(probabilities)
        np.testing.assert_array_equal(
            storage.read_pgm(GOLDEN / 'saliency.pgm'), image)
        storage.write_pgm(self.root / 'map.pgm', image)
        self.assertEqual((self.root / 'map.pgm').read_bytes(),
                         (GOLDEN / 'saliency.pgm').read_bytes())

    def test_ordered_sum_of_stored_weights(self):
        weight = storage.read_tensor(GOLDEN / 'linear' / 'weight.tensor')
        self.assertEqual(T.ordered_sum(weight), 2.5)
        np.testing.assert_array_equal(T.ordered_sum(weight, axis=0),
                                      [1.5, 1.0])


class ModelOutputTest(SimpleTestCase):
    """Untrained models are a pure function of the seed, so their outputs on a
    fixed scene pin down every kernel of the forward pass."""

    def check_outputs(self, task, size):
        config = tiny_config(task, image_size=size)
        scene = make_scene(task, 0, size, config.seed)
        with T.no_grad():
            output = build_model(config)(scene.inputs())
        values = (np.stack([m.data for m in output.maps]) if task == 'vdt'
                  else output.data)
        path = GOLDEN / f'{task}_outputs.tensor'
        if UPDATE:
            storage.write_tensor(path, values)
        if not path.exists():
            self.skipTest(f'{path.name} missing; run with PWRF_UPDATE_GOLDEN=1')
        with tempfile.TemporaryDirectory() as tmp:
            fresh = pathlib.Path(tmp) / path.name
            storage.write_tensor(fresh, values)
            self.assertEqual(fresh.read_bytes(), path.read_bytes())

    def test_segmentation_outputs(self):
        self.check_outputs('smm', 8)

    def test_saliency_outputs(self):
        self.check_outputs('vdt', 16)
