import json
import pathlib
import tempfile

import numpy as np
from django.test import SimpleTestCase

from modules import storage
from modules.errors import CheckpointError, ContractError


class StorageTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()


class TensorFileTest(StorageTestCase):
    def test_round_trip(self):
        values = np.random.default_rng(0).normal(size=(2, 3, 4))
        storage.write_tensor(self.root / 'a.tensor', values)
        np.testing.assert_array_equal(storage.read_tensor(self.root / 'a.tensor'),
                                      values)

    def test_layout(self):
        storage.write_tensor(self.root / 'a.tensor', np.array([[1.0, 2.0]]))
        raw = (self.root / 'a.tensor').read_bytes()
        header, _, payload = raw.partition(b'\n')
        self.assertEqual(json.loads(header), {'shape': [1, 2]})
        self.assertEqual(payload, np.array([1.0, 2.0], dtype='<f8').tobytes())

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            storage.read_tensor(self.root / 'absent.tensor')

    def test_truncated_payload(self):
        path = self.root / 'a.tensor'
        storage.write_tensor(path, np.ones((4, 4)))
        path.write_bytes(path.read_bytes()[:-8])
        with self.assertRaises(CheckpointError):
            storage.read_tensor(path)

    def test_malformed_header(self):
        path = self.root / 'a.tensor'
        path.write_bytes(b'{"shape": oops}\n' + bytes(8))
        with self.assertRaises(CheckpointError):
            storage.read_tensor(path)
        path.write_bytes(b'no newline at all')
        with self.assertRaises(CheckpointError):
            storage.read_tensor(path)


class CheckpointTest(StorageTestCase):
    def test_round_trip(self):
        state = {'a.weight': np.arange(6.0).reshape(2, 3),
                 'a.bias': np.zeros(3)}
        storage.save_checkpoint(self.root / 'ckpt', {'seed': 1}, state)
        config, loaded = storage.load_checkpoint(self.root / 'ckpt')
        self.assertEqual(config, {'seed': 1})
        self.assertEqual(list(loaded), ['a.weight', 'a.bias'])
        for name in state:
            np.testing.assert_array_equal(loaded[name], state[name])

    def test_missing_manifest(self):
        with self.assertRaises(CheckpointError):
            storage.load_checkpoint(self.root)

    def test_shape_disagrees_with_manifest(self):
        storage.save_checkpoint(self.root, {}, {'w': np.zeros((2, 2))})
        storage.write_tensor(self.root / 'w.tensor', np.zeros(4))
        with self.assertRaises(CheckpointError):
            storage.load_checkpoint(self.root)


class PGMTest(StorageTestCase):
    def test_round_trip(self):
        image = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
        storage.write_pgm(self.root / 'm.pgm', image)
        raw = (self.root / 'm.pgm').read_bytes()
        self.assertTrue(raw.startswith(b'P5\n4 3\n255\n'))
        np.testing.assert_array_equal(storage.read_pgm(self.root / 'm.pgm'),
                                      image)

    def test_rejects_bad_images(self):
        with self.assertRaises(ContractError):
            storage.write_pgm(self.root / 'm.pgm', np.zeros((2, 2, 3)))
        with self.assertRaises(ContractError):
            storage.write_pgm(self.root / 'm.pgm', np.full((2, 2), 256))

    def test_rejects_other_formats(self):
        (self.root / 'm.pgm').write_bytes(b'P2\n1 1\n255\n0')
        with self.assertRaises(ContractError):
            storage.read_pgm(self.root / 'm.pgm')

    def test_saliency_quantization(self):
        np.testing.assert_array_equal(
            storage.saliency_to_pgm(np.array([[-0.5, 0.0, 0.5, 1.0, 2.0]])),
            [[0, 0, 128, 255, 255]])

    def test_palette(self):
        storage.write_palette(self.root / 'palette.json', 4)
        palette = json.loads((self.root / 'palette.json').read_text())
        self.assertEqual(sorted(palette), ['0', '1', '2', '3'])
        self.assertEqual(palette['0'], [0, 0, 0])
