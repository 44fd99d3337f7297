import pathlib
import tempfile

import numpy as np
import pandas as pd
from django.test import SimpleTestCase

from modules import experiments, storage
from modules.capsules import HORIZONTAL, VERTICAL
from modules.errors import ConfigError, ContractError
from modules.synthetic import generate_dataset, make_scene
from modules.training import build_model

from .utils import tiny_config


class SweepSettingsTest(SimpleTestCase):
    def test_counts(self):
        config = tiny_config()
        self.assertEqual(
            experiments.sweep_settings(config, 'capsule_types'),
            [{'capsule_types': t} for t in (4, 8, 16, 25)])
        self.assertEqual(len(experiments.sweep_settings(config, 'share_params')),
                         2)
        self.assertEqual(
            len(experiments.sweep_settings(config, 'fusion_mechanism')), 5)

    def test_modalities_axis(self):
        settings = experiments.sweep_settings(tiny_config('vdt'), 'modalities')
        self.assertEqual(len(settings), 4)
        self.assertEqual(settings[0], {'modality_count': 2,
                                       'modalities': ['visible', 'depth']})
        self.assertEqual(settings[-1]['modality_count'], 3)

    def test_every_setting_is_a_valid_config(self):
        for task in ('smm', 'vdt'):
            config = tiny_config(task)
            for axis in experiments.SWEEP_AXES:
                if axis == 'sub_decoders' and task == 'smm':
                    continue
                for overrides in experiments.sweep_settings(config, axis):
                    config.replace(**overrides)

    def test_sub_decoders_needs_saliency(self):
        with self.assertRaises(ConfigError):
            experiments.sweep_settings(tiny_config('smm'), 'sub_decoders')
        self.assertEqual(
            len(experiments.sweep_settings(tiny_config('vdt'), 'sub_decoders')),
            2)

    def test_unknown_axis(self):
        with self.assertRaises(ConfigError):
            experiments.sweep_settings(tiny_config(), 'depth')

    def test_setting_label(self):
        self.assertEqual(experiments.setting_label({'capsule_types': 8}),
                         'capsule_types=8')
        self.assertEqual(
            experiments.setting_label({'modality_count': 2,
                                       'modalities': ['depth', 'event']}),
            'modalities=depth+event')


class SweepTest(SimpleTestCase):
    def test_one_row_per_run(self):
        table = experiments.sweep(tiny_config(repeats=2), 'share_params')
        self.assertEqual(len(table), 4)
        self.assertEqual(list(table.columns),
                         ['axis', 'setting', 'repeat', 'seed', 'final_loss',
                          'miou'])
        self.assertEqual(table['seed'].tolist(), [0, 1, 0, 1])
        self.assertEqual(table['setting'].tolist(),
                         ['share_params=True'] * 2 + ['share_params=False'] * 2)

    def test_workers_do_not_change_results(self):
        config = tiny_config(repeats=1)
        serial = experiments.sweep(config, 'share_params')
        parallel = experiments.sweep(config, 'share_params', workers=2)
        pd.testing.assert_frame_equal(serial, parallel)


class EvaluateTest(SimpleTestCase):
    def test_segmentation(self):
        config = tiny_config(n_scenes=3)
        frame, aggregate, report, predictions = experiments.evaluate(
            build_model(config), config)
        self.assertEqual(list(frame.columns), ['scene', 'mIoU'])
        self.assertEqual(frame['scene'].tolist(), [0, 1, 2])
        self.assertEqual(set(aggregate), {'mIoU', 'mIoU_pixels'})
        self.assertEqual(list(report.columns), ['IoU', 'F1', 'Accuracy'])
        self.assertEqual(report.index[-1], 'mean')
        self.assertEqual(len(predictions), 3)
        self.assertEqual(predictions[0].shape, (8, 8))

    def test_saliency(self):
        config = tiny_config('vdt', image_size=16)
        scenes = generate_dataset('vdt', 2, 16, seed=3)
        frame, aggregate, report, predictions = experiments.evaluate(
            build_model(config), config, scenes)
        self.assertIsNone(report)
        self.assertEqual(set(aggregate),
                         {'S', 'MAE', 'E_adp', 'E_mean', 'F_adp', 'F_mean'})
        for value in aggregate.values():
            self.assertTrue(0.0 <= value <= 1.0)
        self.assertEqual(predictions[0].shape, (16, 16))

    def test_export(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = pathlib.Path(tmp)
            config = tiny_config(n_scenes=2)
            scenes = generate_dataset('smm', 2, 8, seed=0)
            *_, predictions = experiments.evaluate(build_model(config), config,
                                                   scenes)
            experiments.export_predictions(root, config, scenes, predictions)
            np.testing.assert_array_equal(
                storage.read_pgm(root / 'scene_0001.pgm'), predictions[1])
            self.assertTrue((root / 'palette.json').exists())

    def test_export_saliency(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = pathlib.Path(tmp)
            config = tiny_config('vdt', image_size=16)
            scenes = generate_dataset('vdt', 1, 16, seed=0)
            *_, predictions = experiments.evaluate(build_model(config), config,
                                                   scenes)
            experiments.export_predictions(root, config, scenes, predictions)
            np.testing.assert_array_equal(
                storage.read_pgm(root / 'scene_0000.pgm'),
                storage.saliency_to_pgm(predictions[0]))
            self.assertFalse((root / 'palette.json').exists())


class ExplainTest(SimpleTestCase):
    def setUp(self):
        self.config = tiny_config()
        self.model = build_model(self.config)
        self.scene = make_scene('smm', 0, 8, self.config.seed)

    def explain(self, stage=2, position=(1, 0)):
        return experiments.explain(self.model, self.config, self.scene, stage,
                                   position)

    def test_rows_are_simplices(self):
        explanation = self.explain()
        for axis in (HORIZONTAL, VERTICAL):
            raw = np.asarray(explanation['raw'][axis])
            self.assertEqual(raw.shape, (3 * 2, 4))
            np.testing.assert_allclose(raw.sum(axis=1), 1.0, atol=1e-6)
            self.assertTrue((raw >= 0).all())

    def test_records(self):
        explanation = self.explain()
        records = explanation['records']
        self.assertEqual(len(records), 2 * 6 * 4)
        self.assertEqual(explanation['modalities'], ['depth', 'event', 'lidar'])
        self.assertEqual(explanation['position'], [1, 0])
        first = records[0]
        self.assertEqual(set(first), {'stage', 'axis', 'position', 'part_type',
                                      'modality', 'whole_type', 'value'})
        self.assertEqual({r['position'] for r in records
                          if r['axis'] == HORIZONTAL}, {1})
        self.assertEqual({r['position'] for r in records
                          if r['axis'] == VERTICAL}, {0})

    def test_records_reassemble_raw(self):
        explanation = self.explain()
        for axis in (HORIZONTAL, VERTICAL):
            np.testing.assert_array_equal(
                experiments.reassemble(explanation, axis),
                np.asarray(explanation['raw'][axis]))

    def test_split_is_block_mean(self):
        explanation = self.explain()
        for axis in (HORIZONTAL, VERTICAL):
            raw = np.asarray(explanation['raw'][axis])
            for n, name in enumerate(explanation['modalities']):
                np.testing.assert_allclose(
                    explanation['split'][axis][name],
                    raw[2 * n:2 * n + 2].mean(axis=1), atol=1e-12)

    def test_matches_fusion_trace(self):
        explanation = self.explain(position=(0, 1))
        fusion = self.model.fusion_trace(self.scene.inputs())[2]
        np.testing.assert_array_equal(
            np.asarray(explanation['raw'][VERTICAL]),
            fusion.routing_v.coefficients.data[1])

    def test_unfused_stage(self):
        with self.assertRaises(ContractError):
            self.explain(stage=1)

    def test_position_out_of_range(self):
        for position in ((2, 0), (0, 2), (-1, 0)):
            with self.assertRaises(ContractError):
                self.explain(position=position)

    def test_needs_routing_block(self):
        config = tiny_config(fusion_mechanism='addition')
        with self.assertRaises(ContractError):
            experiments.explain(build_model(config), config, self.scene, 2,
                                (0, 0))

    def test_gnuplot_table(self):
        table = experiments.gnuplot_table(self.explain())
        lines = table.strip().splitlines()
        self.assertEqual(len(lines), 1 + 2 * 6 * 4)
        self.assertEqual(lines[0].split(), ['stage', 'axis', 'position',
                                            'part_type', 'modality',
                                            'whole_type', 'value'])
