"""Toy-scale training runs. Minutes each; set PWRF_SLOW_TESTS=1 to run."""
import os
import pathlib
import tempfile
import time
import unittest

import numpy as np
from django.test import SimpleTestCase
from sklearn.linear_model import LogisticRegression

from modules import experiments
from modules.capsules import HORIZONTAL, VERTICAL
from modules.config import PipelineConfig
from modules.synthetic import (SMM_MODALITIES, dataset_for, make_scene,
                               pixel_table)
from modules.training import load_model, train

SLOW = os.environ.get('PWRF_SLOW_TESTS') == '1'
# matched budget for the paired ablation runs
ABLATION = dict(channels=16, n_scenes=16, epochs=40, batch=4,
                learning_rate=3e-3, repeats=3)


def majority(wins):
    return sum(wins) * 2 > len(wins)


@unittest.skipUnless(SLOW, 'set PWRF_SLOW_TESTS=1 for toy training runs')
class OverfitTest(SimpleTestCase):
    def timed_train(self, config):
        start = time.perf_counter()
        result = train(config)
        return result, time.perf_counter() - start

    def test_segmentation(self):
        config = PipelineConfig(seed=0, task='smm', n_scenes=64, image_size=16,
                                capsule_types=8, channels=32, epochs=200,
                                target_metric=0.95).validate()
        result, seconds = self.timed_train(config)
        self.assertLess(seconds, 600.0, msg=result.log.to_string())
        self.assertLessEqual(len(result.log), 200)
        _, aggregate, _, _ = experiments.evaluate(result.model, config)
        self.assertGreaterEqual(aggregate['mIoU'], 0.90)

    def test_saliency(self):
        config = PipelineConfig(seed=0, task='vdt', n_scenes=64, image_size=32,
                                channels=16, learning_rate=3e-3, epochs=300,
                                target_metric=0.04).validate()
        result, seconds = self.timed_train(config)
        self.assertLess(seconds, 900.0, msg=result.log.to_string())
        self.assertLessEqual(len(result.log), 300)
        _, aggregate, _, _ = experiments.evaluate(result.model, config)
        self.assertLess(aggregate['MAE'], 0.05)
        self.assertGreater(aggregate['S'], 0.85)

    def test_fused_pipeline_beats_single_modality_classifiers(self):
        config = PipelineConfig(seed=0, task='smm', n_scenes=8, image_size=16,
                                channels=16, learning_rate=3e-3, epochs=150,
                                batch=4, target_metric=0.95).validate()
        scenes = dataset_for(config)
        result = train(config, scenes)
        *_, predictions = experiments.evaluate(result.model, config, scenes)
        fused = np.mean(np.concatenate(
            [(p == s.labels).ravel() for p, s in zip(predictions, scenes)]))
        for name in SMM_MODALITIES:
            features, labels = pixel_table(scenes, (name,))
            linear = LogisticRegression(max_iter=2000).fit(features, labels)
            self.assertLess(linear.score(features, labels), fused, msg=name)


@unittest.skipUnless(SLOW, 'set PWRF_SLOW_TESTS=1 for toy training runs')
class AblationTrendTest(SimpleTestCase):
    def test_routing_beats_concatenation(self):
        base = PipelineConfig(seed=0, task='vdt', image_size=32,
                              **ABLATION).validate()
        table = experiments.sweep(base, 'fusion_mechanism')
        by_seed = table.pivot(index='seed', columns='setting',
                              values='final_loss')
        wins = (by_seed['fusion_mechanism=pwrf']
                < by_seed['fusion_mechanism=concatenation']).tolist()
        self.assertTrue(majority(wins), msg=by_seed.to_string())

    def test_three_modalities_beat_pairs(self):
        base = PipelineConfig(seed=0, task='smm', image_size=16,
                              **ABLATION).validate()
        table = experiments.sweep(base, 'modalities')
        by_seed = table.pivot(index='seed', columns='setting', values='miou')
        full = 'modalities=depth+event+lidar'
        pairs = [c for c in by_seed.columns if c != full]
        wins = [(by_seed.loc[seed, full] > by_seed.loc[seed, pairs]).all()
                for seed in by_seed.index]
        self.assertTrue(majority(wins), msg=by_seed.to_string())

    def test_eight_capsule_types_rank_high(self):
        base = PipelineConfig(seed=0, task='smm', image_size=16,
                              **ABLATION).validate()
        table = experiments.sweep(base, 'capsule_types')
        mean = table.groupby('setting')['miou'].mean().sort_values(
            ascending=False)
        self.assertIn('capsule_types=8', mean.index[:2].tolist(),
                      msg=mean.to_string())

    def test_two_sub_decoders_fit_better(self):
        base = PipelineConfig(seed=0, task='vdt', image_size=32,
                              **ABLATION).validate()
        table = experiments.sweep(base, 'sub_decoders')
        by_seed = table.pivot(index='seed', columns='setting',
                              values='final_loss')
        wins = (by_seed['sub_decoders=2'] <= by_seed['sub_decoders=1']).tolist()
        self.assertTrue(majority(wins), msg=by_seed.to_string())


@unittest.skipUnless(SLOW, 'set PWRF_SLOW_TESTS=1 for toy training runs')
class TrainedCheckpointTest(SimpleTestCase):
    def test_deterministic_runs(self):
        config = PipelineConfig(seed=3, task='smm', n_scenes=16, image_size=16,
                                channels=16, epochs=10).validate()
        with tempfile.TemporaryDirectory() as tmp:
            root = pathlib.Path(tmp)
            train(config, output_dir=root / 'a')
            train(config, output_dir=root / 'b')
            files = sorted(p.relative_to(root / 'a')
                           for p in (root / 'a').rglob('*') if p.is_file())
            self.assertTrue(files)
            for name in files:
                self.assertEqual((root / 'a' / name).read_bytes(),
                                 (root / 'b' / name).read_bytes(),
                                 msg=str(name))

    def test_explain_trained_model(self):
        config = PipelineConfig(seed=0, task='smm', n_scenes=16, image_size=16,
                                channels=16, epochs=20).validate()
        with tempfile.TemporaryDirectory() as tmp:
            train(config, output_dir=tmp)
            model, config = load_model(tmp)
            scene = make_scene('smm', 0, 16, config.seed)
            explanation = experiments.explain(model, config, scene, 2, (3, 1))
        for axis in (HORIZONTAL, VERTICAL):
            raw = np.asarray(explanation['raw'][axis])
            np.testing.assert_allclose(raw.sum(axis=1), 1.0, atol=1e-6)
            np.testing.assert_array_equal(
                experiments.reassemble(explanation, axis), raw)
