import numpy as np
from django.test import SimpleTestCase

from modules import baselines
from modules.capsules import CAPSULE, ModalityBundle, PWRFusion
from modules.config import FUSION_MECHANISMS
from modules.errors import ContractError
from modules.tensor import Tensor, backward

from .utils import tiny_config, weighted_total


def bundle(rng, count=3, size=3, channels=4):
    names = ('depth', 'event', 'lidar')[:count]
    return ModalityBundle(names, [Tensor(rng.normal(size=(size, size, channels)))
                                  for _ in names])


class BuildFusionTest(SimpleTestCase):
    def test_every_mechanism_keeps_the_output_shapes(self):
        for mechanism in FUSION_MECHANISMS:
            config = tiny_config(fusion_mechanism=mechanism)
            rng = np.random.default_rng(0)
            block = baselines.build_fusion(rng, 4, 3, 3, config)
            out = block(bundle(rng))
            self.assertEqual(out.shared.grid.shape, (3, 3, 4, CAPSULE),
                             msg=mechanism)
            self.assertEqual(len(out.specifics), 3)
            for specific in out.specifics:
                self.assertEqual(specific.shape, (3, 3, 2 * CAPSULE))
            self.assertEqual(out.merged_specific.shape, (3, 3, 4))
            self.assertEqual(out.modalities, ('depth', 'event', 'lidar'))

    def test_pwrf_is_the_capsule_block(self):
        block = baselines.build_fusion(np.random.default_rng(0), 4, 3, 3,
                                       tiny_config())
        self.assertIsInstance(block, PWRFusion)

    def test_activations_in_unit_interval(self):
        for mechanism in baselines.MECHANISMS:
            config = tiny_config(fusion_mechanism=mechanism)
            rng = np.random.default_rng(1)
            out = baselines.build_fusion(rng, 4, 3, 3, config)(bundle(rng))
            activations = out.shared.grid.data[:, :, :, -1]
            self.assertTrue(((activations >= 0) & (activations <= 1)).all(),
                            msg=mechanism)

    def test_routing_free_blocks_leave_coefficients_empty(self):
        for mechanism in ('addition', 'concatenation', 'attention'):
            rng = np.random.default_rng(0)
            out = baselines.build_fusion(
                rng, 4, 3, 3, tiny_config(fusion_mechanism=mechanism))(
                    bundle(rng))
            self.assertEqual(out.coefficients_h, [])
            self.assertIsNone(out.routing_h)

    def test_wrong_modality_count(self):
        for mechanism in baselines.MECHANISMS:
            rng = np.random.default_rng(0)
            block = baselines.build_fusion(
                rng, 4, 3, 3, tiny_config(fusion_mechanism=mechanism))
            with self.assertRaises(ContractError):
                block(bundle(rng, count=2))


class AdditionFusionTest(SimpleTestCase):
    def test_combine_sums(self):
        rng = np.random.default_rng(0)
        block = baselines.AdditionFusion(rng, 4, tiny_config())
        features = list(bundle(rng).features)
        np.testing.assert_allclose(
            block.combine(features).data,
            sum(f.data for f in features))


class AttentionFusionTest(SimpleTestCase):
    def test_identical_modalities_return_their_value(self):
        rng = np.random.default_rng(0)
        block = baselines.AttentionFusion(rng, 4, tiny_config())
        x = Tensor(rng.normal(size=(2, 2, 4)))
        out = block.combine([x, x, x])
        np.testing.assert_allclose(out.data, block.value(x).data, atol=1e-12)

    def test_weights_form_a_simplex(self):
        rng = np.random.default_rng(2)
        block = baselines.AttentionFusion(rng, 4, tiny_config())
        features = list(bundle(rng, size=2).features)
        values = [block.value(f).data for f in features]
        out = block.combine(features).data
        # each output lies in the per-pixel convex hull of the values
        low = np.min(values, axis=0)
        high = np.max(values, axis=0)
        self.assertTrue((out >= low - 1e-12).all() and (out <= high + 1e-12).all())


class FullResolutionRoutingTest(SimpleTestCase):
    def test_gradients_reach_every_parameter(self):
        rng = np.random.default_rng(0)
        block = baselines.FullResolutionRouting(
            rng, 4, tiny_config(fusion_mechanism='em_routing'))
        out = block(bundle(rng, size=2))
        backward(weighted_total(out.merged_specific, rng)
                 + weighted_total(out.shared.grid, rng))
        for p in block.parameters():
            self.assertTrue(np.isfinite(p.grad).all())
        self.assertGreater(np.abs(block.transforms.grad).sum(), 0.0)

    def test_share_params_ties_modalities(self):
        sizes = {}
        for share in (True, False):
            config = tiny_config(fusion_mechanism='em_routing',
                                 share_params=share)
            rng = np.random.default_rng(0)
            block = baselines.FullResolutionRouting(rng, 4, config)
            self.assertEqual(block.primary[0] is block.primary[2], share)
            self.assertEqual(block.vote_transforms().shape, (6, 4, 4, 4))
            out = block(bundle(rng, size=2))
            self.assertEqual(out.shared.grid.shape, (2, 2, 4, CAPSULE))
            sizes[share] = sum(p.data.size for p in block.parameters())
        # two primary layers of 4 * 32 + 32 + 4 * 2 + 2 weights, and two
        # blocks of 2 x 4 transforms
        self.assertEqual(sizes[False] - sizes[True], 2 * 170 + 2 * 2 * 4 * 16)


class MergeFlagTest(SimpleTestCase):
    def test_blocks_without_merge(self):
        for mechanism in FUSION_MECHANISMS:
            config = tiny_config(fusion_mechanism=mechanism)
            rng = np.random.default_rng(0)
            block = baselines.build_fusion(rng, 4, 3, 3, config, merge=False)
            self.assertIsNone(block.merge, msg=mechanism)
            self.assertFalse([name for name, _ in block.named_parameters()
                              if name.startswith('merge')], msg=mechanism)
            out = block(bundle(rng))
            self.assertIsNone(out.merged_specific)
            self.assertEqual(len(out.specifics), 3)
