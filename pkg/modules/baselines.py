"""Fusion blocks that replace PWR fusion in the fusion-mechanism ablation.

Each block takes the same ``ModalityBundle`` and returns the same
``FusionOutputs`` shapes as ``PWRFusion.fuse``, so the task heads run
unchanged on top of it. Blocks without routing leave the coefficient fields
empty.
"""
import numpy as np

from modules import tensor as T
from modules.capsules import (CAPSULE, POSE, CapsuleField, FusionOutputs,
                              PrimaryCapsules, PWRFusion,
                              coefficient_blocks,
                              merge_specifics, route_capsules)
from modules.errors import ContractError
from modules.layers import ConcatProject, Linear, Module
from modules.tensor import Parameter


def as_capsules(values, types):
    """Reshape a (H, W, types*17) map into a capsule field whose activation
    slice is squashed into (0, 1)."""
    height, width, _ = values.shape
    grid = T.reshape(values, (height, width, types, CAPSULE))
    pose = grid[:, :, :, :POSE]
    activation = T.sigmoid(grid[:, :, :, POSE:])
    return CapsuleField(T.concat([pose, activation], axis=3))


class ProjectedFusion(Module):
    """Combine modalities into one map, then read shared capsules off the
    combination and modal-specific maps off each modality."""

    def __init__(self, rng, channels, config, merge=True):
        count = config.modality_count
        self.count = count
        self.part_types = config.capsule_types
        self.whole_types = config.whole_type_count
        self.to_shared = Linear(rng, channels, self.whole_types * CAPSULE)
        self.to_specific = [Linear(rng, channels, self.part_types * CAPSULE)
                            for _ in range(count)]
        self.merge = None
        if merge:
            self.merge = ConcatProject(
                rng, [self.part_types * CAPSULE] * count, channels)

    def combine(self, features):
        raise NotImplementedError

    def __call__(self, bundle):
        return self.fuse(bundle)

    def fuse(self, bundle):
        if len(bundle) != self.count:
            raise ContractError(
                f'fusion block built for {self.count} modalities, got '
                f'{len(bundle)}')
        fused = self.combine(list(bundle.features))
        specifics = [layer(f) for layer, f in
                     zip(self.to_specific, bundle.features)]
        return FusionOutputs(
            shared=as_capsules(self.to_shared(fused), self.whole_types),
            specifics=specifics,
            merged_specific=merge_specifics(specifics, self.merge),
            modalities=bundle.names,
        )


class AdditionFusion(ProjectedFusion):
    def combine(self, features):
        total = features[0]
        for f in features[1:]:
            total = total + f
        return total


class ConcatenationFusion(ProjectedFusion):
    def __init__(self, rng, channels, config, merge=True):
        super().__init__(rng, channels, config, merge)
        self.project = ConcatProject(rng, [channels] * self.count, channels)

    def combine(self, features):
        return self.project(features)


class AttentionFusion(ProjectedFusion):
    """Per-pixel scaled dot-product attention across modalities: the query
    comes from the modality mean, keys and values from each modality."""

    def __init__(self, rng, channels, config, merge=True):
        super().__init__(rng, channels, config, merge)
        self.scale = 1.0 / np.sqrt(channels)
        self.query = Linear(rng, channels, channels)
        self.key = Linear(rng, channels, channels)
        self.value = Linear(rng, channels, channels)

    def combine(self, features):
        stacked = T.stack(features, axis=2)
        query = self.query(T.mean(stacked, axis=2))
        keys, values = self.key(stacked), self.value(stacked)
        scores = T.einsum('hwc,hwnc->hwn', query, keys) * self.scale
        weights = T.softmax(scores, axis=2)
        return T.einsum('hwn,hwnc->hwc', weights, values)


class FullResolutionRouting(Module):
    """Concatenate every modality's full-resolution capsules and route each
    pixel on its own, without disentangling the two resolution axes.

    ``share_params`` shares the primary capsule layer and the vote transforms
    across modalities, as in ``PWRFusion``.
    """

    def __init__(self, rng, channels, config, merge=True):
        self.count = config.modality_count
        self.part_types = config.capsule_types
        self.whole_types = config.whole_type_count
        self.iters = config.routing_iters
        self.lambdas = config.lambda_schedule
        if config.share_params:
            primary = PrimaryCapsules(rng, channels, self.part_types)
            self.primary = [primary] * self.count
            rows, self.repeats = self.part_types, self.count
        else:
            self.primary = [PrimaryCapsules(rng, channels, self.part_types)
                            for _ in range(self.count)]
            rows, self.repeats = self.count * self.part_types, 1
        self.transforms = Parameter(np.eye(4) + rng.normal(
            0.0, 0.01, (rows, self.whole_types, 4, 4)))
        self.beta_a = Parameter(np.zeros(self.whole_types))
        self.beta_u = Parameter(np.zeros(self.whole_types))
        self.merge = None
        if merge:
            self.merge = ConcatProject(
                rng, [self.part_types * CAPSULE] * self.count, channels)

    def vote_transforms(self):
        if self.repeats == 1:
            return self.transforms
        return T.concat([self.transforms] * self.repeats, axis=0)

    def __call__(self, bundle):
        return self.fuse(bundle)

    def fuse(self, bundle):
        if len(bundle) != self.count:
            raise ContractError(
                f'fusion block built for {self.count} modalities, got '
                f'{len(bundle)}')
        height, width, _ = bundle.features[0].shape
        positions = height * width
        fields = [layer(f) for layer, f in zip(self.primary, bundle.features)]
        parts = T.concat([cf.grid for cf in fields], axis=2)
        parts = T.reshape(parts, (positions, self.count * self.part_types,
                                  CAPSULE))
        poses = T.reshape(parts[:, :, :POSE],
                          (positions, self.count * self.part_types, 4, 4))
        means, activations, coefficients = route_capsules(
            poses, parts[:, :, POSE], self.vote_transforms(), self.beta_a,
            self.beta_u, self.iters, self.lambdas)
        wholes = T.concat(
            [means, T.reshape(activations, (positions, self.whole_types, 1))],
            axis=2)
        shared = CapsuleField(T.reshape(
            wholes, (height, width, self.whole_types, CAPSULE)))
        specifics = []
        for cf, block in zip(fields, coefficient_blocks(coefficients,
                                                        self.part_types)):
            split = T.reshape(T.mean(block, axis=2),
                              (height, width, self.part_types, 1))
            specifics.append(T.reshape(
                cf.grid * split, (height, width, self.part_types * CAPSULE)))
        return FusionOutputs(
            shared=shared,
            specifics=specifics,
            merged_specific=merge_specifics(specifics, self.merge),
            modalities=bundle.names,
        )


MECHANISMS = {
    'addition': AdditionFusion,
    'concatenation': ConcatenationFusion,
    'attention': AttentionFusion,
    'em_routing': FullResolutionRouting,
}


def build_fusion(rng, channels, height, width, config, merge=True):
    """The fusion block ``config.fusion_mechanism`` names, for one stage.
    ``merge=False`` leaves out the projection behind ``merged_specific``."""
    if config.fusion_mechanism == 'pwrf':
        return PWRFusion(rng, channels, height, width, config, merge)
    return MECHANISMS[config.fusion_mechanism](rng, channels, config, merge)
