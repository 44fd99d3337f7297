"""Multi-modal semantic segmentation on top of the fusion block.

RGB is the primary modality; the remaining modalities are auxiliaries and go
through the fusion block at the second backbone stage. The first stage is
merged by plain concatenation.
"""
import math
from dataclasses import dataclass

import numpy as np

from modules import tensor as T
from modules.baselines import build_fusion
from modules.capsules import CAPSULE, FusionOutputs, ModalityBundle
from modules.config import SMM_PRIMARY
from modules.errors import ConfigError, ContractError, DimensionError
from modules.layers import Backbone, ConcatProject, Linear, Module

FUSED_STAGE = 2


@dataclass(frozen=True)
class StageFeatures:
    primary: T.Tensor
    auxiliaries: tuple
    fusion: FusionOutputs

    def __post_init__(self):
        extents = {self.primary.shape[:2]}
        extents.update(a.shape[:2] for a in self.auxiliaries)
        extents.add(self.fusion.shared.grid.shape[:2])
        if len(extents) != 1:
            raise DimensionError(f'stage features disagree in extent: '
                                 f'{sorted(extents)}')


@dataclass(frozen=True)
class InteractionComponents:
    shared: T.Tensor
    primitive_specific: T.Tensor
    selected: T.Tensor

    def __post_init__(self):
        shapes = {self.shared.shape, self.primitive_specific.shape,
                  self.selected.shape}
        if len(shapes) != 1:
            raise DimensionError(f'interaction inputs disagree: {shapes}')

    @property
    def branches(self):
        return self.shared, self.primitive_specific, self.selected


def shared_to_features(capsules, projection):
    """Flatten the whole-level capsules of each pixel and project to C."""
    height, width, types, _ = capsules.grid.shape
    return projection(T.reshape(capsules.grid,
                                (height, width, types * CAPSULE)))


def gated_residual(gate_logits, values):
    return T.sigmoid(gate_logits) * values + values


def primitive_specific(features, specific, shared, gate, value):
    """Denoise one modality's specific details with a gate computed from the
    modality's own features."""
    if not features.shape[:2] == specific.shape[:2] == shared.shape[:2]:
        raise ContractError(
            f'primitive inputs disagree in extent: {features.shape}, '
            f'{specific.shape}, {shared.shape}')
    return gated_residual(gate([features, specific]), value([shared, specific]))


def merge_primitive(outputs, projection):
    return projection(list(outputs))


def spatial_attention(cp1, cp2, cp3, conv):
    return T.sigmoid(conv(T.channel_max_pool(cp1 + cp2 + cp3)))


def channel_attention(cp, sa, conv):
    return T.sigmoid(conv(T.global_max_pool(cp * sa + cp)))


def attend(cp, ca):
    return cp * ca + cp


def interaction_merge(branches, projection):
    first, second, third = branches
    return projection([first * second * third, first + second + third])


class SegmentationModel(Module):
    """Two-stage multi-modal segmenter producing (H, W, K) logits.

    Parameters
    ----------
    config: PipelineConfig
        Must have ``task='smm'``.

    rng: numpy.random.Generator, default=None
        Initialization source; seeded from ``config.seed`` when omitted.
    """

    def __init__(self, config, rng=None):
        if config.task != 'smm':
            raise ConfigError(f'segmentation model needs task smm, got '
                              f'{config.task}')
        if config.modality_count not in (2, 3):
            raise ConfigError('segmentation fuses 2 or 3 auxiliary modalities')
        rng = np.random.default_rng(config.seed) if rng is None else rng
        self.config = config
        self.auxiliaries = tuple(config.modality_names)
        count = len(self.auxiliaries)
        channels = config.channels
        specific = config.capsule_types * CAPSULE
        size = config.resolved_image_size
        fused_size = math.ceil(math.ceil(size / 2) / 2)
        self.backbones = {name: Backbone(rng, config.in_channels, channels, 2)
                          for name in (SMM_PRIMARY,) + self.auxiliaries}
        self.bypass = ConcatProject(rng, [channels] * (count + 1), channels)
        # the head reads each modality's specific map, never the merged one
        self.fusion = build_fusion(rng, channels, fused_size, fused_size,
                                   config, merge=False)
        self.shared = Linear(rng, config.whole_type_count * CAPSULE, channels)
        self.gates = [ConcatProject(rng, [channels, specific], channels)
                      for _ in range(count)]
        self.values = [ConcatProject(rng, [channels, specific], channels)
                       for _ in range(count)]
        self.primitive_merge = ConcatProject(rng, [channels] * count, channels)
        self.select = Linear(rng, channels, channels)
        self.spatial = Linear(rng, 1, 1)
        self.channel = [Linear(rng, channels, channels) for _ in range(3)]
        self.interaction = ConcatProject(rng, [channels, channels], channels)
        self.fusion_step = ConcatProject(rng, [channels, channels], channels)
        self.classifier = ConcatProject(rng, [channels] * 3, config.classes)
        self.assign_names()

    @property
    def fused_stages(self):
        return (FUSED_STAGE,)

    def _check_inputs(self, inputs):
        missing = [m for m in (SMM_PRIMARY,) + self.auxiliaries
                   if m not in inputs]
        if missing:
            raise ConfigError(f'missing input modalities: {missing}')

    def trace(self, inputs):
        """Logits plus the stage-2 features and interaction components."""
        self._check_inputs(inputs)
        height, width, _ = inputs[SMM_PRIMARY].shape
        stems, first, second = {}, {}, {}
        for name, backbone in self.backbones.items():
            stems[name], (first[name], second[name]) = backbone(inputs[name])
        merged_first = self.bypass(
            [first[SMM_PRIMARY]] + [first[m] for m in self.auxiliaries])

        auxiliaries = tuple(second[m] for m in self.auxiliaries)
        fusion = self.fusion(ModalityBundle(self.auxiliaries, auxiliaries))
        stage = StageFeatures(second[SMM_PRIMARY], auxiliaries, fusion)

        shared = shared_to_features(fusion.shared, self.shared)
        primitives = [primitive_specific(f, sp, shared, gate, value)
                      for f, sp, gate, value in zip(
                          auxiliaries, fusion.specifics, self.gates,
                          self.values)]
        strongest = T.max_along(T.stack(auxiliaries, axis=3), 3)
        components = InteractionComponents(
            shared, merge_primitive(primitives, self.primitive_merge),
            self.select(strongest))

        sa = spatial_attention(*components.branches, self.spatial)
        attended = [attend(cp, channel_attention(cp, sa, conv))
                    for cp, conv in zip(components.branches, self.channel)]
        unified = interaction_merge(attended, self.interaction)
        fused = self.fusion_step([stage.primary, unified])

        logits = self.classifier([
            stems[SMM_PRIMARY],
            T.bilinear_upsample(merged_first, height, width),
            T.bilinear_upsample(fused, height, width),
        ])
        return logits, stage, components

    def forward(self, inputs):
        return self.trace(inputs)[0]

    __call__ = forward

    def fusion_trace(self, inputs):
        _, stage, _ = self.trace(inputs)
        return {FUSED_STAGE: stage.fusion}


def segmentation_forward(model, inputs):
    return model.forward(inputs)


def predict_classes(logits):
    data = logits.data if isinstance(logits, T.Tensor) else logits
    return np.argmax(data, axis=2)


def ohem_cross_entropy(logits, labels, keep_fraction=0.7, min_kept=16):
    """Cross-entropy averaged over the hardest pixels.

    Parameters
    ----------
    logits: Tensor (H, W, K)

    labels: array of int (H, W)
        Class ids in 0..K-1.

    keep_fraction: float, default=0.7
        Fraction of pixels kept, hardest first.

    min_kept: int, default=16
        Lower bound on the number of kept pixels (capped at H*W).
    """
    height, width, classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (height, width):
        raise DimensionError(
            f'labels {labels.shape} do not match logits {logits.shape}')
    if labels.min() < 0 or labels.max() >= classes:
        raise ContractError(f'class ids must lie in 0..{classes - 1}')
    if not 0 < keep_fraction <= 1:
        raise ContractError('keep_fraction must lie in (0, 1]')
    pixels = height * width
    log_probs = T.reshape(T.log_softmax(logits, axis=2), (pixels, classes))
    losses = -T.getitem(log_probs, (np.arange(pixels),
                                    labels.reshape(-1).astype(np.intp)))
    # ceil, with slack for products like 0.29 * 100 = 28.999999999999996
    wanted = math.ceil(keep_fraction * pixels - 1e-9)
    kept = min(pixels, max(min_kept, wanted))
    if kept == pixels:
        return T.mean(losses)
    hardest = np.sort(np.argsort(-losses.data, kind='stable')[:kept])
    return T.mean(losses[hardest])
