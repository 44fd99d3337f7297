"""Triple-modal salient object detection on top of the fusion block.

Every backbone stage is fused. The fused stages form a ladder of modal-shared
and modal-specific maps that a stack of two sub-decoders, built from
adjacent-scale attention blocks, turns into five saliency maps.
"""
import functools
import math
from dataclasses import dataclass

import numpy as np

from modules import tensor as T
from modules.baselines import build_fusion
from modules.capsules import CAPSULE, ModalityBundle
from modules.errors import ConfigError, ContractError, DimensionError
from modules.layers import (CBR, Backbone, ConcatProject, Conv3x3, Linear,
                            Module, NormAffine)
from modules.segmentation import shared_to_features

BCE_CLAMP = 1e-7
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
EDGE_EPS = 1e-12


@dataclass(frozen=True)
class ScaleLadder:
    """Channel-projected modal-shared and modal-specific maps, shallowest
    stage first."""

    shared: tuple
    specific: tuple

    def __post_init__(self):
        object.__setattr__(self, 'shared', tuple(self.shared))
        object.__setattr__(self, 'specific', tuple(self.specific))
        if len(self.shared) != len(self.specific):
            raise ContractError('shared and specific ladders differ in length')
        for i, (shared, specific) in enumerate(zip(self.shared, self.specific)):
            if shared.shape != specific.shape:
                raise DimensionError(
                    f'stage {i}: shared {shared.shape} vs specific '
                    f'{specific.shape}')
            if i and shared.shape[:2] != tuple(
                    math.ceil(e / 2) for e in self.shared[i - 1].shape[:2]):
                raise DimensionError(
                    f'stage {i} extent {shared.shape[:2]} is not half of '
                    f'{self.shared[i - 1].shape[:2]}')

    def __len__(self):
        return len(self.shared)


@dataclass(frozen=True)
class SaliencyPrediction:
    maps: tuple

    @property
    def final(self):
        return self.maps[-1]


def selective_aggregate(hi_up, lo, dba):
    return gated_blend(hi_up, lo, T.sigmoid(dba))


def gated_blend(hi_up, lo, gate):
    if hi_up.shape != lo.shape:
        raise ContractError(
            f'cannot blend {hi_up.shape} with {lo.shape}')
    return hi_up * gate + lo * (1.0 - gate)


class AdjacentScaleAttention(Module):
    """Merge a deeper scale into the adjacent shallower one through a gate
    computed by local and global attention branches."""

    def __init__(self, rng, channels):
        self.lift = CBR(rng, channels, channels)
        self.local_conv1 = Conv3x3(rng, channels, channels)
        self.local_norm1 = NormAffine(channels)
        self.local_conv2 = Conv3x3(rng, channels, channels)
        self.local_norm2 = NormAffine(channels)
        self.global_fc1 = Linear(rng, channels, channels)
        self.global_fc2 = Linear(rng, channels, channels)

    def _upsampled(self, lo, hi):
        if lo.shape[2] != hi.shape[2]:
            raise ContractError(
                f'channel mismatch: {lo.shape[2]} vs {hi.shape[2]}')
        if hi.shape[0] > lo.shape[0] or hi.shape[1] > lo.shape[1]:
            raise ContractError(
                f'deeper scale {hi.shape[:2]} exceeds {lo.shape[:2]}')
        return T.bilinear_upsample(self.lift(hi), lo.shape[0], lo.shape[1])

    def adjacent_integrate(self, lo, hi):
        return lo + self._upsampled(lo, hi)

    def dual_branch_attention(self, x):
        local = self.local_norm2(self.local_conv2(
            T.relu(self.local_norm1(self.local_conv1(x)))))
        pooled = self.global_fc2(T.relu(self.global_fc1(T.avg_pool_global(x))))
        return local + pooled

    def __call__(self, lo, hi):
        hi_up = self._upsampled(lo, hi)
        dba = self.dual_branch_attention(lo + hi_up)
        return selective_aggregate(hi_up, lo, dba)


@functools.lru_cache(maxsize=None)
def sobel_matrices(size):
    """(smoothing, derivative) matrices for one axis with replicated borders."""
    smooth = np.zeros((size, size))
    derive = np.zeros((size, size))
    for i in range(size):
        before, after = max(i - 1, 0), min(i + 1, size - 1)
        smooth[i, before] += 1.0
        smooth[i, i] += 2.0
        smooth[i, after] += 1.0
        derive[i, after] += 1.0
        derive[i, before] -= 1.0
    smooth.flags.writeable = False
    derive.flags.writeable = False
    return smooth, derive


def edge_map(reference):
    """Sobel gradient magnitude of the channel mean, scaled to [0, 1]."""
    height, width, _ = reference.shape
    gray = T.mean(reference, axis=2, keepdims=True)
    smooth_rows, derive_rows = sobel_matrices(height)
    smooth_cols, derive_cols = sobel_matrices(width)
    gx = T.separable(gray, smooth_rows, derive_cols)
    gy = T.separable(gray, derive_rows, smooth_cols)
    magnitude = T.sqrt(T.square(gx) + T.square(gy) + EDGE_EPS) \
        - math.sqrt(EDGE_EPS)
    peak = T.max_along(T.reshape(magnitude, (height * width,)), 0)
    return magnitude / (peak + EDGE_EPS)


def edge_enhance(depth_features, reference):
    if depth_features.shape[:2] != reference.shape[:2]:
        raise ContractError(
            f'edge reference {reference.shape} does not match depth '
            f'{depth_features.shape}')
    return depth_features * (1.0 + edge_map(reference))


def to_map(logits, height, width):
    return T.sigmoid(T.bilinear_upsample(logits, height, width))


class StackingDecoder(Module):
    """One or two stacked sub-decoders over a scale ladder.

    The first sub-decoder aggregates the shared and the specific streams
    bottom-up with separate attention blocks and merges them per scale. The
    second one starts from the merged raw ladder, receives the first
    decoder's shallowest merge as additive guidance at every scale, and
    emits a side map per scale.
    """

    def __init__(self, rng, channels, stages, sub_decoders=2):
        if stages < 2:
            raise ConfigError('the stacking decoder needs at least two stages')
        self.sub_decoders = sub_decoders
        self.first_shared = [AdjacentScaleAttention(rng, channels)
                             for _ in range(stages - 1)]
        self.first_specific = [AdjacentScaleAttention(rng, channels)
                               for _ in range(stages - 1)]
        self.first_merge = [ConcatProject(rng, [channels, channels], channels)
                            for _ in range(stages)]
        self.preliminary = Linear(rng, channels, 1)
        if sub_decoders == 2:
            self.guide = Linear(rng, channels, channels)
            self.second_inputs = [
                ConcatProject(rng, [channels, channels], channels)
                for _ in range(stages)]
            self.second = [AdjacentScaleAttention(rng, channels)
                           for _ in range(stages - 1)]
            self.final = ConcatProject(rng, [channels, channels], 1)
        else:
            self.final = Linear(rng, channels, 1)
        self.side = [Linear(rng, channels, 1) for _ in range(stages)]

    @staticmethod
    def aggregate(blocks, stream):
        """Bottom-up chain: each scale absorbs the aggregate below it."""
        aggregated = list(stream)
        for i in range(len(stream) - 2, -1, -1):
            aggregated[i] = blocks[i](stream[i], aggregated[i + 1])
        return aggregated

    def __call__(self, ladder, height, width):
        return self.decode(ladder, height, width)

    def decode(self, ladder, height, width):
        if len(ladder) < 2:
            raise ConfigError('scale ladder needs at least two stages')
        if len(ladder) != len(self.side):
            raise ConfigError(f'decoder built for {len(self.side)} stages, '
                              f'ladder has {len(ladder)}')
        shared = self.aggregate(self.first_shared, ladder.shared)
        specific = self.aggregate(self.first_specific, ladder.specific)
        merged = [merge([s, p]) for merge, s, p in
                  zip(self.first_merge, shared, specific)]
        maps = [to_map(self.preliminary(merged[0]), height, width)]
        if self.sub_decoders == 2:
            guide = self.guide(merged[0])
            inputs = [
                project([s, p]) + T.bilinear_upsample(guide, *s.shape[:2])
                for project, s, p in zip(self.second_inputs, ladder.shared,
                                         ladder.specific)]
            levels = self.aggregate(self.second, inputs)
            final = self.final([merged[0], levels[0]])
        else:
            levels = merged
            final = self.final(merged[0])
        for i in reversed(range(len(levels))):
            maps.append(to_map(self.side[i](levels[i]), height, width))
        maps.append(to_map(final, height, width))
        return SaliencyPrediction(tuple(maps))


def stacking_decode(decoder, ladder, height, width):
    return decoder.decode(ladder, height, width)


class SaliencyModel(Module):
    """Three-stage fused saliency network producing five (H, W, 1) maps.

    Parameters
    ----------
    config: PipelineConfig
        Must have ``task='vdt'``.

    rng: numpy.random.Generator, default=None
        Initialization source; seeded from ``config.seed`` when omitted.
    """

    def __init__(self, config, rng=None):
        if config.task != 'vdt':
            raise ConfigError(f'saliency model needs task vdt, got '
                              f'{config.task}')
        rng = np.random.default_rng(config.seed) if rng is None else rng
        self.config = config
        self.modalities = tuple(config.modality_names)
        channels = config.channels
        stages = config.stage_count
        size = config.resolved_image_size
        extents = []
        for _ in range(stages):
            size = math.ceil(size / 2)
            extents.append(size)
        self.backbones = {name: Backbone(rng, config.in_channels, channels,
                                         stages)
                          for name in self.modalities}
        self.fusion = [build_fusion(rng, channels, e, e, config)
                       for e in extents]
        self.shared = [Linear(rng, config.whole_type_count * CAPSULE,
                              channels)
                       for _ in extents]
        self.decoder = StackingDecoder(rng, channels, stages,
                                       config.sub_decoders)
        self.assign_names()

    @property
    def fused_stages(self):
        return tuple(range(1, len(self.fusion) + 1))

    @property
    def edge_reference(self):
        if 'visible' in self.modalities:
            return 'visible'
        return next(m for m in self.modalities if m != 'depth')

    def _stage_features(self, inputs):
        missing = [m for m in self.modalities if m not in inputs]
        if missing:
            raise ConfigError(f'missing input modalities: {missing}')
        features = {name: backbone(inputs[name])[1]
                    for name, backbone in self.backbones.items()}
        if 'depth' in features:
            reference = features[self.edge_reference]
            features['depth'] = [edge_enhance(d, r) for d, r in
                                 zip(features['depth'], reference)]
        return features

    def trace(self, inputs):
        features = self._stage_features(inputs)
        fusions = [block(ModalityBundle(
            self.modalities, [features[m][i] for m in self.modalities]))
            for i, block in enumerate(self.fusion)]
        ladder = ScaleLadder(
            shared=[shared_to_features(f.shared, proj)
                    for f, proj in zip(fusions, self.shared)],
            specific=[f.merged_specific for f in fusions])
        height, width, _ = inputs[self.modalities[0]].shape
        return self.decoder(ladder, height, width), fusions

    def forward(self, inputs):
        return self.trace(inputs)[0]

    __call__ = forward

    def fusion_trace(self, inputs):
        _, fusions = self.trace(inputs)
        return dict(zip(self.fused_stages, fusions))


def bce_term(probabilities, target):
    p = T.clip(probabilities, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -T.mean(target * T.log(p) + (1.0 - target) * T.log(1.0 - p))


@functools.lru_cache(maxsize=None)
def gaussian_matrix(size):
    """Zero-padded Gaussian blur along one axis as a (size, size) matrix."""
    half = SSIM_WINDOW // 2
    taps = np.exp(-(np.arange(SSIM_WINDOW) - half) ** 2
                  / (2.0 * SSIM_SIGMA ** 2))
    taps /= taps.sum()
    matrix = np.zeros((size, size))
    for i in range(size):
        for j in range(max(0, i - half), min(size, i + half + 1)):
            matrix[i, j] = taps[j - i + half]
    matrix.flags.writeable = False
    return matrix


def ssim_index(probabilities, target):
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5)."""
    target = T.as_tensor(target)
    height, width, _ = probabilities.shape
    rows, cols = gaussian_matrix(height), gaussian_matrix(width)

    def blur(x):
        return T.separable(x, rows, cols)

    mu_p, mu_g = blur(probabilities), blur(target)
    mu_pp, mu_gg, mu_pg = mu_p * mu_p, mu_g * mu_g, mu_p * mu_g
    var_p = blur(probabilities * probabilities) - mu_pp
    var_g = blur(target * target) - mu_gg
    covariance = blur(probabilities * target) - mu_pg
    numerator = (2.0 * mu_pg + SSIM_C1) * (2.0 * covariance + SSIM_C2)
    denominator = (mu_pp + mu_gg + SSIM_C1) * (var_p + var_g + SSIM_C2)
    return T.mean(numerator / denominator)


def soft_iou(probabilities, target):
    intersection = T.sum_(probabilities * target)
    union = T.sum_(probabilities + target - probabilities * target)
    if union.item() == 0:
        # nothing predicted and nothing to find
        return T.Tensor(1.0)
    return intersection / union


def saliency_loss(prediction, target):
    """BCE + (1 - SSIM) + (1 - soft IoU), summed over every map.

    Parameters
    ----------
    prediction: SaliencyPrediction

    target: array (H, W) or (H, W, 1)
        Ground truth in [0, 1].
    """
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 2:
        target = target[:, :, None]
    if target.min() < 0 or target.max() > 1:
        raise ContractError('saliency ground truth must lie in [0, 1]')
    total = None
    for probabilities in prediction.maps:
        if probabilities.shape != target.shape:
            raise DimensionError(
                f'map {probabilities.shape} vs ground truth {target.shape}')
        term = (bce_term(probabilities, target)
                + (1.0 - ssim_index(probabilities, target))
                + (1.0 - soft_iou(probabilities, target)))
        total = term if total is None else total + term
    return total
