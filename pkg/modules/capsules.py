"""Part-whole relational fusion.

Each modality's feature map becomes a field of part-level capsules. The field
is disentangled into a horizontal and a vertical 1-D capsule line, the lines
of all modalities are routed to whole-level capsules with EM routing, and the
two routed lines are entangled back into a 2-D field of modal-shared
capsules. The routing coefficients, split per modality, reweight each
modality's own capsule lines into its modal-specific details.

Capsule grids have shape (H, W, T, 17): a 4x4 pose flattened to 16 values,
then the activation.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from modules import tensor as T
from modules.errors import ContractError, DimensionError
from modules.layers import ConcatProject, Linear, Module
from modules.tensor import Parameter

POSE = 16
CAPSULE = POSE + 1
HORIZONTAL = 'horizontal'
VERTICAL = 'vertical'
AXES = (HORIZONTAL, VERTICAL)
VARIANCE_FLOOR = 1e-8
# keeps the M-step mean finite when no part responds to a whole
RESPONSIBILITY_EPS = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class CapsuleField:
    grid: T.Tensor

    def __post_init__(self):
        if self.grid.ndim != 4 or self.grid.shape[3] != CAPSULE:
            raise DimensionError(
                f'capsule field must be (H, W, T, {CAPSULE}), '
                f'got {self.grid.shape}')

    @property
    def types(self):
        return self.grid.shape[2]

    @property
    def activations(self):
        return self.grid[:, :, :, POSE]


@dataclass(frozen=True)
class AxisCapsules:
    """A 1-D line of capsules: (H, 1, T, 17) when ``axis`` is horizontal
    (the width was collapsed), (1, W, T, 17) when vertical."""

    grid: T.Tensor
    axis: str

    def __post_init__(self):
        if self.axis not in AXES:
            raise ContractError(f'unknown axis {self.axis!r}')
        shape = self.grid.shape
        if len(shape) != 4 or shape[3] != CAPSULE:
            raise DimensionError(f'axis capsules must be 4-D, got {shape}')
        collapsed = 1 if self.axis == HORIZONTAL else 0
        if shape[collapsed] != 1:
            raise DimensionError(
                f'{self.axis} capsules need extent 1 on axis {collapsed}, '
                f'got {shape}')

    @property
    def length(self):
        return self.grid.shape[0] if self.axis == HORIZONTAL else self.grid.shape[1]

    @property
    def types(self):
        return self.grid.shape[2]


@dataclass(frozen=True)
class RoutingOutcome:
    wholes: AxisCapsules
    coefficients: T.Tensor
    iterations: int

    @property
    def activations(self):
        """Whole-level activations as (L, T_w)."""
        return T.reshape(self.wholes.grid[:, :, :, POSE],
                         (self.wholes.length, self.wholes.types))


@dataclass(frozen=True)
class ModalityBundle:
    """Same-stage feature maps of several modalities, in fusion order."""

    names: tuple
    features: tuple

    def __post_init__(self):
        object.__setattr__(self, 'names', tuple(self.names))
        object.__setattr__(self, 'features', tuple(self.features))
        if len(self.names) != len(self.features):
            raise ContractError('one feature map per modality name')
        extents = {f.shape[:2] for f in self.features}
        if len(extents) > 1:
            raise DimensionError(
                f'bundle features must share H and W, got {sorted(extents)}')

    def __len__(self):
        return len(self.features)


@dataclass(frozen=True)
class FusionOutputs:
    shared: CapsuleField
    specifics: list
    merged_specific: T.Tensor = None
    coefficients_h: list = field(default_factory=list)
    coefficients_v: list = field(default_factory=list)
    routing_h: RoutingOutcome = None
    routing_v: RoutingOutcome = None
    modalities: tuple = ()


class PrimaryCapsules(Module):
    """Pose by a linear map to T*16 channels, activation by a sigmoid of a
    linear map to T channels."""

    def __init__(self, rng, channels, types):
        if types < 1:
            raise ContractError('capsule types must be at least 1')
        self.types = types
        self.pose = Linear(rng, channels, types * POSE)
        self.activation = Linear(rng, channels, types)

    def __call__(self, features):
        return make_primary_capsules(features, self)


def make_primary_capsules(features, layer):
    height, width, _ = features.shape
    pose = T.reshape(layer.pose(features), (height, width, layer.types, POSE))
    activation = T.sigmoid(layer.activation(features))
    activation = T.reshape(activation, (height, width, layer.types, 1))
    return CapsuleField(T.concat([pose, activation], axis=3))


class Disentangle(Module):
    """Learnable weighted reduction of a capsule field along one resolution
    axis; starts as plain averaging."""

    def __init__(self, height, width):
        self.horizontal = Parameter(np.full(width, 1.0 / width))
        self.vertical = Parameter(np.full(height, 1.0 / height))

    def __call__(self, capsules, axis):
        return disentangle(capsules, axis, self)


def disentangle(capsules, axis, weights):
    height, width, types, _ = capsules.grid.shape
    if axis == HORIZONTAL:
        if weights.horizontal.shape != (width,):
            raise DimensionError(
                f'horizontal reduction has {weights.horizontal.shape[0]} taps '
                f'for width {width}')
        line = T.einsum('hwtd,w->htd', capsules.grid, weights.horizontal)
        return AxisCapsules(T.reshape(line, (height, 1, types, CAPSULE)), axis)
    if axis == VERTICAL:
        if weights.vertical.shape != (height,):
            raise DimensionError(
                f'vertical reduction has {weights.vertical.shape[0]} taps '
                f'for height {height}')
        line = T.einsum('hwtd,h->wtd', capsules.grid, weights.vertical)
        return AxisCapsules(T.reshape(line, (1, width, types, CAPSULE)), axis)
    raise ContractError(f'unknown axis {axis!r}')


def concat_parts(parts):
    """Stack the capsule types of every modality in bundle order."""
    if not parts:
        raise ContractError('no part capsules to concatenate')
    axes = {p.axis for p in parts}
    if len(axes) != 1:
        raise ContractError(f'cannot mix {sorted(axes)} capsules')
    if len({p.length for p in parts}) != 1:
        raise ContractError('part capsules differ in resolution extent')
    if len(parts) == 1:
        return parts[0]
    return AxisCapsules(T.concat([p.grid for p in parts], axis=2),
                        parts[0].axis)


def route_capsules(poses, activations, transforms, beta_a, beta_u, iters,
                   lambdas, floor=VARIANCE_FLOOR):
    """EM routing for L independent positions.

    Parameters
    ----------
    poses: Tensor (L, N, 4, 4)
        Part poses.

    activations: Tensor (L, N)
        Part activations; clipped to [0, 1].

    transforms: Tensor (N, M, 4, 4)
        Viewpoint transform from each part type to each whole type.

    beta_a, beta_u: Tensor (M,)
        Activation and per-dimension cost offsets.

    iters: int
        Number of M-step / E-step alternations.

    lambdas: sequence of float
        Inverse temperature of each iteration.

    Returns
    -------
    (means (L, M, 16), whole activations (L, M), responsibilities (L, N, M))
    """
    if iters < 1:
        raise ContractError('EM routing needs at least one iteration')
    if len(lambdas) < iters:
        raise ContractError('one inverse temperature per routing iteration')
    positions, parts = activations.shape
    if transforms.shape[0] != parts:
        raise DimensionError(
            f'{transforms.shape[0]} vote transforms for {parts} part types')
    wholes = transforms.shape[1]
    votes = T.einsum('lnpq,nmqr->lnmpr', poses, transforms)
    votes = T.reshape(votes, (positions, parts, wholes, POSE))
    a_in = T.reshape(T.clip(activations, 0.0, 1.0), (positions, parts, 1))
    beta_a = T.reshape(beta_a, (1, 1, wholes))
    beta_u = T.reshape(beta_u, (1, 1, wholes, 1))
    responsibilities = T.Tensor(np.full((positions, parts, wholes), 1.0 / wholes))
    for t in range(iters):
        # M-step
        weighted = responsibilities * a_in
        total = T.sum_(weighted, axis=1, keepdims=True)
        share = T.reshape(weighted / (total + RESPONSIBILITY_EPS),
                          (positions, parts, wholes, 1))
        means = T.sum_(share * votes, axis=1, keepdims=True)
        deviation = votes - means
        squared = T.square(deviation)
        variance = T.sum_(share * squared, axis=1, keepdims=True) + floor
        log_variance = T.log(variance)
        cost = T.mean((beta_u + 0.5 * log_variance)
                      * T.reshape(total, (positions, 1, wholes, 1)), axis=3)
        logits = lambdas[t] * (beta_a - cost)
        whole_activations = T.sigmoid(logits)
        # E-step
        log_likelihood = T.sum_(-0.5 * (log_variance + LOG_2PI)
                                - squared / (2.0 * variance), axis=3)
        responsibilities = T.softmax(T.log_sigmoid(logits) + log_likelihood,
                                     axis=2)
    means = T.reshape(means, (positions, wholes, POSE))
    whole_activations = T.reshape(whole_activations, (positions, wholes))
    return means, whole_activations, responsibilities


def em_routing(parts, transforms, beta_a, beta_u, iters, lambdas,
               floor=VARIANCE_FLOOR):
    """Route a line of part capsules to T_w whole capsules per position."""
    positions, types = parts.length, parts.types
    flat = T.reshape(parts.grid, (positions, types, CAPSULE))
    poses = T.reshape(flat[:, :, :POSE], (positions, types, 4, 4))
    means, activations, coefficients = route_capsules(
        poses, flat[:, :, POSE], transforms, beta_a, beta_u, iters, lambdas,
        floor)
    wholes = transforms.shape[1]
    grid = T.concat([means, T.reshape(activations, (positions, wholes, 1))],
                    axis=2)
    shape = ((positions, 1, wholes, CAPSULE) if parts.axis == HORIZONTAL
             else (1, positions, wholes, CAPSULE))
    return RoutingOutcome(AxisCapsules(T.reshape(grid, shape), parts.axis),
                          coefficients, iters)


class EMRouter(Module):
    """Vote transforms and cost offsets for one routing direction.

    With ``share_params`` one block of transforms per part type is learned
    and repeated for every modality.
    """

    def __init__(self, rng, part_types, modality_count, whole_types,
                 share_params=True):
        rows = part_types if share_params else part_types * modality_count
        self.repeats = modality_count if share_params else 1
        self.transforms = Parameter(
            np.eye(4) + rng.normal(0.0, 0.01, (rows, whole_types, 4, 4)))
        self.beta_a = Parameter(np.zeros(whole_types))
        self.beta_u = Parameter(np.zeros(whole_types))

    def vote_transforms(self):
        if self.repeats == 1:
            return self.transforms
        return T.concat([self.transforms] * self.repeats, axis=0)

    def __call__(self, parts, iters, lambdas):
        return em_routing(parts, self.vote_transforms(), self.beta_a,
                          self.beta_u, iters, lambdas)


def entangle(horizontal, vertical):
    """Outer product of a horizontal and a vertical capsule line."""
    if horizontal.axis != HORIZONTAL or vertical.axis != VERTICAL:
        raise ContractError('entangle needs a horizontal and a vertical line')
    if horizontal.types != vertical.types:
        raise ContractError(
            f'capsule types differ: {horizontal.types} vs {vertical.types}')
    return CapsuleField(T.matmul_resolution(horizontal.grid, vertical.grid))


def coefficient_blocks(coefficients, part_types):
    """The per-modality (L, T_p, T_w) slices of a routing coefficient tensor."""
    parts = coefficients.shape[1]
    if part_types < 1 or parts % part_types:
        raise ContractError(
            f'{parts} routed part types do not split into blocks of '
            f'{part_types}')
    return [coefficients[:, n:n + part_types, :]
            for n in range(0, parts, part_types)]


def split_coefficients(coefficients, modality, part_types, axis=HORIZONTAL,
                       activations=None):
    """Average modality ``modality``'s block of routing coefficients over the
    whole types.

    ``modality`` counts from 1. When ``activations`` (L, T_w) is given the
    average is weighted by the whole-level activations.
    """
    blocks = coefficient_blocks(coefficients, part_types)
    if not 1 <= modality <= len(blocks):
        raise ContractError(
            f'modality index {modality} outside 1..{len(blocks)}')
    block = blocks[modality - 1]
    positions, _, wholes = block.shape
    if activations is None:
        split = T.mean(block, axis=2)
    else:
        weights = T.reshape(activations, (positions, 1, wholes))
        total = T.sum_(activations, axis=1, keepdims=True)
        split = T.sum_(block * weights, axis=2) / (total + RESPONSIBILITY_EPS)
    if axis == HORIZONTAL:
        return T.reshape(split, (positions, 1, part_types))
    if axis == VERTICAL:
        return T.reshape(split, (1, positions, part_types))
    raise ContractError(f'unknown axis {axis!r}')


def modal_specific(parts_h, parts_v, splits_h, splits_v):
    """Reweight each modality's capsule lines by its split coefficients and
    entangle them; returns one (H, W, T_p*17) map per modality."""
    if not len(parts_h) == len(parts_v) == len(splits_h) == len(splits_v):
        raise ContractError('one line and one split per modality and axis')
    specifics = []
    for line_h, line_v, split_h, split_v in zip(parts_h, parts_v, splits_h,
                                                splits_v):
        height, width, types = line_h.length, line_v.length, line_h.types
        weighted_h = line_h.grid * T.reshape(split_h, (height, 1, types, 1))
        weighted_v = line_v.grid * T.reshape(split_v, (1, width, types, 1))
        specific = T.matmul_resolution(weighted_h, weighted_v)
        specifics.append(T.reshape(specific, (height, width, types * CAPSULE)))
    return specifics


def merge_specifics(specifics, projection):
    """Concatenate modal-specific maps on channels and project to C; None for
    a block built without a merge."""
    if projection is None:
        return None
    return projection(list(specifics))


class PWRFusion(Module):
    """The fusion block for one backbone stage.

    Parameters
    ----------
    rng: numpy.random.Generator

    channels: int
        Width of the incoming feature maps and of ``merged_specific``.

    height, width: int
        Spatial extent of this stage, fixed by the disentangle reductions.

    config: PipelineConfig
        Supplies modality count, capsule types, routing schedule, parameter
        sharing and split weighting.

    merge: bool, default=True
        Build the projection behind ``merged_specific``. Heads that consume
        the per-modality specific maps directly leave it out, and
        ``merged_specific`` is then None.
    """

    def __init__(self, rng, channels, height, width, config, merge=True):
        count = config.modality_count
        self.part_types = config.capsule_types
        self.whole_types = config.whole_type_count
        self.iters = config.routing_iters
        self.lambdas = config.lambda_schedule
        self.split_weighting = config.split_weighting
        if config.share_params:
            primary = PrimaryCapsules(rng, channels, self.part_types)
            reduction = Disentangle(height, width)
            self.primary = [primary] * count
            self.disentangle = [reduction] * count
        else:
            self.primary = [PrimaryCapsules(rng, channels, self.part_types)
                            for _ in range(count)]
            self.disentangle = [Disentangle(height, width)
                                for _ in range(count)]
        self.router_h = EMRouter(rng, self.part_types, count, self.whole_types,
                                 config.share_params)
        self.router_v = EMRouter(rng, self.part_types, count, self.whole_types,
                                 config.share_params)
        self.merge = None
        if merge:
            self.merge = ConcatProject(
                rng, [self.part_types * CAPSULE] * count, channels)

    def __call__(self, bundle):
        return self.fuse(bundle)

    def fuse(self, bundle):
        if len(bundle) != len(self.primary):
            raise ContractError(
                f'fusion block built for {len(self.primary)} modalities, '
                f'got {len(bundle)}')
        fields = [layer(f) for layer, f in zip(self.primary, bundle.features)]
        parts_h = [reduce(cf, HORIZONTAL)
                   for reduce, cf in zip(self.disentangle, fields)]
        parts_v = [reduce(cf, VERTICAL)
                   for reduce, cf in zip(self.disentangle, fields)]
        routing_h = self.router_h(concat_parts(parts_h), self.iters,
                                  self.lambdas)
        routing_v = self.router_v(concat_parts(parts_v), self.iters,
                                  self.lambdas)
        shared = entangle(routing_h.wholes, routing_v.wholes)
        weighted = self.split_weighting == 'activation'
        splits_h = [split_coefficients(
            routing_h.coefficients, n + 1, self.part_types, HORIZONTAL,
            routing_h.activations if weighted else None)
            for n in range(len(bundle))]
        splits_v = [split_coefficients(
            routing_v.coefficients, n + 1, self.part_types, VERTICAL,
            routing_v.activations if weighted else None)
            for n in range(len(bundle))]
        specifics = modal_specific(parts_h, parts_v, splits_h, splits_v)
        return FusionOutputs(
            shared=shared,
            specifics=specifics,
            merged_specific=merge_specifics(specifics, self.merge),
            coefficients_h=splits_h,
            coefficients_v=splits_v,
            routing_h=routing_h,
            routing_v=routing_v,
            modalities=bundle.names,
        )
