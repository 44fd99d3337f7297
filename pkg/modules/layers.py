"""Learnable building blocks shared by both task heads."""
import numpy as np

from modules import tensor as T
from modules.errors import CheckpointError, DimensionError
from modules.tensor import Parameter


def _walk(value, path):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        for key, item in vars(value).items():
            yield from _walk(item, f'{path}.{key}' if path else key)
    elif isinstance(value, (list, tuple)):
        for index, item in enumerate(value):
            yield from _walk(item, f'{path}.{index}')
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f'{path}.{key}')


class Module:
    """Parameters are discovered from instance attributes in assignment order.

    A parameter reachable through several attributes (shared weights) is
    reported once, under the first path that reaches it.
    """

    def named_parameters(self):
        seen = set()
        for name, parameter in _walk(self, ''):
            if id(parameter) not in seen:
                seen.add(id(parameter))
                yield name, parameter

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self):
        for name, parameter in self.named_parameters():
            parameter.name = name
        return self

    def zero_grad(self):
        for parameter in self.parameters():
            parameter.zero_grad()

    def state(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(
                f'checkpoint does not match model: missing {missing[:3]}, '
                f'unexpected {unexpected[:3]}')
        for name, parameter in own.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != parameter.shape:
                raise CheckpointError(
                    f'{name}: checkpoint shape {values.shape}, model shape '
                    f'{parameter.shape}')
            parameter.data[...] = values


def uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """A learnable map along the last axis (a 1x1 convolution on maps).

    Parameters
    ----------
    rng: numpy.random.Generator
        Source of the initial weights.

    fan_in, fan_out: int
        Input and output widths.

    init: {'uniform', 'zeros', 'identity'}, default='uniform'
        'identity' needs ``fan_in == fan_out``.
    """

    def __init__(self, rng, fan_in, fan_out, bias=True, init='uniform'):
        if init == 'zeros':
            weight = np.zeros((fan_in, fan_out))
        elif init == 'identity':
            weight = np.eye(fan_in, fan_out)
        else:
            weight = uniform(rng, fan_in, (fan_in, fan_out))
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x):
        return T.linear_along_last(x, self.weight, self.bias)


class Conv3x3(Module):
    def __init__(self, rng, in_channels, out_channels):
        self.weight = Parameter(uniform(rng, 9 * in_channels,
                                        (3, 3, in_channels, out_channels)))
        self.bias = Parameter(np.zeros(out_channels))

    def __call__(self, x):
        return T.conv2d_3x3(x, self.weight, self.bias)


class NormAffine(Module):
    def __init__(self, channels):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def __call__(self, x):
        return T.norm_affine(x, self.gamma, self.beta)


class CBR(Module):
    """Convolution, normalization, ReLU."""

    def __init__(self, rng, in_channels, out_channels):
        self.conv = Conv3x3(rng, in_channels, out_channels)
        self.norm = NormAffine(out_channels)

    def __call__(self, x):
        return T.relu(self.norm(self.conv(x)))


class ConcatProject(Module):
    """Concatenate along channels, then project; the merge used for every
    "concatenate and convolve" step."""

    def __init__(self, rng, widths, out_channels):
        self.widths = tuple(widths)
        self.project = Linear(rng, sum(self.widths), out_channels)

    def __call__(self, parts):
        widths = tuple(p.shape[-1] for p in parts)
        if widths != self.widths:
            raise DimensionError(
                f'expected channel widths {self.widths}, got {widths}')
        return self.project(T.concat(parts, axis=-1))


class Backbone(Module):
    """Convolutional stand-in for a pretrained encoder.

    Each stage is a CBR block followed by 2x2 average pooling, so stage ``i``
    (counting from 1) has half the extent of stage ``i - 1``. Calling it
    returns the full-resolution output of the first CBR block and the list of
    stage outputs.
    """

    def __init__(self, rng, in_channels, channels, stages):
        self.blocks = [CBR(rng, in_channels if i == 0 else channels, channels)
                       for i in range(stages)]

    def __call__(self, x):
        stem, outputs = None, []
        for block in self.blocks:
            x = block(x)
            if stem is None:
                stem = x
            x = T.avg_pool2(x)
            outputs.append(x)
        return stem, outputs
