"""A small dense tensor engine with reverse-mode differentiation.

Values are float64 numpy arrays laid out as (H, W, C) feature maps or
(..., T, 17) capsule grids. Every op records a closure on the tape when one
of its inputs requires a gradient; ``backward`` walks the tape once in
reverse topological order.

Every sum, whether an explicit reduction or an einsum contraction, goes
through ``ordered_sum``: terms are added left to right with plain elementwise
additions, never with numpy's pairwise or SIMD-blocked kernels, and products
are formed before any sum so no fused multiply-add is involved. Sums and
products are therefore bit-identical across float64 platforms; ``exp``,
``log`` and ``sqrt`` come from numpy's ufuncs.
"""
import contextlib
import functools
import math
import threading

import numpy as np

from modules.errors import ContractError, DimensionError, NonFiniteError

_mode = threading.local()


def is_grad_enabled():
    return getattr(_mode, 'enabled', True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape (finite differences, inference)."""
    previous = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = previous


def _check(data):
    if 0 in data.shape:
        raise DimensionError(f'tensor extents must be positive, got {data.shape}')
    if not np.isfinite(data).all():
        raise NonFiniteError(f'non-finite values in tensor of shape {data.shape}')
    return data


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` own a same-shape ``grad``
    buffer that ``backward`` accumulates into. Results of ops keep ``grad`` as
    None; their gradients live only for the duration of a backward pass.
    """

    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = _check(np.array(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None

    @classmethod
    def _result(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = _check(np.asarray(data, dtype=np.float64))
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.grad = None
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad})'

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A learnable leaf tensor. ``name`` is its dotted path in the model."""

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f'Parameter({self.name!r}, shape={self.shape})'


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _fold(values, axis):
    """Add the slices along ``axis`` strictly left to right; keeps the axis
    with extent 1."""
    moved = np.moveaxis(values, axis, 0)
    if moved.shape[0] == 0:
        total = np.zeros(moved.shape[1:])
    else:
        total = np.array(moved[0], dtype=np.float64)
        for term in moved[1:]:
            total += term
    return np.expand_dims(total, axis)


def ordered_sum(values, axis=None, keepdims=False):
    """``np.sum`` with a fixed association order.

    Each reduced axis is folded left to right, the highest axis first. Only
    elementwise additions are issued, so the result does not depend on the
    SIMD width or pairwise blocking of the numpy build.
    """
    values = np.asarray(values, dtype=np.float64)
    if axis is None:
        axes = tuple(range(values.ndim))
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(sorted({a % values.ndim for a in axes}))
    out = values
    for a in reversed(axes):
        out = _fold(out, a)
    if not keepdims and axes:
        out = out.reshape([n for k, n in enumerate(out.shape) if k not in axes])
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = ordered_sum(grad, axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = ordered_sum(grad, axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f'cannot broadcast {a.shape} with {b.shape}') from exc


# elementwise -----------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return Tensor._result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return Tensor._result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))
    return Tensor._result(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b)
    if np.any(b.data == 0):
        raise NonFiniteError('division by zero')

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return Tensor._result(a.data / b.data, (a, b), backward)


def neg(x):
    x = as_tensor(x)
    return Tensor._result(-x.data, (x,), lambda g: (-g,))


def square(x):
    x = as_tensor(x)
    return Tensor._result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NonFiniteError('log of a non-positive value')
    return Tensor._result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise NonFiniteError('sqrt of a negative value')
    out = np.sqrt(x.data)
    return Tensor._result(out, (x,), lambda g: (g / (2.0 * out),))


def _sigmoid(values):
    out = np.empty_like(values)
    positive = values >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-values[positive]))
    shifted = np.exp(values[~positive])
    out[~positive] = shifted / (1.0 + shifted)
    return out


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x):
    """log(sigmoid(x)) without the underflow of composing the two."""
    x = as_tensor(x)
    out = -np.logaddexp(0.0, -x.data)
    return Tensor._result(out, (x,), lambda g: (g * _sigmoid(-x.data),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), (x,),
                          lambda g: (g * mask,))


def clip(x, low, high):
    x = as_tensor(x)
    mask = (x.data >= low) & (x.data <= high)
    return Tensor._result(np.clip(x.data, low, high), (x,),
                          lambda g: (g * mask,))


# reductions and shape ---------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = ordered_sum(x.data, axis=axis, keepdims=keepdims)
    return Tensor._result(out, (x,),
                          lambda g: (_expand(g, x.shape, axis, keepdims),))


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = math.prod(x.shape[a] for a in axes)
    out = ordered_sum(x.data, axis=axis, keepdims=keepdims) / count
    return Tensor._result(
        out, (x,), lambda g: (_expand(g / count, x.shape, axis, keepdims),))


def max_along(x, axis, keepdims=False):
    """Maximum over one axis; ties send the gradient to the first maximum."""
    x = as_tensor(x)
    index = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, index, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        grad = np.zeros_like(x.data)
        if not keepdims:
            g = np.expand_dims(g, axis)
        np.put_along_axis(grad, index, g, axis=axis)
        return (grad,)
    return Tensor._result(out, (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f'cannot reshape {x.shape} to {shape}') from exc
    return Tensor._result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return Tensor._result(np.transpose(x.data, axes), (x,),
                          lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f'cannot concatenate {[t.shape for t in tensors]} on axis {axis}'
        ) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return Tensor._result(out, tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f'cannot stack {[t.shape for t in tensors]}') from exc

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return Tensor._result(out, tensors, backward)


def getitem(x, key):
    x = as_tensor(x)
    out = x.data[key]

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, key, g)
        return (grad,)
    return Tensor._result(out, (x,), backward)


def pad(x, widths):
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    x = as_tensor(x)
    window = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return Tensor._result(np.pad(x.data, widths), (x,),
                          lambda g: (g[window],))


def contract(in_subs, output, arrays):
    """Einsum whose sums run in a fixed order.

    ``np.einsum`` only forms products here. The first summed index is walked
    one value at a time and the partial results are added left to right;
    any further summed indices are folded with ``ordered_sum`` inside each
    step, which also bounds the size of the product tensor.
    """
    letters = list(dict.fromkeys(''.join(in_subs)))
    summed = [c for c in letters if c not in output]
    if not summed:
        return np.einsum(','.join(in_subs) + '->' + output, *arrays,
                         optimize=False)
    lead, rest = summed[0], ''.join(summed[1:])
    extents = {a.shape[s.index(lead)] for s, a in zip(in_subs, arrays)
               if lead in s}
    extent = max(extents)
    if not extents <= {1, extent}:
        raise ValueError(f'index {lead!r} has extents {sorted(extents)}')
    if extent == 0:
        return np.einsum(','.join(in_subs) + '->' + output, *arrays,
                         optimize=False)
    expr = ','.join(s.replace(lead, '') for s in in_subs) + '->' + rest + output
    folded = tuple(range(len(rest)))
    total = None
    for k in range(extent):
        parts = [np.take(a, min(k, a.shape[s.index(lead)] - 1),
                         axis=s.index(lead)) if lead in s else a
                 for s, a in zip(in_subs, arrays)]
        term = np.einsum(expr, *parts, optimize=False)
        if rest:
            term = ordered_sum(term, axis=folded)
        if total is None:
            total = np.array(term, dtype=np.float64)
        else:
            total += term
    return total


def einsum(subscripts, *operands):
    """Einsum with explicit output, summed through ``contract``; each
    operand's grad is another contraction of the upstream gradient with the
    remaining operands."""
    inputs, arrow, output = subscripts.replace(' ', '').partition('->')
    if not arrow:
        raise ContractError('einsum needs an explicit output')
    in_subs = inputs.split(',')
    tensors = [as_tensor(o) for o in operands]
    if len(in_subs) != len(tensors):
        raise ContractError('einsum operand count mismatch')
    for subs in in_subs:
        if len(set(subs)) != len(subs):
            raise ContractError(f'repeated index in einsum operand {subs!r}')
    try:
        out = contract(in_subs, output, [t.data for t in tensors])
    except ValueError as exc:
        raise DimensionError(
            f'einsum {subscripts} on {[t.shape for t in tensors]}') from exc

    def backward(g):
        grads = []
        for i, t in enumerate(tensors):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [(s, tensors[j].data) for j, s in enumerate(in_subs)
                      if j != i]
            available = set(output).union(*(set(s) for s, _ in others))
            target = ''.join(c for c in in_subs[i] if c in available)
            grad = contract([output] + [s for s, _ in others], target,
                            [g] + [d for _, d in others])
            for k, c in enumerate(target):
                if t.shape[in_subs[i].index(c)] == 1 and grad.shape[k] != 1:
                    grad = ordered_sum(grad, axis=k, keepdims=True)
            if grad.shape != t.shape:
                # indices absent from the grad or seen at extent 1 broadcast
                kept = [grad.shape[target.index(c)] if c in available else 1
                        for c in in_subs[i]]
                grad = np.broadcast_to(grad.reshape(kept), t.shape)
            grads.append(grad)
        return grads
    return Tensor._result(out, tensors, backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(ordered_sum(np.exp(shifted), axis=axis,
                                       keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * ordered_sum(g, axis=axis, keepdims=True),)
    return Tensor._result(out, (x,), backward)


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / ordered_sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - ordered_sum(g * out, axis=axis, keepdims=True)),)
    return Tensor._result(out, (x,), backward)


# layer primitives -------------------------------------------------------------

_LETTERS = 'abcdefghijklmnopqrstuvwxy'


def linear_along_last(x, w, b=None):
    """y[..., j] = sum_i x[..., i] w[i, j] + b[j]."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f'linear map {w.shape} does not accept input {x.shape}')
    lead = _LETTERS[:x.ndim - 1]
    y = einsum(f'{lead}z,zo->{lead}o', x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f'bias {b.shape} for output {w.shape[1]}')
        y = y + b
    return y


def conv2d_3x3(x, w, b=None):
    """Cross-correlation with a 3x3 kernel and zero padding of one."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3:
        raise DimensionError(f'conv2d_3x3 expects (H, W, C), got {x.shape}')
    if w.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[2]:
        raise DimensionError(
            f'kernel {w.shape} does not match input channels {x.shape[2]}')
    height, width, _ = x.shape
    padded = pad(x, ((1, 1), (1, 1), (0, 0)))
    taps = stack([padded[dy:dy + height, dx:dx + width, :]
                  for dy in range(3) for dx in range(3)], axis=2)
    kernel = reshape(w, (9, w.shape[2], w.shape[3]))
    y = einsum('hwkc,kco->hwo', taps, kernel)
    if b is not None:
        y = y + b
    return y


def norm_affine(x, gamma, beta, eps=1e-5):
    """Per-channel normalization with statistics of this call only."""
    x = as_tensor(x)
    mu = mean(x, axis=(0, 1), keepdims=True)
    centered = x - mu
    var = mean(square(centered), axis=(0, 1), keepdims=True)
    return centered / sqrt(var + eps) * gamma + beta


def global_max_pool(x):
    x = as_tensor(x)
    height, width, channels = x.shape
    flat = reshape(x, (height * width, channels))
    return reshape(max_along(flat, 0), (1, 1, channels))


def channel_max_pool(x):
    return max_along(x, 2, keepdims=True)


def avg_pool_global(x):
    return mean(x, axis=(0, 1), keepdims=True)


@functools.lru_cache(maxsize=None)
def interpolation_matrix(source, target):
    """Rows hold the align-corners-false bilinear weights of one output
    coordinate over the ``source`` input coordinates."""
    matrix = np.zeros((target, source))
    scale = source / target
    for i in range(target):
        position = max((i + 0.5) * scale - 0.5, 0.0)
        low = min(int(math.floor(position)), source - 1)
        high = min(low + 1, source - 1)
        frac = position - low
        matrix[i, low] += 1.0 - frac
        matrix[i, high] += frac
    matrix.flags.writeable = False
    return matrix


@functools.lru_cache(maxsize=None)
def pooling_matrix(source):
    """Stride-2 average pooling; an odd trailing row is averaged alone."""
    target = (source + 1) // 2
    matrix = np.zeros((target, source))
    for i in range(target):
        window = range(2 * i, min(2 * i + 2, source))
        for j in window:
            matrix[i, j] = 1.0 / len(window)
    matrix.flags.writeable = False
    return matrix


def separable(x, rows, cols):
    """Apply ``rows`` along the first spatial axis and ``cols`` along the
    second: y = rows . x . cols^T per channel."""
    y = einsum('ah,hwc->awc', rows, x)
    return einsum('bw,awc->abc', cols, y)


def bilinear_upsample(x, height, width):
    x = as_tensor(x)
    if x.shape[:2] == (height, width):
        return x
    return separable(x, interpolation_matrix(x.shape[0], height),
                     interpolation_matrix(x.shape[1], width))


def avg_pool2(x):
    x = as_tensor(x)
    return separable(x, pooling_matrix(x.shape[0]), pooling_matrix(x.shape[1]))


def matmul_resolution(a, b):
    """Outer product over the two resolution axes, independent per (t, d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4 or a.shape[1] != 1 or b.shape[0] != 1:
        raise DimensionError(
            f'matmul_resolution expects (H,1,T,D) and (1,W,T,D), '
            f'got {a.shape} and {b.shape}')
    if a.shape[2:] != b.shape[2:]:
        raise DimensionError(
            f'type/capsule axes differ: {a.shape[2:]} vs {b.shape[2:]}')
    return a * b


# differentiation ----------------------------------------------------------------

def _topological(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss):
    """Accumulate d loss / d leaf into every reachable leaf's ``grad``."""
    if loss.data.shape != ():
        raise ContractError(f'backward needs a scalar loss, got {loss.shape}')
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones(())}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, grad in zip(node._parents, node._backward(g)):
            if grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + grad if key in grads else grad


def grad_check(f, parameters, eps=1e-5, max_coords=None, seed=0):
    """Largest |analytic - central difference| / max(1, |central difference|).

    ``f`` maps the current parameter values to a scalar Tensor. When
    ``max_coords`` is set, at most that many coordinates per parameter are
    checked, chosen by a generator seeded with ``seed``.
    """
    if eps <= 0:
        raise ContractError('grad_check needs eps > 0')
    parameters = list(parameters)
    for p in parameters:
        p.zero_grad()
    backward(f())
    analytic = [p.grad.copy() for p in parameters]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, grad in zip(parameters, analytic):
            size = p.data.size
            if max_coords is None or size <= max_coords:
                coords = range(size)
            else:
                coords = np.sort(rng.choice(size, max_coords, replace=False))
            for k in coords:
                original = p.data.flat[k]
                p.data.flat[k] = original + eps
                plus = f().item()
                p.data.flat[k] = original - eps
                minus = f().item()
                p.data.flat[k] = original
                numeric = (plus - minus) / (2.0 * eps)
                error = abs(grad.flat[k] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, error)
    for p in parameters:
        p.zero_grad()
    return worst
