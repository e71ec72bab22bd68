"""
Neural network operations

All spatial tensors are NHWC: [batch, height (i / y), width (j / x), channels].
Convolutions use cross-correlation semantics (no kernel flip) and weights
laid out [k, k, c_in, c_out]; transposed convolutions take [k, k, c_out, c_in],
i.e. the weight of the convolution they are the adjoint of.

Every operation returns a Tensor through tensor.apply_op, so it records
itself on the active Graph when an input requires a gradient.

Operations:
    add_coords, conv2d, coord_conv, conv2d_transpose, max_pool2,
    global_avg_pool, dense, relu, tanh_act, sigmoid, batch_norm,
    softmax_xent, sigmoid_xent_pixelwise, mse_loss, param_count
"""

import logging
import math
from functools import lru_cache
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np

from coordconv_lab.tensor import ShapeError, Tensor, apply_op

logger = logging.getLogger(__name__)

PADDINGS = ('same', 'valid')
COORD_PATHS = ('split', 'concat')

ArrayLike = Union[Tensor, np.ndarray]


class ConvSpec(NamedTuple):
    k: int
    c_in: int
    c_out: int
    stride: int = 1
    padding: str = 'same'
    bias: bool = True

    @property
    def weight_count(self) -> int:
        return self.c_in * self.c_out * self.k ** 2


class CoordSpec(NamedTuple):
    with_r: bool = False
    r_normalized: bool = True

    @property
    def d(self) -> int:
        return 3 if self.with_r else 2


class BatchNormState:
    """Learned scale/shift plus momentum-updated running statistics"""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.9, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name='gamma')
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name='beta')
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def update(self, mean: np.ndarray, var: np.ndarray):
        m = self.momentum
        self.running_mean = (m * self.running_mean + (1.0 - m) * mean).astype(self.running_mean.dtype)
        self.running_var = (m * self.running_var + (1.0 - m) * var).astype(self.running_var.dtype)


def _data(value: ArrayLike) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


# geometry

def conv_output_extent(size: int, k: int, stride: int, padding: str) -> Tuple[int, int, int]:
    """(output extent, pad before, pad after) of a convolution along one axis"""
    if stride < 1 or k < 1:
        raise ShapeError(f"kernel and stride must be positive, got k={k}, stride={stride}")
    if padding == 'same':
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == 'valid':
        if size < k:
            raise ShapeError(f"valid convolution needs extent >= {k}, got {size}")
        return (size - k) // stride + 1, 0, 0
    raise ValueError(f"padding must be one of {PADDINGS}, got {padding!r}")


def transpose_output_extent(size: int, k: int, stride: int, padding: str) -> Tuple[int, int, int]:
    """(output extent, pad before, pad after) of the forward convolution being transposed"""
    if padding == 'same':
        out = size * stride
    elif padding == 'valid':
        out = (size - 1) * stride + k
    else:
        raise ValueError(f"padding must be one of {PADDINGS}, got {padding!r}")
    _, before, after = conv_output_extent(out, k, stride, padding)
    return out, before, after


def _pad(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    if top == bottom == left == right == 0:
        return x
    return np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))


def _taps(offset: int, count: int, stride: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


# shift-and-matmul kernels: one tensordot per kernel tap

def _conv_core(xp: np.ndarray, w: np.ndarray, stride: int, oh: int, ow: int) -> np.ndarray:
    k = w.shape[0]
    out = np.zeros((xp.shape[0], oh, ow, w.shape[3]), dtype=np.result_type(xp, w))
    for a in range(k):
        rows = _taps(a, oh, stride)
        for b in range(k):
            out += np.tensordot(xp[:, rows, _taps(b, ow, stride), :], w[a, b], axes=([3], [0]))
    return out


def _conv_core_input_grad(g: np.ndarray, w: np.ndarray, stride: int, padded_shape) -> np.ndarray:
    k = w.shape[0]
    oh, ow = g.shape[1], g.shape[2]
    dxp = np.zeros(padded_shape, dtype=np.result_type(g, w))
    for a in range(k):
        rows = _taps(a, oh, stride)
        for b in range(k):
            dxp[:, rows, _taps(b, ow, stride), :] += np.tensordot(g, w[a, b], axes=([3], [1]))
    return dxp


def _conv_core_weight_grad(xp: np.ndarray, g: np.ndarray, stride: int, k: int) -> np.ndarray:
    oh, ow = g.shape[1], g.shape[2]
    dw = np.empty((k, k, xp.shape[3], g.shape[3]), dtype=np.result_type(xp, g))
    for a in range(k):
        rows = _taps(a, oh, stride)
        for b in range(k):
            dw[a, b] = np.tensordot(xp[:, rows, _taps(b, ow, stride), :], g, axes=([0, 1, 2], [0, 1, 2]))
    return dw


def _check_conv(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Optional[Tensor], weight_shape):
    if x.ndim != 4:
        raise ShapeError(f"expected NHWC input, got shape {x.shape}")
    if x.shape[3] != spec.c_in:
        raise ShapeError(f"channel mismatch: input has {x.shape[3]}, spec expects {spec.c_in}")
    if tuple(weights.shape) != tuple(weight_shape):
        raise ShapeError(f"weight shape {weights.shape} != expected {tuple(weight_shape)}")
    if spec.bias != (bias is not None):
        raise ValueError(f"spec.bias={spec.bias} but bias tensor {'missing' if bias is None else 'given'}")
    if bias is not None and bias.shape != (spec.c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.c_out},)")


def _parents(*tensors):
    return tuple(t for t in tensors if t is not None)


# coordinates

@lru_cache(maxsize=64)
def coordinate_channels(h: int, w: int, with_r: bool = False, r_normalized: bool = True,
                        dtype: str = 'float32') -> np.ndarray:
    """Read-only [h, w, d] block of i', j' (and r) channels"""
    i = np.arange(h, dtype=np.float64)
    j = np.arange(w, dtype=np.float64)
    # a single row/column sits at the midpoint
    i_scaled = 2.0 * i / (h - 1) - 1.0 if h > 1 else np.zeros(h)
    j_scaled = 2.0 * j / (w - 1) - 1.0 if w > 1 else np.zeros(w)
    channels = [
        np.broadcast_to(i_scaled[:, None], (h, w)),
        np.broadcast_to(j_scaled[None, :], (h, w)),
    ]
    if with_r:
        r = np.sqrt((i[:, None] - h / 2.0) ** 2 + (j[None, :] - w / 2.0) ** 2)
        if r_normalized:
            r = r / math.sqrt((h / 2.0) ** 2 + (w / 2.0) ** 2)
        channels.append(r)
    coords = np.stack(channels, axis=-1).astype(dtype)
    coords.setflags(write=False)
    return coords


def add_coords(x: Tensor, spec: CoordSpec = CoordSpec()) -> Tensor:
    """Concatenate i', j' (and optionally r) channels after the input channels"""
    if x.ndim != 4:
        raise ShapeError(f"expected NHWC input, got shape {x.shape}")
    n, h, w, c = x.shape
    coords = coordinate_channels(h, w, spec.with_r, spec.r_normalized, x.dtype.name)
    out = np.concatenate([x.data, np.broadcast_to(coords, (n, h, w, spec.d))], axis=3)
    return apply_op(out, (x,), lambda g: (g[..., :c],), 'add_coords')


# convolution family

def conv2d(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    k, s = spec.k, spec.stride
    _check_conv(x, spec, weights, bias, (k, k, spec.c_in, spec.c_out))
    _, h, w, _ = x.shape
    oh, top, bottom = conv_output_extent(h, k, s, spec.padding)
    ow, left, right = conv_output_extent(w, k, s, spec.padding)
    xp = _pad(x.data, top, bottom, left, right)
    kernel = np.ascontiguousarray(weights.data)

    out = _conv_core(xp, kernel, s, oh, ow)
    if bias is not None:
        out += bias.data

    def backward(g):
        dx = dw = db = None
        if x.requires_grad:
            dx = _conv_core_input_grad(g, kernel, s, xp.shape)[:, top:top + h, left:left + w, :]
        if weights.requires_grad:
            dw = _conv_core_weight_grad(xp, g, s, k)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 1, 2))
        return (dx, dw, db)

    return apply_op(out, _parents(x, weights, bias), backward, 'conv2d')


def coord_conv(x: Tensor, conv_spec: ConvSpec, coord_spec: CoordSpec, weights: Tensor,
               bias: Optional[Tensor] = None, path: str = 'split') -> Tensor:
    """
    conv2d over add_coords(x); conv_spec.c_in counts data channels only and
    weights are [k, k, c_in + d, c_out].

    path='concat' evaluates the literal concatenation. path='split' convolves
    the data channels and the coordinate channels separately and sums them;
    the coordinate contribution is input independent, so it is computed once
    for a single image and broadcast over the batch. With the coordinate
    weight slice at zero the split path equals conv2d on x bit for bit.
    """
    k, s, c, d = conv_spec.k, conv_spec.stride, conv_spec.c_in, coord_spec.d
    full_spec = conv_spec._replace(c_in=c + d)
    if path == 'concat':
        return conv2d(add_coords(x, coord_spec), full_spec, weights, bias)
    if path != 'split':
        raise ValueError(f"path must be one of {COORD_PATHS}, got {path!r}")

    _check_conv(x, conv_spec, weights, bias, (k, k, c + d, conv_spec.c_out))
    _, h, w, _ = x.shape
    oh, top, bottom = conv_output_extent(h, k, s, conv_spec.padding)
    ow, left, right = conv_output_extent(w, k, s, conv_spec.padding)
    xp = _pad(x.data, top, bottom, left, right)
    coords = coordinate_channels(h, w, coord_spec.with_r, coord_spec.r_normalized, x.dtype.name)
    cp = _pad(coords[None], top, bottom, left, right)
    w_data = np.ascontiguousarray(weights.data[:, :, :c, :])
    w_coord = np.ascontiguousarray(weights.data[:, :, c:, :])

    out = _conv_core(xp, w_data, s, oh, ow)
    out += _conv_core(cp, w_coord, s, oh, ow)
    if bias is not None:
        out += bias.data

    def backward(g):
        dx = dw = db = None
        if x.requires_grad:
            dx = _conv_core_input_grad(g, w_data, s, xp.shape)[:, top:top + h, left:left + w, :]
        if weights.requires_grad:
            dw = np.empty_like(weights.data)
            dw[:, :, :c, :] = _conv_core_weight_grad(xp, g, s, k)
            dw[:, :, c:, :] = _conv_core_weight_grad(cp, g.sum(axis=0, keepdims=True), s, k)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 1, 2))
        return (dx, dw, db)

    return apply_op(out, _parents(x, weights, bias), backward, 'coord_conv')


def conv2d_transpose(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Adjoint of conv2d with the same spec: maps spec.c_in channels up to spec.c_out"""
    k, s = spec.k, spec.stride
    _check_conv(x, spec, weights, bias, (k, k, spec.c_out, spec.c_in))
    n, h, w, _ = x.shape
    oh, top, bottom = transpose_output_extent(h, k, s, spec.padding)
    ow, left, right = transpose_output_extent(w, k, s, spec.padding)
    padded_shape = (n, oh + top + bottom, ow + left + right, spec.c_out)
    kernel = np.ascontiguousarray(weights.data)

    out = _conv_core_input_grad(x.data, kernel, s, padded_shape)
    out = np.ascontiguousarray(out[:, top:top + oh, left:left + ow, :])
    if bias is not None:
        out += bias.data

    def backward(g):
        dx = dw = db = None
        gp = _pad(g, top, bottom, left, right)
        if x.requires_grad:
            dx = _conv_core(gp, kernel, s, h, w)
        if weights.requires_grad:
            dw = _conv_core_weight_grad(gp, x.data, s, k)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 1, 2))
        return (dx, dw, db)

    return apply_op(out, _parents(x, weights, bias), backward, 'conv2d_transpose')


# pooling

def max_pool2(x: Tensor) -> Tensor:
    """Max over non-overlapping 2x2 windows; ties route the gradient to the first element"""
    if x.ndim != 4:
        raise ShapeError(f"expected NHWC input, got shape {x.shape}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    winner = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, winner, axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros((n, h2, w2, c, 4), dtype=g.dtype)
        np.put_along_axis(routed, winner, g[..., None], axis=-1)
        return (routed.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c),)

    return apply_op(out, (x,), backward, 'max_pool2')


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"expected NHWC input, got shape {x.shape}")
    n, h, w, c = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), (n, h, w, c)).copy(),)

    return apply_op(x.data.mean(axis=(1, 2)), (x,), backward, 'global_avg_pool')


# dense and activations

def dense(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"dense expects [n, f], got shape {x.shape}")
    if weights.ndim != 2 or weights.shape[0] != x.shape[1]:
        raise ShapeError(f"feature mismatch: input has {x.shape[1]}, weights are {weights.shape}")
    if bias is not None and bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} != ({weights.shape[1]},)")

    out = x.data @ weights.data
    if bias is not None:
        out += bias.data

    def backward(g):
        dx = g @ weights.data.T if x.requires_grad else None
        dw = x.data.T @ g if weights.requires_grad else None
        db = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (dx, dw, db)

    return apply_op(out, _parents(x, weights, bias), backward, 'dense')


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return apply_op(np.where(active, x.data, 0).astype(x.dtype), (x,), lambda g: (g * active,), 'relu')


def tanh_act(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return apply_op(t, (x,), lambda g: (g * (1 - t * t),), 'tanh')


def _logistic(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    ez = np.exp(z[~positive])
    out[~positive] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    p = _logistic(x.data)
    return apply_op(p, (x,), lambda g: (g * p * (1 - p),), 'sigmoid')


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel (last axis) normalization; training mode uses and records batch statistics"""
    channels = x.shape[-1]
    if channels != state.channels:
        raise ShapeError(f"batch_norm over {state.channels} channels got input with {channels}")
    axes = tuple(range(x.ndim - 1))
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.update(mean, var)
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x.data - mean) * inv_std
    gamma, beta = state.gamma, state.beta
    out = gamma.data * xhat + beta.data

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data
        if training:
            m = x.size // channels
            dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv_std
        return (dx, dgamma, dbeta)

    return apply_op(out, (x, gamma, beta), backward, 'batch_norm')


# losses

def softmax_xent(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]"""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_xent expects [n, classes], got shape {logits.shape}")
    n, classes = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    if n and (targets.min() < 0 or targets.max() >= classes):
        raise ValueError(f"target index out of range [0, {classes})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = (log_norm - shifted[rows, targets]).mean()

    def backward(g):
        p = np.exp(shifted - log_norm[:, None])
        p[rows, targets] -= 1
        return (g * p / n,)

    return apply_op(loss, (logits,), backward, 'softmax_xent')


def sigmoid_xent_pixelwise(logits: Tensor, targets: ArrayLike) -> Tensor:
    """Mean binary cross-entropy over all pixels: max(z,0) - z*t + log(1 + exp(-|z|))"""
    t = _data(targets).astype(logits.dtype, copy=False)
    if t.shape != logits.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {logits.shape}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("sigmoid_xent_pixelwise needs binary targets")
    z = logits.data
    loss = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()
    count = z.size

    def backward(g):
        return (g * (_logistic(z) - t) / count,)

    return apply_op(loss, (logits,), backward, 'sigmoid_xent')


def mse_loss(pred: Tensor, target: ArrayLike) -> Tensor:
    t = _data(target).astype(pred.dtype, copy=False)
    if t.shape != pred.shape:
        raise ShapeError(f"target shape {t.shape} != prediction shape {pred.shape}")
    diff = pred.data - t
    count = diff.size
    return apply_op((diff * diff).mean(), (pred,), lambda g: (g * 2 * diff / count,), 'mse')


# parameter counting

def coord_conv_param_count(c: int, d: int, c_out: int, k: int, bias: bool = True) -> int:
    return (c + d) * c_out * k * k + (c_out if bias else 0)


def layer_param_count(kind: str, c_in: int, c_out: int = 0, k: int = 1, d: int = 0, bias: bool = True) -> int:
    """Trainable scalars of one layer, biases and batch-norm scale/shift included"""
    if kind in ('conv', 'deconv'):
        return c_in * c_out * k * k + (c_out if bias else 0)
    if kind == 'coordconv':
        return coord_conv_param_count(c_in, d, c_out, k, bias)
    if kind == 'dense':
        return c_in * c_out + (c_out if bias else 0)
    if kind == 'batchnorm':
        return 2 * c_in
    return 0


def param_count(arch) -> int:
    """Exact trainable parameter count of an architecture"""
    return sum(entry.params for entry in arch.trace())
