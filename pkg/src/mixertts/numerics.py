#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
The ``numerics`` module is the small differentiable tensor core that all of
mixertts' model math runs on. A ``Tensor`` wraps a row-major ``numpy`` array.
Every differentiable operation allocates a new output tensor and remembers
(on the output) how to send gradients back to its inputs. Calling
``backward`` on a scalar loss collects these records into a ``Tape`` in
topological order and replays it in reverse, which populates ``.grad`` on
every leaf tensor that was created with ``requires_grad=True``.

Only the operations the Mixer-TTS graph needs are implemented. There are no
higher-order gradients and no in-place operations on graph inputs.

Tensors default to ``float32``. The gradient checks in ``mixertts.debug``
switch to ``float64`` with the ``default_dtype`` context manager::

    with default_dtype(np.float64):
        x = Tensor(np.random.randn(3, 4), requires_grad=True)
        loss = gelu(x).sum()
        backward(loss)
"""

import contextlib
import contextvars
import math
from collections import OrderedDict, namedtuple

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError, GradientError, NumericalError

_DTYPE = contextvars.ContextVar('mixertts_default_dtype', default=np.float32)

SQRT_2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def get_default_dtype():
    """returns the floating point type new tensors are created with"""
    return _DTYPE.get()


@contextlib.contextmanager
def default_dtype(dtype):
    """
    temporarily changes the floating point type of newly created tensors
    (e.g. to ``np.float64`` for finite-difference checks).
    """
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NumericalError(
            "non-finite values produced by '{0}' (shape {1})".format(op, data.shape))


class Tensor(object):
    """
    an n-dimensional array of reals that may take part in gradient
    computation.

    Parameters
    ----------
    data : array_like
        the values; they are copied and cast to ``dtype``
    requires_grad : bool
        if True, ``backward`` will populate ``self.grad``
    name : str or None
        optional name, used in error messages and checkpoints
    dtype : numpy dtype or None
        defaults to ``get_default_dtype()``
    """
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if dtype is None:
            dtype = get_default_dtype()
        self.data = np.array(data, dtype=dtype)
        _check_finite(self.data, name or 'tensor')
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None
        self._consumed = False

    @classmethod
    def _from_op(cls, data, parents, backward_fn, op):
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._consumed = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward_fn
            out._op = op
        else:
            out._parents = ()
            out._backward = None
            out._op = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        """returns a copy of the values as a numpy array"""
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 \
            else self.data.item()

    def detach(self):
        """returns a tensor with the same values that is cut off the tape"""
        return Tensor._from_op(self.data, (), None, 'detach')

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return "Tensor(shape={0}, dtype={1}, requires_grad={2})".format(
            self.shape, self.dtype, self.requires_grad)

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar, all delegating to the module level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _lift(value, like):
    """wraps a constant so it can meet ``like`` in an operation"""
    if isinstance(value, Tensor):
        return value
    return Tensor._from_op(np.asarray(value, dtype=like.dtype), (), None, 'const')


def as_tensor(value, dtype=None):
    """returns ``value`` if it already is a ``Tensor``, else a constant tensor"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _unbroadcast(grad, shape):
    """sums ``grad`` over the axes that were broadcast to reach its shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape(object):
    """
    the ordered record of executed differentiable operations that a loss
    depends on. ``nodes`` is in topological order (inputs before the
    operations that consume them); ``run`` replays it backwards, so an
    operation's backward step only runs after all of its consumers' steps.
    """
    def __init__(self, loss):
        self.loss = loss
        self.nodes = []
        visited = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))

    @property
    def ops(self):
        """names of the recorded operations, in execution order"""
        return [node._op for node in self.nodes if node._backward is not None]

    @property
    def leaves(self):
        return [node for node in self.nodes if node._backward is None]

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def run(self, accumulate=False):
        grads = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                grad = np.array(grad, dtype=node.dtype).reshape(node.shape)
                if accumulate and node.grad is not None:
                    node.grad = node.grad + grad
                else:
                    node.grad = grad
                continue
            parent_grads = node._backward(grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad


def backward(loss, accumulate=False):
    """
    computes d loss / d leaf for every ``requires_grad`` leaf reachable from
    ``loss`` and stores it in the leaf's ``grad``.

    Parameters
    ----------
    loss : Tensor
        a scalar tensor produced by differentiable operations
    accumulate : bool
        add to already populated gradients instead of refusing to run

    Returns
    -------
    tape : Tape
        the replayed tape

    Raises
    ------
    GradientError
        if ``loss`` is not a scalar, is detached, was already back-propagated
        or if leaf gradients are still populated from an earlier call (and
        ``accumulate`` is False)
    """
    if loss.size != 1:
        raise GradientError(
            "backward needs a scalar loss, got shape {0}".format(loss.shape))
    if not loss.requires_grad:
        raise GradientError("loss is detached: no tensor on its tape requires grad")
    if loss._consumed:
        raise GradientError("backward already ran for this loss")
    tape = Tape(loss)
    if not accumulate:
        stale = [leaf for leaf in tape.leaves if leaf.grad is not None]
        if stale:
            raise GradientError(
                "{0} leaf tensor(s) still hold gradients from an earlier "
                "backward call; reset them with zero_grad()".format(len(stale)))
    tape.run(accumulate=accumulate)
    loss._consumed = True
    return tape


# elementwise arithmetic

def add(a, b):
    a = _lift(a, b) if isinstance(b, Tensor) else as_tensor(a)
    b = _lift(b, a)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return Tensor._from_op(out, (a, b), grad_fn, 'add')


def sub(a, b):
    a = _lift(a, b) if isinstance(b, Tensor) else as_tensor(a)
    b = _lift(b, a)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return Tensor._from_op(out, (a, b), grad_fn, 'sub')


def mul(a, b):
    a = _lift(a, b) if isinstance(b, Tensor) else as_tensor(a)
    b = _lift(b, a)
    out = a.data * b.data

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))
    return Tensor._from_op(out, (a, b), grad_fn, 'mul')


def div(a, b):
    a = _lift(a, b) if isinstance(b, Tensor) else as_tensor(a)
    b = _lift(b, a)
    out = a.data / b.data

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return Tensor._from_op(out, (a, b), grad_fn, 'div')


def exp(x):
    out = np.exp(x.data)

    def grad_fn(g):
        return (g * out,)
    return Tensor._from_op(out, (x,), grad_fn, 'exp')


def tsum(x, axis=None, keepdims=False):
    """sum over ``axis`` (all axes if None)"""
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return Tensor._from_op(np.asarray(out), (x,), grad_fn, 'sum')


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return div(tsum(x, axis=axis, keepdims=keepdims), float(count))


def reshape(x, shape):
    out = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(x.shape),)
    return Tensor._from_op(out, (x,), grad_fn, 'reshape')


def transpose(x, axes=None):
    out = np.transpose(x.data, axes)

    def grad_fn(g):
        if axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(axes)),)
    return Tensor._from_op(out, (x,), grad_fn, 'transpose')


def getitem(x, index):
    """numpy-style indexing (slices, integer arrays) with scatter-add backward"""
    out = x.data[index]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)
    return Tensor._from_op(np.asarray(out), (x,), grad_fn, 'getitem')


def stop_gradient(x):
    """same values, no gradient flows into ``x``"""
    return x.detach()


# model operations

def matmul(a, b):
    """batched matrix product with broadcasting over leading axes"""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(
            "matmul: {0} and {1} don't fit together".format(a.shape, b.shape))
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return Tensor._from_op(out, (a, b), grad_fn, 'matmul')


def linear(x, W, b=None):
    """
    ``y = xW + b`` over the last axis of ``x``.

    :type x: ``Tensor`` of shape [..., In]
    :type W: ``Tensor`` of shape [In, Out]
    :type b: ``Tensor`` of shape [Out] or None
    """
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(
            "linear: input of shape {0} doesn't fit weight of shape {1}".format(
                x.shape, W.shape))
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(
            "linear: bias of shape {0} doesn't fit weight of shape {1}".format(
                b.shape, W.shape))
    out = np.matmul(x.data, W.data)
    if b is not None:
        out = out + b.data
    n_in, n_out = W.shape

    def grad_fn(g):
        g2 = g.reshape(-1, n_out)
        gx = np.matmul(g, W.data.T)
        gW = np.matmul(x.data.reshape(-1, n_in).T, g2)
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gW, gb
    parents = (x, W, b) if b is not None else (x, W)
    return Tensor._from_op(out, parents, grad_fn, 'linear')


def _pad_time(data, pad):
    widths = [(0, 0)] * data.ndim
    widths[-2] = (pad, pad)
    return np.pad(data, widths)


def depthwise_conv1d(x, kernels, bias):
    """
    per-channel 1D convolution along the time axis with zero same-padding,
    so the output has as many frames as the input. Channel ``c`` only uses
    ``kernels[c]``.

    Parameters
    ----------
    x : Tensor
        [T, C] or [B, T, C]
    kernels : Tensor
        [C, K] with odd K
    bias : Tensor
        [C]

    Returns
    -------
    Tensor
        same shape as ``x``
    """
    channels, K = kernels.shape
    if K % 2 == 0:
        raise ConfigError("depthwise_conv1d needs an odd kernel size, got {0}".format(K))
    if x.shape[-1] != channels or bias.shape != (channels,):
        raise DimensionError(
            "depthwise_conv1d: input {0}, kernels {1} and bias {2} disagree on "
            "the channel count".format(x.shape, kernels.shape, bias.shape))
    T = x.shape[-2]
    pad = (K - 1) // 2
    xp = _pad_time(x.data, pad)
    out = np.zeros_like(x.data) + bias.data
    for k in range(K):
        out = out + xp[..., k:k + T, :] * kernels.data[:, k]

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernels.data)
        reduce_axes = tuple(range(g.ndim - 1))
        for k in range(K):
            gxp[..., k:k + T, :] += g * kernels.data[:, k]
            gk[:, k] = (g * xp[..., k:k + T, :]).sum(axis=reduce_axes)
        return gxp[..., pad:pad + T, :], gk, g.sum(axis=reduce_axes)
    return Tensor._from_op(out, (x, kernels, bias), grad_fn, 'depthwise_conv1d')


def conv1d(x, W, b):
    """
    dense 1D convolution with zero same-padding.

    :type x: ``Tensor`` of shape [T, Cin] or [B, T, Cin]
    :type W: ``Tensor`` of shape [K, Cin, Cout], K odd
    :type b: ``Tensor`` of shape [Cout]
    :rtype: ``Tensor`` of shape [..., T, Cout]
    """
    K, c_in, c_out = W.shape
    if K % 2 == 0:
        raise ConfigError("conv1d needs an odd kernel size, got {0}".format(K))
    if x.shape[-1] != c_in or b.shape != (c_out,):
        raise DimensionError(
            "conv1d: input {0}, weight {1} and bias {2} don't fit together".format(
                x.shape, W.shape, b.shape))
    T = x.shape[-2]
    pad = (K - 1) // 2
    xp = _pad_time(x.data, pad)
    out = np.zeros(x.shape[:-1] + (c_out,), dtype=x.dtype) + b.data
    for k in range(K):
        out = out + np.matmul(xp[..., k:k + T, :], W.data[k])

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gW = np.zeros_like(W.data)
        g2 = g.reshape(-1, c_out)
        for k in range(K):
            gxp[..., k:k + T, :] += np.matmul(g, W.data[k].T)
            gW[k] = np.matmul(xp[..., k:k + T, :].reshape(-1, c_in).T, g2)
        return gxp[..., pad:pad + T, :], gW, g2.sum(axis=0)
    return Tensor._from_op(out, (x, W, b), grad_fn, 'conv1d')


def layer_norm(x, gamma, beta, eps=1e-5):
    """
    normalizes every position over the channel (last) axis, then applies the
    affine ``gamma``/``beta`` transform.
    """
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive, got {0}".format(eps))
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            "layer_norm: input {0} doesn't fit gamma {1} / beta {2}".format(
                x.shape, gamma.shape, beta.shape))
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        gxhat = g * gamma.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)
    return Tensor._from_op(out, (x, gamma, beta), grad_fn, 'layer_norm')


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / SQRT_2)) + x * INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x):
    """exact GELU, ``x * Phi(x)`` with the Gaussian CDF taken from erf"""
    out = x.data * 0.5 * (1.0 + erf(x.data / SQRT_2))

    def grad_fn(g):
        return (g * _gelu_grad(x.data),)
    return Tensor._from_op(out.astype(x.dtype), (x,), grad_fn, 'gelu')


def relu(x):
    out = np.maximum(x.data, 0)

    def grad_fn(g):
        return (g * (x.data > 0),)
    return Tensor._from_op(out, (x,), grad_fn, 'relu')


def _normalize_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise DimensionError(
            "axis {0} is out of range for a {1}-dimensional tensor".format(axis, ndim))
    return axis % ndim


def log_softmax(x, axis=-1):
    """numerically stable log-softmax (max subtraction) over ``axis``"""
    axis = _normalize_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return Tensor._from_op(out, (x,), grad_fn, 'log_softmax')


def softmax(x, axis=-1):
    axis = _normalize_axis(axis, x.ndim)
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return Tensor._from_op(out, (x,), grad_fn, 'softmax')


def dropout(x, p, training, rng=None):
    """
    zeroes each element with probability ``p`` and scales the survivors by
    ``1 / (1 - p)`` in training mode; identity in eval mode.

    :type rng: ``numpy.random.Generator`` (required when training and p > 0)
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError("dropout probability must be in [0, 1), got {0}".format(p))
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    out = x.data * keep

    def grad_fn(g):
        return (g * keep,)
    return Tensor._from_op(out, (x,), grad_fn, 'dropout')


def sequence_mask(lengths, max_len):
    """
    returns a boolean [B, max_len] array that is True at valid positions.

    :type lengths: ``list`` of ``int``
    """
    lengths = np.asarray(lengths, dtype=np.int64).reshape(-1)
    if np.any(lengths > max_len) or np.any(lengths < 0):
        raise DimensionError(
            "sequence lengths {0} don't fit into {1} positions".format(
                lengths.tolist(), max_len))
    return np.arange(max_len)[None, :] < lengths[:, None]


def apply_sequence_mask(x, lengths):
    """
    zeroes the positions ``t >= lengths[b]`` of a [B, T, ...] tensor; the
    gradient is masked the same way.
    """
    mask = sequence_mask(lengths, x.shape[1])
    if mask.shape[0] != x.shape[0]:
        raise DimensionError(
            "got {0} lengths for a batch of {1}".format(mask.shape[0], x.shape[0]))
    mask = mask.reshape(mask.shape + (1,) * (x.ndim - 2)).astype(x.dtype)
    out = x.data * mask

    def grad_fn(g):
        return (g * mask,)
    return Tensor._from_op(out, (x,), grad_fn, 'apply_sequence_mask')


def embedding(table, ids):
    """
    looks up rows of ``table`` ([V, D]) for an integer array ``ids`` of any
    shape; the result has shape ``ids.shape + (D,)``. Rows used several times
    accumulate their gradients.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(
            "row ids must be in [0, {0}), got range [{1}, {2}]".format(
                table.shape[0], ids.min(), ids.max()))
    out = table.data[ids]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)
    return Tensor._from_op(out, (table,), grad_fn, 'embedding')


gather_rows = embedding


def pairwise_distance(a, b, eps=1e-8):
    """
    Euclidean distances between every row of ``b`` ([T, D]) and every row of
    ``a`` ([N, D]), returned as a [T, N] tensor. ``eps`` keeps the square
    root differentiable for coinciding points.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(
            "pairwise_distance: {0} and {1} don't share a feature axis".format(
                a.shape, b.shape))
    sq = ((b.data * b.data).sum(axis=1)[:, None]
          + (a.data * a.data).sum(axis=1)[None, :]
          - 2.0 * np.matmul(b.data, a.data.T))
    out = np.sqrt(np.maximum(sq, 0.0) + eps)

    def grad_fn(g):
        gsq = g / (2.0 * out)
        gb = 2.0 * (gsq.sum(axis=1)[:, None] * b.data - np.matmul(gsq, a.data))
        ga = 2.0 * (gsq.sum(axis=0)[:, None] * a.data - np.matmul(gsq.T, b.data))
        return ga, gb
    return Tensor._from_op(out, (a, b), grad_fn, 'pairwise_distance')


def mse(pred, target, mask=None, normalizer=None):
    """
    sum of squared errors over the valid (``mask``) elements divided by
    ``normalizer``, which defaults to the number of valid elements.

    :type pred: ``Tensor``
    :type target: ``numpy.ndarray``, broadcastable to ``pred``
    :type mask: ``numpy.ndarray`` of bools/0-1, broadcastable to ``pred``
    """
    target = np.asarray(target, dtype=pred.dtype)
    if mask is None:
        mask = np.ones(pred.shape, dtype=pred.dtype)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=pred.dtype), pred.shape)
    if normalizer is None:
        normalizer = max(float(mask.sum()), 1.0)
    diff = (pred.data - target) * mask
    out = np.asarray((diff * diff).sum() / normalizer, dtype=pred.dtype)

    def grad_fn(g):
        return (g * 2.0 * diff / normalizer,)
    return Tensor._from_op(out, (pred,), grad_fn, 'mse')


def make_op(data, parents, grad_fn, name):
    """
    builds the output of a custom differentiable operation. ``grad_fn``
    maps the output gradient to a tuple of gradients, one per parent.
    """
    return Tensor._from_op(np.asarray(data), tuple(parents), grad_fn, name)


# parameters

ParamSpec = namedtuple('ParamSpec', ['shape', 'init', 'fan_in', 'std'])
ParamSpec.__new__.__defaults__ = ('uniform', None, 1.0)


def scoped(specs_or_params, prefix):
    """prepends ``prefix.`` to every key of a parameter (spec) dictionary"""
    return OrderedDict(('{0}.{1}'.format(prefix, key), value)
                       for key, value in specs_or_params.items())


def subset(params, prefix):
    """returns the entries under ``prefix.`` with the prefix stripped off"""
    start = prefix + '.'
    return OrderedDict((key[len(start):], value)
                       for key, value in params.items() if key.startswith(start))


def initialize(specs, rng):
    """
    creates leaf tensors for a dictionary of ``ParamSpec``s. Uniform weights
    are drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, embedding tables
    from ``N(0, std)``.
    """
    params = OrderedDict()
    dtype = get_default_dtype()
    for name, spec in specs.items():
        if spec.init == 'zeros':
            values = np.zeros(spec.shape)
        elif spec.init == 'ones':
            values = np.ones(spec.shape)
        elif spec.init == 'normal':
            values = rng.normal(0.0, spec.std, size=spec.shape)
        elif spec.init == 'uniform':
            bound = 1.0 / math.sqrt(spec.fan_in)
            values = rng.uniform(-bound, bound, size=spec.shape)
        else:
            raise ConfigError("unknown initializer '{0}' for {1}".format(spec.init, name))
        params[name] = Tensor(values, requires_grad=True, name=name, dtype=dtype)
    return params


def count_specs(specs):
    """number of scalars described by a dictionary of ``ParamSpec``s"""
    return int(sum(np.prod(spec.shape, dtype=np.int64) for spec in specs.values()))


def zero_grad(params):
    for param in params.values():
        param.grad = None


class Module(object):
    """
    base class of the model components. A component describes its
    parameters via ``param_specs`` so they can be counted without being
    allocated; its forward functions take the parameter dictionary
    explicitly.
    """
    def param_specs(self):
        raise NotImplementedError

    def init_parameters(self, rng):
        return initialize(self.param_specs(), rng)

    def count_parameters(self):
        return count_specs(self.param_specs())
