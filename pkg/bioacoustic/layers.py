"""
Hand-written layers with forward and analytic backward passes.

Every layer follows one protocol::

    y, cache = layer.forward(params, x, mode)      # mode: 'train' | 'eval'
    dx, grads = layer.backward(cache, dy)          # grads: {param name: array}

Weights are read from a ModelParams tree by dotted name and copied into the
cache, so backward needs nothing but the cache. Image-like tensors are laid
out (batch, channels, time, frequency).
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ShapeError


def kaiming_uniform(rng, shape, fan_in, gain=math.sqrt(2.0), dtype=np.float64):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    name = ''

    def init(self, params, rng, dtype=np.float64):
        """Register this layer's tensors in ``params``."""

    def forward(self, params, x, mode='train'):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError


def layer_forward(layer, params, x, mode='train'):
    return layer.forward(params, x, mode)


def layer_backward(layer, cache, grad_out):
    return layer.backward(cache, grad_out)


def _check(layer, x, ndim=None, axis=None, size=None):
    if ndim is not None and x.ndim != ndim:
        raise ShapeError(layer, f'{ndim}-D input', x.shape)
    if axis is not None and x.shape[axis] != size:
        raise ShapeError(layer, f'size {size} on axis {axis}', x.shape)


class Conv2d(Layer):
    """Same-padded, stride-1 cross-correlation."""

    def __init__(self, name, in_channels, out_channels, kernel=3):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.pad = kernel // 2

    def init(self, params, rng, dtype=np.float64):
        fan_in = self.in_channels * self.kernel * self.kernel
        shape = (self.out_channels, self.in_channels, self.kernel, self.kernel)
        params.add(f'{self.name}.weight', kaiming_uniform(rng, shape, fan_in, dtype=dtype))
        params.add(f'{self.name}.bias', np.zeros(self.out_channels, dtype=dtype))

    def _columns(self, xp, shape):
        b, c, h, w = shape
        k = self.kernel
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))
        return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * k * k)

    def forward(self, params, x, mode='train'):
        _check(self.name, x, ndim=4, axis=1, size=self.in_channels)
        weight = params[f'{self.name}.weight']
        bias = params[f'{self.name}.bias']
        b, _, h, w = x.shape
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = self._columns(xp, x.shape)
        out = cols @ weight.reshape(self.out_channels, -1).T + bias
        y = np.ascontiguousarray(out.reshape(b, h, w, self.out_channels).transpose(0, 3, 1, 2))
        return y, (xp, x.shape, weight)

    def backward(self, cache, dy):
        xp, shape, weight = cache
        b, c, h, w = shape
        k = self.kernel
        if dy.shape != (b, self.out_channels, h, w):
            raise ShapeError(self.name, (b, self.out_channels, h, w), dy.shape)
        dym = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        cols = self._columns(xp, shape)
        grads = {
            f'{self.name}.weight': (dym.T @ cols).reshape(weight.shape),
            f'{self.name}.bias': dym.sum(axis=0),
        }
        dcols = (dym @ weight.reshape(self.out_channels, -1)).reshape(b, h, w, c, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        p = self.pad
        dx = dxp[:, :, p:p + h, p:p + w]
        return np.ascontiguousarray(dx), grads


class BatchNorm2d(Layer):
    """Per-channel normalisation over (batch, time, frequency)."""

    def __init__(self, name, channels, eps=1e-5, momentum=0.1):
        self.name = name
        self.channels = channels
        self.eps = eps
        self.momentum = momentum

    def init(self, params, rng, dtype=np.float64):
        params.add(f'{self.name}.gamma', np.ones(self.channels, dtype=dtype))
        params.add(f'{self.name}.beta', np.zeros(self.channels, dtype=dtype))
        params.add(f'{self.name}.running_mean', np.zeros(self.channels, dtype=dtype))
        params.add(f'{self.name}.running_var', np.ones(self.channels, dtype=dtype))

    def forward(self, params, x, mode='train'):
        _check(self.name, x, ndim=4, axis=1, size=self.channels)
        gamma = params[f'{self.name}.gamma']
        beta = params[f'{self.name}.beta']
        axes = (0, 2, 3)
        if mode == 'train':
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            n = x.size // self.channels
            m = self.momentum
            unbiased = var * n / max(n - 1, 1)
            key_mean, key_var = f'{self.name}.running_mean', f'{self.name}.running_var'
            params[key_mean] = ((1 - m) * params[key_mean] + m * mean).astype(params[key_mean].dtype)
            params[key_var] = ((1 - m) * params[key_var] + m * unbiased).astype(params[key_var].dtype)
        else:
            mean = params[f'{self.name}.running_mean']
            var = params[f'{self.name}.running_var']
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        return y, (xhat, inv_std, gamma, mode)

    def backward(self, cache, dy):
        xhat, inv_std, gamma, mode = cache
        axes = (0, 2, 3)
        grads = {
            f'{self.name}.gamma': (dy * xhat).sum(axis=axes),
            f'{self.name}.beta': dy.sum(axis=axes),
        }
        dxhat = dy * gamma[None, :, None, None]
        if mode != 'train':
            return dxhat * inv_std[None, :, None, None], grads
        n = dy.size // self.channels
        sum_dxhat = dxhat.sum(axis=axes, keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = (inv_std[None, :, None, None] / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        return dx, grads


class ReLU(Layer):
    def __init__(self, name='relu'):
        self.name = name

    def forward(self, params, x, mode='train'):
        return np.maximum(x, 0), x > 0

    def backward(self, cache, dy):
        return dy * cache, {}


class FreqMaxPool(Layer):
    """Max-pool by 2 along the frequency axis only; time resolution is untouched."""

    def __init__(self, name='pool'):
        self.name = name

    def forward(self, params, x, mode='train'):
        _check(self.name, x, ndim=4)
        b, c, t, f = x.shape
        if f % 2:
            raise ShapeError(self.name, 'even frequency axis', x.shape)
        pairs = x.reshape(b, c, t, f // 2, 2)
        idx = pairs.argmax(axis=-1)[..., None]
        return np.take_along_axis(pairs, idx, axis=-1)[..., 0], (idx, x.shape)

    def backward(self, cache, dy):
        idx, shape = cache
        b, c, t, f = shape
        dpairs = np.zeros((b, c, t, f // 2, 2), dtype=dy.dtype)
        np.put_along_axis(dpairs, idx, dy[..., None], axis=-1)
        return dpairs.reshape(shape), {}


class FreqMean(Layer):
    """(batch, channels, time, freq) -> (batch, time, channels) by averaging frequency."""

    def __init__(self, name='freq_mean'):
        self.name = name

    def forward(self, params, x, mode='train'):
        _check(self.name, x, ndim=4)
        return np.ascontiguousarray(x.mean(axis=3).transpose(0, 2, 1)), x.shape

    def backward(self, cache, dy):
        b, c, t, f = cache
        dx = np.broadcast_to((dy.transpose(0, 2, 1) / f)[..., None], cache)
        return np.ascontiguousarray(dx), {}


class Linear(Layer):
    """y = x W + b over the last axis."""

    def __init__(self, name, in_features, out_features, gain=1.0):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.gain = gain

    def init(self, params, rng, dtype=np.float64):
        shape = (self.in_features, self.out_features)
        params.add(f'{self.name}.weight', kaiming_uniform(rng, shape, self.in_features, gain=self.gain, dtype=dtype))
        params.add(f'{self.name}.bias', np.zeros(self.out_features, dtype=dtype))

    def forward(self, params, x, mode='train'):
        _check(self.name, x, axis=-1, size=self.in_features)
        weight = params[f'{self.name}.weight']
        return x @ weight + params[f'{self.name}.bias'], (x, weight)

    def backward(self, cache, dy):
        x, weight = cache
        if dy.shape[-1] != self.out_features:
            raise ShapeError(self.name, f'(..., {self.out_features})', dy.shape)
        x2 = x.reshape(-1, self.in_features)
        dy2 = dy.reshape(-1, self.out_features)
        grads = {
            f'{self.name}.weight': x2.T @ dy2,
            f'{self.name}.bias': dy2.sum(axis=0),
        }
        return dy @ weight.T, grads


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


class Sequential(Layer):
    def __init__(self, name, layers):
        self.name = name
        self.layers = list(layers)

    def init(self, params, rng, dtype=np.float64):
        for layer in self.layers:
            layer.init(params, rng, dtype)

    def forward(self, params, x, mode='train'):
        caches = []
        for layer in self.layers:
            x, cache = layer_forward(layer, params, x, mode)
            caches.append(cache)
        return x, caches

    def backward(self, cache, dy):
        grads = {}
        for layer, layer_cache in zip(reversed(self.layers), reversed(cache)):
            dy, layer_grads = layer_backward(layer, layer_cache, dy)
            grads.update(layer_grads)
        return dy, grads


def cnn_block(name, in_channels, out_channels, pool, bn_eps=1e-5, bn_momentum=0.1):
    layers = [
        Conv2d(f'{name}.conv', in_channels, out_channels),
        BatchNorm2d(f'{name}.bn', out_channels, eps=bn_eps, momentum=bn_momentum),
        ReLU(f'{name}.relu'),
    ]
    if pool:
        layers.append(FreqMaxPool(f'{name}.pool'))
    return Sequential(name, layers)


class CnnEncoder(Layer):
    """Four conv blocks (1 -> C -> C -> C -> C) with frequency pooling after the first two.

    Input (batch, time, freq); output per-frame embeddings (batch, time, C).
    ``n_blocks`` truncates the stack, which gives the lightweight extractor.
    """

    def __init__(self, name, channels=64, n_blocks=4, pool_blocks=2, bn_eps=1e-5, bn_momentum=0.1):
        self.name = name
        self.channels = channels
        self.blocks = [
            cnn_block(f'{name}.block{i}', 1 if i == 0 else channels, channels, i < pool_blocks, bn_eps, bn_momentum)
            for i in range(n_blocks)
        ]
        self.head = FreqMean(f'{name}.freq_mean')

    def init(self, params, rng, dtype=np.float64):
        for block in self.blocks:
            block.init(params, rng, dtype)

    def forward(self, params, x, mode='train', n_blocks=None):
        _check(self.name, x, ndim=3)
        h = x[:, None, :, :]
        caches = []
        for block in self.blocks[:n_blocks]:
            h, cache = block.forward(params, h, mode)
            caches.append(cache)
        y, head_cache = self.head.forward(params, h, mode)
        return y, (caches, head_cache)

    def backward(self, cache, dy):
        caches, head_cache = cache
        dh, _ = self.head.backward(head_cache, dy)
        grads = {}
        for block, block_cache in zip(reversed(self.blocks[:len(caches)]), reversed(caches)):
            dh, block_grads = block.backward(block_cache, dh)
            grads.update(block_grads)
        return dh[:, 0], grads
