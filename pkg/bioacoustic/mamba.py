"""
Selective state-space layers: discretisation, the scan, causal depthwise
convolution and the NetMamba encoder block, each with an analytic backward.

Sequences are laid out (batch, length, channels). A is diagonal per channel
and stored as ``A = -exp(A_log)``, so every entry is negative and
``exp(delta * A)`` stays inside (0, 1) for positive step sizes.
"""

import math

import numpy as np

from .exceptions import DataError, ShapeError
from .layers import Layer, Linear


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def inverse_softplus(y):
    return y + np.log(-np.expm1(-y))


def _zoh_b_coef(delta, A):
    """(exp(delta * A) - 1) / A, with the delta limit where A == 0."""
    dA = delta * A
    safe = np.where(A != 0, A, 1.0)
    return np.where(A != 0, np.expm1(dA) / safe, delta)


def discretize(A, B_t, delta_t, exact_zoh_b=False):
    """One timestep: A (E, N), B_t (N,), delta_t (E,) -> (A_bar, B_bar), both (E, N).

    A_bar = exp(delta * A) (zero-order hold); B_bar = delta * B unless
    ``exact_zoh_b``, which uses (exp(delta * A) - 1) / A * B.
    """
    A = np.asarray(A)
    delta = np.asarray(delta_t)[:, None]
    if np.any(delta <= 0):
        raise DataError('discretize: step size must be positive')
    A_bar = np.exp(delta * A)
    coef = _zoh_b_coef(delta, A) if exact_zoh_b else np.broadcast_to(delta, A.shape)
    return A_bar, coef * np.asarray(B_t)[None, :]


def ssm_scan(x, delta, A, B, C, exact_zoh_b=False):
    """Selective scan h_t = A_bar_t * h_{t-1} + B_bar_t x_t, y_t = <C_t, h_t>, h_0 = 0.

    x, delta: (batch, L, E); A: (E, N); B, C: (batch, L, N). Unbatched (L, E)
    inputs are accepted and return unbatched outputs.
    Returns (y, cache).
    """
    squeeze = x.ndim == 2
    if squeeze:
        x, delta, B, C = x[None], delta[None], B[None], C[None]
    nb, length, e = x.shape
    if A.shape[0] != e or B.shape[:2] != (nb, length) or C.shape != B.shape:
        raise ShapeError('ssm_scan', f'x (b, L, {A.shape[0]}), B/C (b, L, {A.shape[1]})', (x.shape, B.shape, C.shape))
    dA = delta[..., None] * A
    A_bar = np.exp(dA)
    coef = _zoh_b_coef(delta[..., None], A) if exact_zoh_b else delta[..., None]
    u = coef * B[:, :, None, :] * x[..., None]
    states = np.empty(A_bar.shape, dtype=np.result_type(A_bar, u))
    h = np.zeros((nb, e, A.shape[1]), dtype=states.dtype)
    for t in range(length):
        h = A_bar[:, t] * h + u[:, t]
        states[:, t] = h
    y = np.einsum('blen,bln->ble', states, C)
    cache = (x, delta, A, B, C, A_bar, coef, states, exact_zoh_b, squeeze)
    return (y[0] if squeeze else y), cache


def ssm_scan_backward(cache, dy):
    """Backpropagation through the linear recurrence.

    Returns (dx, ddelta, dA, dB, dC) shaped like the forward inputs.
    """
    x, delta, A, B, C, A_bar, coef, states, exact_zoh_b, squeeze = cache
    if squeeze:
        dy = dy[None]
    nb, length, e = x.shape
    dC = np.einsum('ble,blen->bln', dy, states)
    direct = dy[..., None] * C[:, :, None, :]
    g = np.empty_like(states)
    acc = np.zeros_like(states[:, 0])
    for t in range(length - 1, -1, -1):
        if t + 1 < length:
            acc = direct[:, t] + A_bar[:, t + 1] * acc
        else:
            acc = direct[:, t].copy()
        g[:, t] = acc
    h_prev = np.concatenate([np.zeros_like(states[:, :1]), states[:, :-1]], axis=1)
    d_dA = g * h_prev * A_bar
    Bx = B[:, :, None, :] * x[..., None]
    dcoef = g * Bx
    dx = (g * coef * B[:, :, None, :]).sum(axis=-1)
    dB = (g * coef * x[..., None]).sum(axis=2)
    ddelta = (d_dA * A).sum(axis=-1)
    dA = (d_dA * delta[..., None]).sum(axis=(0, 1))
    if exact_zoh_b:
        ddelta = ddelta + (dcoef * A_bar).sum(axis=-1)
        safe = np.where(A != 0, A, 1.0)
        dcoef_dA = np.where(A != 0, (delta[..., None] * A_bar - coef) / safe, 0.5 * delta[..., None] ** 2)
        dA = dA + (dcoef * dcoef_dA).sum(axis=(0, 1))
    else:
        ddelta = ddelta + dcoef.sum(axis=-1)
    if squeeze:
        return dx[0], ddelta[0], dA, dB[0], dC[0]
    return dx, ddelta, dA, dB, dC


def causal_conv1d(x, kernel, bias=None):
    """Depthwise causal convolution, pre-activation.

    x: (batch, L, E); kernel: (E, K). Output t is
    ``sum_k kernel[:, k] * x[t - (K - 1) + k]`` with zeros before t = 0.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    width = kernel.shape[1]
    if kernel.shape[0] != x.shape[-1]:
        raise ShapeError('causal_conv1d', f'kernel ({x.shape[-1]}, K)', kernel.shape)
    length = x.shape[1]
    xp = np.pad(x, ((0, 0), (width - 1, 0), (0, 0)))
    out = np.zeros_like(x, dtype=np.result_type(x, kernel))
    for k in range(width):
        out += kernel[:, k] * xp[:, k:k + length]
    if bias is not None:
        out = out + bias
    cache = (xp, kernel, length, squeeze)
    return (out[0] if squeeze else out), cache


def causal_conv1d_backward(cache, dout):
    """Returns (dx, dkernel, dbias)."""
    xp, kernel, length, squeeze = cache
    if squeeze:
        dout = dout[None]
    width = kernel.shape[1]
    dkernel = np.empty_like(kernel)
    dxp = np.zeros_like(xp)
    for k in range(width):
        dkernel[:, k] = (dout * xp[:, k:k + length]).sum(axis=(0, 1))
        dxp[:, k:k + length] += dout * kernel[:, k]
    dx = dxp[:, width - 1:]
    dbias = dout.sum(axis=(0, 1))
    return (dx[0] if squeeze else dx), dkernel, dbias


class RMSNorm(Layer):
    def __init__(self, name, dim, eps=1e-6):
        self.name = name
        self.dim = dim
        self.eps = eps

    def init(self, params, rng, dtype=np.float64):
        params.add(f'{self.name}.weight', np.ones(self.dim, dtype=dtype))

    def forward(self, params, x, mode='train'):
        if x.shape[-1] != self.dim:
            raise ShapeError(self.name, f'(..., {self.dim})', x.shape)
        weight = params[f'{self.name}.weight']
        r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + self.eps)
        return x * r * weight, (x, r, weight)

    def backward(self, cache, dy):
        x, r, weight = cache
        dxn = dy * weight
        dx = r * dxn - x * r ** 3 * (dxn * x).mean(axis=-1, keepdims=True)
        grads = {f'{self.name}.weight': (dy * x * r).reshape(-1, self.dim).sum(axis=0)}
        return dx, grads


class NetMambaBlock(Layer):
    """Pre-norm -> (x, z) projection -> causal conv + SiLU -> selective scan -> gate by SiLU(z) -> residual."""

    def __init__(self, name, d_model, d_inner=128, d_state=16, conv_width=4,
                 dt_min=0.001, dt_max=0.1, exact_zoh_b=False):
        self.name = name
        self.d_model = d_model
        self.d_inner = d_inner
        self.d_state = d_state
        self.conv_width = conv_width
        self.dt_rank = max(1, math.ceil(d_model / 16))
        self.dt_min = dt_min
        self.dt_max = dt_max
        self.exact_zoh_b = exact_zoh_b
        self.norm = RMSNorm(f'{name}.norm', d_model)
        self.in_proj = Linear(f'{name}.in_proj', d_model, 2 * d_inner)
        self.x_proj = Linear(f'{name}.x_proj', d_inner, self.dt_rank + 2 * d_state)
        self.dt_proj = Linear(f'{name}.dt_proj', self.dt_rank, d_inner, gain=1.0 / math.sqrt(3.0))
        self.out_proj = Linear(f'{name}.out_proj', d_inner, d_model)

    def init(self, params, rng, dtype=np.float64):
        self.norm.init(params, rng, dtype)
        self.in_proj.init(params, rng, dtype)
        bound = 1.0 / math.sqrt(self.conv_width)
        params.add(f'{self.name}.conv.weight',
                   rng.uniform(-bound, bound, size=(self.d_inner, self.conv_width)).astype(dtype))
        params.add(f'{self.name}.conv.bias', np.zeros(self.d_inner, dtype=dtype))
        self.x_proj.init(params, rng, dtype)
        self.dt_proj.init(params, rng, dtype)
        dt = np.exp(rng.uniform(math.log(self.dt_min), math.log(self.dt_max), size=self.d_inner))
        params[f'{self.name}.dt_proj.bias'] = inverse_softplus(dt).astype(dtype)
        a_log = np.log(np.tile(np.arange(1, self.d_state + 1, dtype=np.float64), (self.d_inner, 1)))
        params.add(f'{self.name}.A_log', a_log.astype(dtype))
        self.out_proj.init(params, rng, dtype)

    def A(self, params):
        return -np.exp(params[f'{self.name}.A_log'])

    def forward(self, params, X, mode='train'):
        if X.ndim != 3 or X.shape[-1] != self.d_model:
            raise ShapeError(self.name, f'(batch, L, {self.d_model})', X.shape)
        e, n, r = self.d_inner, self.d_state, self.dt_rank
        xn, c_norm = self.norm.forward(params, X, mode)
        xz, c_in = self.in_proj.forward(params, xn, mode)
        xs, z = xz[..., :e], xz[..., e:]
        pre, c_conv = causal_conv1d(xs, params[f'{self.name}.conv.weight'], params[f'{self.name}.conv.bias'])
        xc = silu(pre)
        proj, c_xp = self.x_proj.forward(params, xc, mode)
        dt_low, Bm, Cm = proj[..., :r], proj[..., r:r + n], proj[..., r + n:]
        dt_raw, c_dt = self.dt_proj.forward(params, dt_low, mode)
        delta = softplus(dt_raw)
        A = self.A(params)
        y, c_scan = ssm_scan(xc, delta, A, Bm, Cm, self.exact_zoh_b)
        gate = silu(z)
        out, c_out = self.out_proj.forward(params, y * gate, mode)
        cache = (c_norm, c_in, z, pre, c_conv, c_xp, dt_raw, c_dt, A, y, gate, c_scan, c_out)
        return X + out, cache

    def backward(self, cache, dy):
        c_norm, c_in, z, pre, c_conv, c_xp, dt_raw, c_dt, A, y, gate, c_scan, c_out = cache
        grads = {}
        dg, g = self.out_proj.backward(c_out, dy)
        grads.update(g)
        dys = dg * gate
        dz = dg * y * silu_grad(z)
        dxc, ddelta, dA, dBm, dCm = ssm_scan_backward(c_scan, dys)
        grads[f'{self.name}.A_log'] = dA * A
        ddt_low, g = self.dt_proj.backward(c_dt, ddelta * sigmoid(dt_raw))
        grads.update(g)
        dxc_proj, g = self.x_proj.backward(c_xp, np.concatenate([ddt_low, dBm, dCm], axis=-1))
        grads.update(g)
        dpre = (dxc + dxc_proj) * silu_grad(pre)
        dxs, dkernel, dbias = causal_conv1d_backward(c_conv, dpre)
        grads[f'{self.name}.conv.weight'] = dkernel
        grads[f'{self.name}.conv.bias'] = dbias
        dxn, g = self.in_proj.backward(c_in, np.concatenate([dxs, dz], axis=-1))
        grads.update(g)
        dX, g = self.norm.backward(c_norm, dxn)
        grads.update(g)
        return dy + dX, grads


class MambaEncoder(Layer):
    """Unidirectional stack of NetMamba blocks followed by a final RMSNorm."""

    def __init__(self, name, d_model, n_blocks=2, d_inner=128, d_state=16, conv_width=4,
                 dt_min=0.001, dt_max=0.1, exact_zoh_b=False):
        if n_blocks < 1:
            raise ShapeError(name, 'n_blocks >= 1', n_blocks)
        self.name = name
        self.d_model = d_model
        self.blocks = [
            NetMambaBlock(f'{name}.block{i}', d_model, d_inner, d_state, conv_width, dt_min, dt_max, exact_zoh_b)
            for i in range(n_blocks)
        ]
        self.norm = RMSNorm(f'{name}.norm_f', d_model)

    def init(self, params, rng, dtype=np.float64):
        for block in self.blocks:
            block.init(params, rng, dtype)
        self.norm.init(params, rng, dtype)

    def forward(self, params, X, mode='train'):
        caches = []
        for block in self.blocks:
            X, cache = block.forward(params, X, mode)
            caches.append(cache)
        y, c_norm = self.norm.forward(params, X, mode)
        return y, (caches, c_norm)

    def backward(self, cache, dy):
        caches, c_norm = cache
        dX, grads = self.norm.backward(c_norm, dy)
        for block, block_cache in zip(reversed(self.blocks), reversed(caches)):
            dX, g = block.backward(block_cache, dX)
            grads.update(g)
        return dX, grads
