"""
The multi-task detector: a shared CNN embedding network feeding a per-frame
SED head, and an FBC branch that fuses plain and masked-input embeddings
(elementwise sum) before the NetMamba encoder and a 2-class head.
"""

import logging

import numpy as np

from .exceptions import ShapeError
from .layers import CnnEncoder, Layer, Linear
from .mamba import MambaEncoder
from .params import ModelParams, check_params
from .seeding import derive_rng

logger = logging.getLogger(__name__)

CNN_BLOCKS = 4
POOL_BLOCKS = 2
EVAL_CHUNK = 4


class MultiTaskModel(Layer):
    name = 'model'

    def __init__(self, n_classes, n_mels=128, channels=64, n_blocks=2, d_inner=128, d_state=16, conv_width=4,
                 dt_min=0.001, dt_max=0.1, exact_zoh_b=False, bn_eps=1e-5, bn_momentum=0.1):
        if n_mels % (2 ** POOL_BLOCKS):
            raise ShapeError('cnn', f'n_mels divisible by {2 ** POOL_BLOCKS}', n_mels)
        self.n_classes = n_classes
        self.n_mels = n_mels
        self.channels = channels
        self.cnn = CnnEncoder('cnn', channels, CNN_BLOCKS, POOL_BLOCKS, bn_eps, bn_momentum)
        self.sed_head = Linear('sed_head', channels, n_classes + 1)
        self.encoder = MambaEncoder('encoder', channels, n_blocks, d_inner, d_state, conv_width,
                                    dt_min, dt_max, exact_zoh_b)
        self.fbc_head = Linear('fbc_head', channels, 2)

    @classmethod
    def from_config(cls, config, n_classes):
        m = config.model
        return cls(
            n_classes, n_mels=config.features.n_mels, channels=m.channels, n_blocks=m.n_blocks,
            d_inner=m.d_inner, d_state=m.d_state, conv_width=m.conv_width, dt_min=m.dt_min,
            dt_max=m.dt_max, exact_zoh_b=m.exact_zoh_b, bn_eps=m.bn_eps, bn_momentum=m.bn_momentum,
        )

    def init(self, params, rng, dtype=np.float64):
        self.cnn.init(params, rng, dtype)
        self.sed_head.init(params, rng, dtype)
        self.encoder.init(params, rng, dtype)
        self.fbc_head.init(params, rng, dtype)

    def build_params(self, seed=0, dtype=np.float32):
        params = ModelParams(seed=seed)
        self.init(params, derive_rng(seed, 'init'), np.dtype(dtype))
        logger.debug('built %d tensors for %d classes', len(params), self.n_classes)
        return params

    def check(self, params, source='params'):
        check_params(params, self.build_params(params.seed, np.float64), source)

    def _batched(self, x):
        x = np.asarray(x)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != self.n_mels:
            raise ShapeError(self.name, f'(batch, T, {self.n_mels})', x.shape)
        return x

    def forward(self, params, x, mode='train'):
        """x = (window, masked_window) -> ((sed_logits, fbc_logits, embeddings), cache)."""
        window, masked = x
        window, masked = self._batched(window), self._batched(masked)
        if window.shape != masked.shape:
            raise ShapeError(self.name, window.shape, masked.shape)
        emb, c_plain = self.cnn.forward(params, window, mode)
        emb_masked, c_masked = self.cnn.forward(params, masked, mode)
        sed_logits, c_sed = self.sed_head.forward(params, emb, mode)
        encoded, c_enc = self.encoder.forward(params, emb + emb_masked, mode)
        fbc_logits, c_fbc = self.fbc_head.forward(params, encoded, mode)
        return (sed_logits, fbc_logits, emb), (c_plain, c_masked, c_sed, c_enc, c_fbc)

    def backward(self, cache, dy):
        c_plain, c_masked, c_sed, c_enc, c_fbc = cache
        d_sed, d_fbc, d_emb = dy
        grads = {}
        d_plain, g = self.sed_head.backward(c_sed, d_sed)
        grads.update(g)
        if d_emb is not None:
            d_plain = d_plain + d_emb
        d_encoded, g = self.fbc_head.backward(c_fbc, d_fbc)
        grads.update(g)
        d_fused, g = self.encoder.backward(c_enc, d_encoded)
        grads.update(g)
        dx, g_plain = self.cnn.backward(c_plain, d_plain + d_fused)
        dx_masked, g_masked = self.cnn.backward(c_masked, d_fused)
        for name, value in g_plain.items():
            grads[name] = value + g_masked[name]
        return (dx, dx_masked), grads

    def forward_multitask(self, params, window, masked_window, mode='train'):
        return self.forward(params, (window, masked_window), mode)

    def embed(self, params, windows, n_blocks=None):
        """Per-frame SED-branch embeddings (batch, T, C) in eval mode, computed in chunks."""
        windows = self._batched(windows)
        chunks = [
            self.cnn.forward(params, windows[i:i + EVAL_CHUNK], 'eval', n_blocks=n_blocks)[0]
            for i in range(0, len(windows), EVAL_CHUNK)
        ]
        if not chunks:
            return np.zeros(windows.shape[:2] + (self.channels,))
        return np.concatenate(chunks)

    def encode(self, params, tokens):
        chunks = [
            self.encoder.forward(params, tokens[i:i + EVAL_CHUNK], 'eval')[0]
            for i in range(0, len(tokens), EVAL_CHUNK)
        ]
        return np.concatenate(chunks) if chunks else np.zeros_like(tokens)
