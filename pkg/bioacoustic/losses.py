"""Masked cross-entropy with its fused softmax gradient."""

import numpy as np

from .exceptions import DataError, ShapeError
from .layers import log_softmax


def masked_cross_entropy(logits, labels, mask):
    """Mean negative log-likelihood over frames with mask == 1.

    ``logits`` is (..., C); ``labels`` and ``mask`` share its leading shape.
    Returns (loss, grad_logits); masked-out frames get an exactly zero gradient.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=logits.dtype)
    if labels.shape != logits.shape[:-1] or mask.shape != labels.shape:
        raise ShapeError('masked_cross_entropy', logits.shape[:-1], (labels.shape, mask.shape))
    n = mask.sum()
    if n <= 0:
        raise DataError('masked_cross_entropy: every frame is masked out')
    n_classes = logits.shape[-1]
    keep = mask > 0
    if np.any((labels[keep] < 0) | (labels[keep] >= n_classes)):
        raise DataError(f'masked_cross_entropy: labels outside [0, {n_classes})')
    safe_labels = np.where(keep, labels, 0)
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, safe_labels[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / n
    grad = np.exp(logp)
    np.put_along_axis(grad, safe_labels[..., None], np.take_along_axis(grad, safe_labels[..., None], axis=-1) - 1.0, axis=-1)
    grad = grad * (mask / n)[..., None]
    return float(loss), grad
