"""Finite-difference checking of the hand-written backward passes."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError
from .layers import layer_backward, layer_forward

logger = logging.getLogger(__name__)


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)

    @property
    def failed(self):
        return sorted(name for name, err in self.errors.items() if not err < self.tolerance)

    @property
    def ok(self):
        return not self.failed

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)


def _as_tuple(value):
    return value if isinstance(value, tuple) else (value,)


def grad_check(fragment, params, x, tolerance=1e-4, n_coords=32, step=1e-5, seed=0, mode='train',
               check_input=True, floor=1e-6):
    """Compare ``fragment.backward`` with central differences of a random projection.

    The scalar checked is ``sum(y * r)`` for fixed random ``r``. Up to
    ``n_coords`` coordinates per tensor are sampled. A coordinate whose
    difference quotient changes between ``step`` and ``step / 2`` sits on a
    kink (ReLU, max-pool) and is counted in ``skipped`` instead of ``errors``.
    A tensor whose every sampled coordinate is skipped was never checked and
    fails with an infinite error.
    Relative error is ``|a - n| / max(|a| + |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    inputs = tuple(np.array(v, copy=True) for v in _as_tuple(x))
    single = not isinstance(x, tuple)

    def run():
        y, cache = layer_forward(fragment, params, inputs[0] if single else inputs, mode)
        return _as_tuple(y), cache

    outputs, cache = run()
    weights = tuple(rng.standard_normal(y.shape) / np.sqrt(max(y.size, 1)) for y in outputs)

    def objective():
        ys, _ = run()
        total = sum(float(np.sum(y * r)) for y, r in zip(ys, weights))
        if not np.isfinite(total):
            raise DataError('grad_check: non-finite forward value')
        return total

    objective()
    dx, grads = layer_backward(fragment, cache, weights[0] if len(weights) == 1 else weights)
    dxs = _as_tuple(dx)

    targets = [(name, params.tensors, name, grads[name]) for name in params.names() if name in grads]
    if check_input:
        holder = dict(enumerate(inputs))
        targets += [(f'input[{i}]', holder, i, d) for i, d in enumerate(dxs) if d is not None]

    report = GradCheckReport(tolerance=tolerance)
    for label, store, key, analytic in targets:
        tensor = store[key]
        flat = tensor.reshape(-1)
        analytic = np.asarray(analytic).reshape(-1)
        picks = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        worst, skipped = 0.0, 0
        for i in picks:
            original = flat[i]
            quotients = []
            for h in (step, step / 2):
                flat[i] = original + h
                plus = objective()
                flat[i] = original - h
                minus = objective()
                flat[i] = original
                quotients.append((plus - minus) / (2 * h))
            numeric, half = quotients
            if abs(numeric - half) > 0.25 * tolerance * max(abs(numeric) + abs(half), floor):
                skipped += 1
                continue
            err = abs(analytic[i] - numeric) / max(abs(analytic[i]) + abs(numeric), floor)
            worst = max(worst, err)
        report.errors[label] = np.inf if picks.size and skipped == picks.size else worst
        if skipped:
            report.skipped[label] = skipped
    if report.failed:
        logger.warning('gradient check failed for %s', ', '.join(report.failed))
    return report
