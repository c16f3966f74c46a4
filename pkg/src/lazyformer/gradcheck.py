"""Central finite-difference gradients, used as an independent oracle for backprop."""

from __future__ import annotations

import numpy as np

from .tensor import no_grad


def numeric_grad(loss_fn, tensor, h=1e-5, indices=None):
    """Estimate d loss_fn() / d tensor by central differences.

    ``loss_fn`` takes no arguments and returns a float. ``tensor.data`` is
    perturbed in place and restored. ``indices`` restricts the estimate to
    selected flat positions (others are left at 0).
    """
    flat = tensor.data.reshape(-1)
    grad = np.zeros(flat.size)
    positions = range(flat.size) if indices is None else indices
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            plus = float(loss_fn())
            flat[i] = orig - h
            minus = float(loss_fn())
            flat[i] = orig
            grad[i] = (plus - minus) / (2.0 * h)
    return grad.reshape(tensor.shape)


def relative_error(analytic, numeric, floor=1e-7) -> float:
    """Norm-wise relative error.

    The denominator is at least ``floor`` so that gradients which are zero
    in exact arithmetic (e.g. a key bias under softmax shift invariance)
    are compared absolutely instead of amplifying difference noise.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)
