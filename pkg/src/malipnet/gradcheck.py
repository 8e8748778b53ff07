"""Finite-difference verification of analytic gradients."""

import numpy as np

from .tensor import ParameterStore, Tensor, no_grad, precision


def _collect(params):
    if isinstance(params, ParameterStore):
        return [t for _, t in params.parameters()], [t for _, t in params.items()]
    if isinstance(params, Tensor):
        params = [params]
    tensors = [p[1] if isinstance(p, tuple) else p for p in params]
    return tensors, tensors


def grad_check(f, params, eps=1e-3, max_coords=20, seed=0):
    """Largest relative disagreement between backprop and central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor. Each probed
    coordinate contributes ``|analytic - numeric| / max(1, |analytic|)``.
    Tensors with more than ``max_coords`` entries are probed at a random
    subset of coordinates. Everything runs in float64; the parameters are
    restored to their original values and dtype afterwards.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError(f"eps={eps} outside [1e-5, 1e-2]")
    targets, everything = _collect(params)
    saved = [(t, t.data, t.grad) for t in everything]
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for t in everything:
            t.data = t.data.astype(np.float64)
            t.grad = None
        with precision(np.float64):
            loss = f()
            if loss.size != 1:
                raise ValueError("grad_check needs a scalar-valued function")
            if not np.isfinite(loss.data).all():
                raise FloatingPointError("non-finite loss during grad_check")
            loss.backward()
            analytic = [
                np.zeros_like(t.data) if t.grad is None else t.grad.astype(np.float64)
                for t in targets
            ]
            for t, ga in zip(targets, analytic):
                flat = t.data.reshape(-1)
                n = flat.size
                coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
                for c in coords:
                    orig = flat[c]
                    with no_grad():
                        flat[c] = orig + eps
                        up = float(f().data)
                        flat[c] = orig - eps
                        down = float(f().data)
                    flat[c] = orig
                    if not (np.isfinite(up) and np.isfinite(down)):
                        raise FloatingPointError(f"non-finite value probing {t.name or 'tensor'}[{c}]")
                    numeric = (up - down) / (2 * eps)
                    a = ga.reshape(-1)[c]
                    worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    finally:
        for t, data, grad in saved:
            t.data = data
            t.grad = grad
    return worst
