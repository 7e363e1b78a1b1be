"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from rescap import autodiff as ad


def numeric_grad(f, arrays, which: int, coords=None, h: float = 1e-5) -> dict:
    """Central-difference derivatives of scalar ``f(*arrays)``.

    Returns {flat_index: derivative} for the requested coordinates of
    ``arrays[which]`` (all coordinates when ``coords`` is None).
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    flat = base[which].reshape(-1)
    if coords is None:
        coords = range(flat.size)
    out = {}
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + h
        hi = f(*base)
        flat[idx] = orig - h
        lo = f(*base)
        flat[idx] = orig
        out[idx] = (hi - lo) / (2.0 * h)
    return out


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(
    build_loss,
    arrays,
    h: float = 1e-5,
    coords_per_input=None,
    rng=None,
) -> float:
    """Compare analytic and numeric gradients; return the max relative error.

    ``build_loss`` maps Tensors to a scalar Tensor and must be deterministic.
    With ``coords_per_input`` set, only that many randomly sampled
    coordinates per input are differenced (for large parameter tensors).
    """
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    ad.backward(loss)

    def f(*raw):
        ts = [ad.Tensor(r) for r in raw]
        return float(build_loss(*ts).data)

    worst = 0.0
    for i, t in enumerate(tensors):
        if t.grad is None:
            raise AssertionError(f"input {i} received no gradient")
        analytic = t.grad.reshape(-1)
        if coords_per_input is None or analytic.size <= coords_per_input:
            coords = range(analytic.size)
        else:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(analytic.size, size=coords_per_input, replace=False)
        numeric = numeric_grad(f, arrays, i, coords=coords, h=h)
        for idx, nd in numeric.items():
            worst = max(worst, relative_error(float(analytic[idx]), nd))
    return worst
