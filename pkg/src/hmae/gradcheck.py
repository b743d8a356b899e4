"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import Tensor


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    The error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.  ``x`` is
    perturbed in place and restored.  Use float64 tensors for meaningful
    results.  ``max_coords`` checks a random subset of coordinates.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    loss.backward()
    analytic = np.zeros_like(x.data, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        num = (fp - fm) / (2.0 * h)
        a = a_flat[i]
        err = abs(a - num) / max(1e-8, abs(a) + abs(num))
        worst = max(worst, err)
    x.grad = None
    return worst


def model_grad_check(loss_fn: Callable[[], Tensor], params, h: float = 1e-5,
                     max_coords_per_param: Optional[int] = None, seed: int = 0) -> dict[str, float]:
    """Run :func:`grad_check` on each named parameter of a model.

    ``loss_fn`` closes over the model and must be deterministic.  Returns
    ``{name: max relative error}``.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, p in params:
        out[name] = grad_check(lambda _x: loss_fn(), p, h=h, max_coords=max_coords_per_param, rng=rng)
    return out
