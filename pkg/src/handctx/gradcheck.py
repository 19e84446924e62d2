"""Central finite-difference gradient checks against the tape."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor

EPS = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), with 0 when both vanish."""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom < 1e-300:
        return 0.0 if diff < 1e-300 else float("inf")
    return float(diff / denom)


def numeric_grad(f: Callable[[], float], t: Tensor, eps: float = EPS, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``t.data`` (in place, restored).

    ``indices`` restricts the perturbed flat positions; the others stay 0.
    """
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for idx in range(flat.size) if indices is None else indices:
        orig = flat[idx]
        flat[idx] = orig + eps
        fp = f()
        flat[idx] = orig - eps
        fm = f()
        flat[idx] = orig
        gflat[idx] = (fp - fm) / (2.0 * eps)
    return g


def analytic_grads(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = EPS,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Relative error between tape gradients and central differences, per named tensor.

    ``loss_fn`` must rebuild the scalar loss from the current contents of ``params``.
    With ``max_coords``, each tensor is compared on that many randomly chosen
    entries instead of all of them.
    """
    analytic = analytic_grads(loss_fn, params)
    rng = np.random.default_rng(seed)

    def value():
        return loss_fn().item()

    out = {}
    for k, p in params.items():
        idx = None
        if max_coords is not None and p.data.size > max_coords:
            idx = np.sort(rng.choice(p.data.size, max_coords, replace=False))
        num = numeric_grad(value, p, eps, idx)
        if idx is None:
            out[k] = relative_error(analytic[k], num)
        else:
            out[k] = relative_error(analytic[k].reshape(-1)[idx], num.reshape(-1)[idx])
    return out
