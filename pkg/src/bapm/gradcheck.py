"""Central finite-difference checks of tape gradients."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, no_grad


DEFAULT_STEP = 1e-2


def fd_step(theta: float, rel: float = DEFAULT_STEP) -> float:
    return rel * max(1.0, abs(theta))


def numerical_grad(loss_fn: Callable[[], Tensor], param: Tensor, indices=None,
                   rel_step: float = DEFAULT_STEP) -> tuple[np.ndarray, list]:
    """Central differences of ``loss_fn`` w.r.t. selected entries of ``param``.

    ``indices`` is a list of flat indices (default: every entry).  Whole
    networks need a far smaller ``rel_step`` than single ops: weights are
    ~0.05, so a 1e-2 probe pushes many PReLU inputs across the kink.
    """
    flat = param.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    indices = list(indices)
    out = np.empty(len(indices), dtype=np.float64)
    with no_grad():
        for j, i in enumerate(indices):
            orig = flat[i]
            h = fd_step(float(orig), rel_step)
            flat[i] = orig + h
            up = float(loss_fn().item())
            flat[i] = orig - h
            down = float(loss_fn().item())
            flat[i] = orig
            out[j] = (up - down) / (2 * h)
    return out, indices


def analytic_grads(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    return {k: (np.zeros_like(p.data) if p.grad is None else np.array(p.grad)) for k, p in params.items()}


def relative_error(a: np.ndarray, b: np.ndarray, atol: float = 1e-6) -> float:
    """||a - b|| / max(||a||, ||b||, atol).

    The floor keeps parameters whose true gradient is zero (a conv bias
    feeding an instance norm) from dividing rounding noise by rounding noise.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), atol)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], max_entries: int | None = None,
                    seed: int = 0, atol: float = 1e-6, rel_step: float = DEFAULT_STEP) -> dict[str, float]:
    """Relative error between analytic and finite-difference gradients per parameter.

    With ``max_entries`` set, a seeded random subset of each tensor's entries
    is probed instead of all of them.
    """
    rng = np.random.default_rng(seed)
    grads = analytic_grads(loss_fn, params)
    errors = {}
    for name, p in params.items():
        n = p.size
        if max_entries is None or n <= max_entries:
            idx = list(range(n))
        else:
            idx = sorted(rng.choice(n, size=max_entries, replace=False).tolist())
        num, _ = numerical_grad(loss_fn, p, idx, rel_step)
        errors[name] = relative_error(grads[name].reshape(-1)[idx], num, atol)
    return errors
