"""Central finite-difference validation of the analytic backward passes."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .layers import Parameter


class NonFiniteError(FloatingPointError):
    pass


def gradient_check(
    forward_backward: Callable[[], float],
    params: Sequence[Parameter],
    epsilon: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Compare autodiff gradients with central differences.

    ``forward_backward`` must zero the parameter gradients, run the forward
    and backward pass, and return the scalar loss. For each parameter tensor
    the relative error ``||g_auto - g_fd|| / (||g_fd|| + epsilon)`` is taken
    over the checked entries; the maximum over tensors is returned.
    ``epsilon`` doubles as the finite-difference step. Parameters must be in
    64-bit precision. ``max_entries`` caps the number of (seeded, randomly
    chosen) entries probed per tensor.
    """
    if not params:
        return 0.0
    for p in params:
        if p.value.dtype != np.float64:
            raise TypeError("gradient_check requires 64-bit parameters")
    loss = forward_backward()
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        fd = np.empty(idx.size)
        for out_i, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + epsilon
            plus = forward_backward()
            flat[i] = orig - epsilon
            minus = forward_backward()
            flat[i] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NonFiniteError(f"non-finite loss while perturbing entry {i}")
            fd[out_i] = (plus - minus) / (2 * epsilon)
        auto = g.reshape(-1)[idx]
        err = np.linalg.norm(auto - fd) / (np.linalg.norm(fd) + epsilon)
        worst = max(worst, float(err))
    # leave the analytic gradients in place for the caller
    forward_backward()
    return worst
