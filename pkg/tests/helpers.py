"""Shared test utilities."""

import numpy as np
import torch


def finite_diff_max_rel_err(closure, params, n_coords=10, h=1e-4, seed=0):
    """Compare autograd gradients of closure() against central differences.

    closure: zero-arg callable returning a scalar torch loss built from
    `params`, a list of float64 leaf tensors with requires_grad=True.
    Checks n_coords randomly chosen coordinates spread over all params and
    returns the maximum relative error.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        assert p.dtype == torch.float64, "finite differences need float64 parameters"
        if p.grad is not None:
            p.grad = None
    loss = closure()
    loss.backward()
    grads = [p.grad.detach().clone() for p in params]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    coords = rng.choice(total, size=min(n_coords, total), replace=False)

    worst = 0.0
    for flat_idx in coords:
        pi = 0
        while flat_idx >= sizes[pi]:
            flat_idx -= sizes[pi]
            pi += 1
        p = params[pi]
        with torch.no_grad():
            orig = p.reshape(-1)[flat_idx].item()
            p.reshape(-1)[flat_idx] = orig + h
            up = float(closure())
            p.reshape(-1)[flat_idx] = orig - h
            down = float(closure())
            p.reshape(-1)[flat_idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(grads[pi].reshape(-1)[flat_idx])
        denom = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
