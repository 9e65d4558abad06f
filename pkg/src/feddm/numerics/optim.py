"""Flat-vector helpers: SGD, norm clipping, and the rho-ball around a weight."""
from __future__ import annotations

import numpy as np


def _as_rng(seed):
    # Accepts an int, a SeedSequence, or an existing Generator (used as-is).
    return np.random.default_rng(seed)


def sgd_step(params, grads, lr):
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"sgd_step shape mismatch: params {params.shape} vs grads {grads.shape}")
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("sgd_step received non-finite gradients")
    return params - lr * grads


def clip_by_norm(g, max_norm):
    """Scale ``g`` by ``1 / max(1, ||g||_2 / max_norm)``."""
    if not max_norm > 0:
        raise ValueError(f"clip bound must be positive, got {max_norm}")
    g = np.asarray(g, dtype=np.float64)
    return g / max(1.0, float(np.linalg.norm(g)) / max_norm)


def project_ball(w, center, rho):
    """Radial projection of ``w`` onto the closed l2 ball of radius ``rho`` around ``center``."""
    if rho < 0:
        raise ValueError(f"rho must be non-negative, got {rho}")
    w = np.asarray(w, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    diff = w - center
    dist = float(np.linalg.norm(diff))
    if dist <= rho:
        return w
    if rho == 0:
        return center.copy()
    return center + diff * (rho / dist)


def sample_ball_weight(center, rho, seed):
    """Draw from N(center, I) and project the draw into the rho-ball around ``center``."""
    if rho < 0:
        raise ValueError(f"rho must be non-negative, got {rho}")
    center = np.asarray(center, dtype=np.float64)
    if rho == 0:
        return center.copy()
    rng = _as_rng(seed)
    w = center + rng.standard_normal(center.shape)
    return project_ball(w, center, rho)


def finite_diff_grad(loss_fn, params, step=1e-5):
    """Central-difference gradient of a scalar function of a flat vector."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    params = np.array(params, dtype=np.float64)
    flat = params.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(loss_fn(params))
        flat[i] = orig - step
        lo = float(loss_fn(params))
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(params.shape)
