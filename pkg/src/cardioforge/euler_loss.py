"""Simulator distance and Euler loss.

The candidate beat ``h`` stands in for the z coordinate; x and y are pinned to
their Euler solution from the default initial conditions. The distance is the
sum of squared one-step residuals of the z equation over all L-1 consecutive
sample pairs, with the gradient taken analytically with respect to ``h``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamical_model import (
    DEFAULT_PARAMS,
    TWO_PI,
    SimulatorParams,
    forcing_matrix,
    grid_times,
    xy_path,
)
from .errors import ShapeError


@dataclass(frozen=True)
class SimDistanceResult:
    value: float
    grad: np.ndarray
    x_traj: np.ndarray
    y_traj: np.ndarray


def _baseline_path(params: SimulatorParams) -> np.ndarray:
    return params.A * np.sin(TWO_PI * params.f2 * grid_times(params))


def residuals(h: np.ndarray, etas, params: SimulatorParams = DEFAULT_PARAMS) -> np.ndarray:
    """One-step z residuals, shape [..., L-1]; ``etas`` broadcasts against ``h``'s rows."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != params.L:
        raise ShapeError(f"beat length {h.shape[-1]} != L={params.L}")
    x, y = xy_path(params)
    F = forcing_matrix(etas, x, y)
    base = _baseline_path(params)
    fz = -F[..., :-1] - (h[..., :-1] - base[:-1])
    return (h[..., 1:] - h[..., :-1]) / params.dt - fz


def _grad_from_residuals(r: np.ndarray, dt: float) -> np.ndarray:
    # r_l depends on h_{l+1} with weight 1/dt and on h_l with weight (1 - 1/dt).
    g = np.zeros(r.shape[:-1] + (r.shape[-1] + 1,))
    g[..., 1:] += 2.0 * r / dt
    g[..., :-1] += 2.0 * r * (1.0 - 1.0 / dt)
    return g


def sim_distance(h, eta, params: SimulatorParams = DEFAULT_PARAMS) -> SimDistanceResult:
    """Simulator distance of one beat ``h`` under 15-component ``eta``."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1:
        raise ShapeError("sim_distance takes a single beat")
    if isinstance(eta, SimulatorParams):
        params, eta = eta, eta.eta
    r = residuals(h, eta, params)
    x, y = xy_path(params)
    return SimDistanceResult(
        value=float(np.dot(r, r)),
        grad=_grad_from_residuals(r, params.dt),
        x_traj=x,
        y_traj=y,
    )


def sim_distance_batch(h, etas, params: SimulatorParams = DEFAULT_PARAMS):
    """Row-wise distances and gradients for beats [B, L] and etas [B, 15]."""
    r = residuals(h, etas, params)
    return (r * r).sum(axis=-1), _grad_from_residuals(r, params.dt)


def euler_loss(batch, dist, n_eta_samples: int = 1, rng_seed=None,
               params: SimulatorParams = DEFAULT_PARAMS):
    """Monte-Carlo Euler loss over a batch of beats.

    Draws ``n_eta_samples`` parameter vectors per beat from ``dist`` and
    averages the simulator distance over all (beat, draw) pairs.

    Returns ``(value, grad)`` with ``grad`` shaped like ``batch``.
    """
    from .param_estimation import sample_eta_matrix

    h = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if h.shape[0] == 0:
        raise ShapeError("empty batch")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    B = h.shape[0]
    # Draw order: beat-major, then sample index.
    etas = sample_eta_matrix(dist, B * n_eta_samples, rng)
    hh = np.repeat(h, n_eta_samples, axis=0)
    values, grads = sim_distance_batch(hh, etas, params)
    n = B * n_eta_samples
    value = float(values.sum() / n)
    grad = grads.reshape(B, n_eta_samples, -1).sum(axis=1) / n
    return value, grad
