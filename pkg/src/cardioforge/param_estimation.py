"""Fitting simulator parameters to beats and per-class parameter distributions."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter

from . import constants as C
from .beat_data import Heartbeat
from .dynamical_model import (
    DEFAULT_INIT,
    DEFAULT_PARAMS,
    TWO_PI,
    SimulatorParams,
    State,
    forcing_matrix,
    grid_times,
    integrate,
    simulate_z,
    xy_path,
)
from .errors import DataError, FitDiverged, IntegrationDiverged, ShapeError

THETA = slice(0, 5)
AMP = slice(5, 10)
WIDTH = slice(10, 15)


@dataclass(frozen=True)
class FitResult:
    eta: SimulatorParams
    residual: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class EtaDistribution:
    class_label: str
    mean: np.ndarray
    var: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(15)
        var = np.array(self.var, dtype=np.float64).reshape(15)
        if np.any(var < 0) or not np.all(np.isfinite(mean)) or not np.all(np.isfinite(var)):
            raise DataError("distribution needs finite mean and non-negative variance")
        if self.count < 1:
            raise DataError("distribution count must be >= 1")
        mean.flags.writeable = False
        var.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @classmethod
    def point(cls, params: SimulatorParams = DEFAULT_PARAMS, class_label: str = "N"):
        """Zero-variance distribution at ``params``."""
        return cls(class_label, params.eta, np.zeros(15), 1)

    @property
    def mean_params(self) -> SimulatorParams:
        return DEFAULT_PARAMS.with_eta(repair_eta(self.mean))


def repair_eta(eta) -> np.ndarray:
    """Project an arbitrary 15-vector onto valid parameters.

    Angles are wrapped to [-pi, pi) and sorted ascending, widths clamped to
    ``B_MIN``. Works row-wise on [n, 15] input.
    """
    eta = np.array(eta, dtype=np.float64)
    th = eta[..., THETA]
    inside = (th >= -math.pi) & (th < math.pi)
    th = np.sort(np.where(inside, th, (th + math.pi) % TWO_PI - math.pi), axis=-1)
    for i in range(1, 5):
        # Ties after sorting would break strict ordering.
        th[..., i] = np.maximum(th[..., i], np.nextafter(th[..., i - 1], np.inf))
    eta[..., THETA] = th
    eta[..., WIDTH] = np.maximum(eta[..., WIDTH], C.B_MIN)
    return eta


# --- fitting ----------------------------------------------------------------

def _unit_event_responses(eta: np.ndarray, params: SimulatorParams):
    """z for the baseline alone and for each event at unit magnitude.

    z is linear in the magnitudes, so these let the amplitudes be solved by
    least squares for fixed angles and widths.
    """
    x, y = xy_path(params)
    rows = np.zeros((5, 15))
    rows[:, THETA] = eta[THETA]
    rows[:, WIDTH] = eta[WIDTH]
    rows[np.arange(5), 5 + np.arange(5)] = 1.0
    F = forcing_matrix(rows, x, y)
    dt = params.dt
    resp = lfilter([0.0, dt], [1.0, -(1.0 - dt)], -F, axis=-1)
    base = params.A * np.sin(TWO_PI * params.f2 * grid_times(params))
    z_base = lfilter([0.0, dt], [1.0, -(1.0 - dt)], base)
    return z_base, resp


# Ridge weight pulling the magnitudes toward the initial ones, relative to the
# target's mean power. Overlapping events make the responses nearly collinear;
# without it the solve can trade huge opposite-signed magnitudes for a
# negligible gain in fit.
AMP_RIDGE = 1e-7

# Prior spread of each magnitude around its initial value, as a fraction of
# max(|initial|, 1). With measurement noise the ridge grows to the Gaussian
# prior term sigma^2 / (L * PRIOR_REL_SD^2), so noise is not fitted by
# cancelling events.
PRIOR_REL_SD = 0.5


def noise_sigma_estimate(beat) -> float:
    """Robust white-noise level from the MAD of second differences."""
    d2 = np.diff(np.asarray(beat, dtype=np.float64), 2)
    return float(np.median(np.abs(d2 - np.median(d2))) / 0.6745 / math.sqrt(6.0))


def _ridge_weight(target: np.ndarray) -> float:
    sigma = noise_sigma_estimate(target)
    return AMP_RIDGE * float(np.mean(target ** 2)) + sigma ** 2 / (len(target) * PRIOR_REL_SD ** 2) + 1e-300


def _amp_penalty(amps: np.ndarray, prior: np.ndarray, ref: np.ndarray, weight: float) -> float:
    return weight * float(np.sum(((amps - prior) / ref) ** 2))


def _solve_amplitudes(eta: np.ndarray, target: np.ndarray, params: SimulatorParams,
                      prior: np.ndarray, ref: np.ndarray, weight: float) -> np.ndarray:
    """Magnitudes minimizing mean squared error plus the ridge penalty."""
    z_base, resp = _unit_event_responses(eta, params)
    L = len(target)
    w = math.sqrt(weight) / ref
    A = np.vstack([resp.T / math.sqrt(L), np.diag(w)])
    b = np.concatenate([(target - z_base) / math.sqrt(L), w * prior])
    amps, *_ = np.linalg.lstsq(A, b, rcond=None)
    out = eta.copy()
    out[AMP] = amps
    return out


def _simplex(v: np.ndarray) -> np.ndarray:
    """Axis-aligned start simplex over (angles, widths)."""
    steps = np.empty(10)
    steps[:5] = 0.05
    steps[5:] = np.maximum(0.1 * v[5:], 0.005)
    simplex = np.tile(v, (11, 1))
    simplex[1 + np.arange(10), np.arange(10)] += steps
    return simplex


def fit_eta(
    beat,
    init: SimulatorParams = DEFAULT_PARAMS,
    budget: int = 2000,
    restarts: int = 3,
    seed: int = 0,
) -> FitResult:
    """Find the parameters whose simulated beat is closest to ``beat``.

    Nelder-Mead searches angles and widths; for every candidate the five
    magnitudes are solved by linear least squares with a ridge toward the
    initial magnitudes, since the simulated z is linear in them. The ridge is
    light on clean beats and grows with the estimated noise level. ``budget``
    bounds objective evaluations per restart and later restarts start from the
    incumbent jittered by +-5%. The returned
    residual (mean squared difference) never exceeds the residual of ``init``.
    """
    target = np.asarray(beat.samples if isinstance(beat, Heartbeat) else beat, dtype=np.float64)
    if target.shape != (init.L,):
        raise ShapeError(f"beat shape {target.shape} does not match L={init.L}")
    rng = np.random.default_rng(seed)
    nfev = 0
    scale = float(np.mean(target ** 2)) + 1e-300
    weight = _ridge_weight(target)
    prior = init.eta[AMP]
    ref = np.maximum(np.abs(prior), 1.0)

    def residual(eta):
        nonlocal nfev
        nfev += 1
        val = float(np.mean((simulate_z(eta, init) - target) ** 2))
        if not math.isfinite(val):
            raise FitDiverged(f"non-finite objective at eta={eta}")
        return val

    def objective(eta):
        return residual(eta) + _amp_penalty(eta[AMP], prior, ref, weight)

    def expand(v10):
        eta = np.concatenate([v10[:5], init.eta[AMP], v10[5:]])
        return _solve_amplitudes(repair_eta(eta), target, init, prior, ref, weight)

    start = init.eta
    init_f = residual(start)
    best_eta, best_f = start, objective(start)
    # Relative error ~1e-9 in the fitted beat; further search only chases rounding.
    floor = 1e-18 * scale
    v = np.concatenate([start[THETA], start[WIDTH]])
    converged = best_f <= floor
    for k in range(restarts):
        if best_f <= floor:
            break
        x0 = v if k == 0 else v * (1.0 + rng.uniform(-0.05, 0.05, 10))
        res = minimize(
            lambda u: objective(expand(u)),
            x0,
            method="Nelder-Mead",
            options=dict(
                maxfev=budget,
                initial_simplex=_simplex(x0),
                adaptive=True,
                xatol=1e-9,
                fatol=1e-19 * scale,
            ),
        )
        cand = expand(res.x)
        f = objective(cand)
        if f < best_f:
            best_eta, best_f, v = cand, f, np.concatenate([cand[THETA], cand[WIDTH]])
        converged = converged or bool(res.success)

    best_eta = repair_eta(best_eta)
    best_res = residual(best_eta)
    if best_res > init_f:
        best_eta, best_res = start, init_f
    return FitResult(init.with_eta(best_eta), best_res, nfev, converged)


# --- distributions ------------------------------------------------------------

def build_distribution(fits: Sequence[FitResult], class_label: str) -> EtaDistribution:
    """Diagonal Gaussian (sample mean, population variance) over fitted parameters."""
    fits = list(fits)
    if not fits:
        raise DataError("cannot build a distribution from zero fits")
    etas = np.stack([f.eta.eta for f in fits])
    return EtaDistribution(class_label, etas.mean(axis=0), etas.var(axis=0), len(fits))


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_eta_matrix(dist: EtaDistribution, n: int, rng_seed=None) -> np.ndarray:
    """``n`` repaired draws as rows of an [n, 15] array."""
    rng = _rng(rng_seed)
    draws = dist.mean + np.sqrt(dist.var) * rng.standard_normal((n, 15))
    return repair_eta(draws)


def sample_eta(dist: EtaDistribution, rng_seed=None, base: SimulatorParams = DEFAULT_PARAMS) -> SimulatorParams:
    return base.with_eta(sample_eta_matrix(dist, 1, rng_seed)[0])


def simulator_only_generate(
    dist: EtaDistribution,
    n: int,
    noise_sigma: float = 0.05,
    rng_seed=None,
    base: SimulatorParams = DEFAULT_PARAMS,
    init: State = DEFAULT_INIT,
    record_id: str = "simulator",
) -> list[Heartbeat]:
    """Beats simulated from sampled parameters plus relative Gaussian jitter.

    The jitter on component i has standard deviation ``noise_sigma * |mean[i]|``.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = _rng(rng_seed)
    scale = noise_sigma * np.abs(dist.mean)
    beats: list[Heartbeat] = []
    failures = 0
    while len(beats) < n:
        eta = dist.mean + np.sqrt(dist.var) * rng.standard_normal(15)
        eta = repair_eta(eta + scale * rng.standard_normal(15))
        try:
            z = integrate(base.with_eta(eta), init).z
        except IntegrationDiverged:
            failures += 1
            if failures >= 10 * max(n, 1):
                raise
            continue
        beats.append(Heartbeat(z, dist.class_label, "simulator", record_id))
    return beats


# --- persistence -------------------------------------------------------------

def save_distributions(dists: Iterable[EtaDistribution], path) -> None:
    """Rows of ``class,component_name,mean,var`` (plus a count row per class)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_distributions(dists))


def format_distributions(dists: Iterable[EtaDistribution]) -> str:
    buf = io.StringIO()
    buf.write("class,component_name,mean,var\n")
    for d in dists:
        for name, m, v in zip(C.ETA_COMPONENTS, d.mean, d.var):
            buf.write(f"{d.class_label},{name},{float(m):.17g},{float(v):.17g}\n")
        buf.write(f"{d.class_label},count,{d.count},0\n")
    return buf.getvalue()


def load_distributions(path) -> dict[str, EtaDistribution]:
    rows: dict[str, dict[str, tuple[float, float]]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["class", "component_name", "mean", "var"]:
            raise DataError(f"bad distribution header {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"expected 4 fields, got {len(row)}", line=lineno)
            label, name, m, v = row
            if label not in C.CLASSES:
                raise DataError(f"unknown class {label!r}", line=lineno)
            if name != "count" and name not in C.ETA_COMPONENTS:
                raise DataError(f"unknown component {name!r}", line=lineno)
            try:
                rows.setdefault(label, {})[name] = (float(m), float(v))
            except ValueError:
                raise DataError(f"non-numeric value in {row}", line=lineno) from None
    out = {}
    for label, comps in rows.items():
        missing = [c for c in C.ETA_COMPONENTS if c not in comps]
        if missing:
            raise DataError(f"class {label} missing components {missing}")
        mean = [comps[c][0] for c in C.ETA_COMPONENTS]
        var = [comps[c][1] for c in C.ETA_COMPONENTS]
        count = int(comps.get("count", (1, 0))[0])
        out[label] = EtaDistribution(label, mean, var, count)
    return out


def save_fits_csv(fits: Sequence[FitResult], path, record_ids: Sequence[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("index,record_id," + ",".join(C.ETA_COMPONENTS) + ",residual,iterations,converged\n")
        for i, f in enumerate(fits):
            rid = record_ids[i] if record_ids is not None else ""
            vals = ",".join(format(float(v), ".17g") for v in f.eta.eta)
            fh.write(f"{i},{rid},{vals},{f.residual:.17g},{f.iterations},{int(f.converged)}\n")
