"""Three-ODE ECG model and its explicit Euler solution.

The (x, y) pair circles a unit-radius limit cycle at angular velocity
``omega``; each wave event pushes ``z`` up or down as the phase passes its
angle, while ``z`` relaxes towards a respiratory baseline. All functions here
work on plain Python floats so that ``integrate`` and ``euler_step`` share
bit-identical arithmetic.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.signal import lfilter

from . import constants as C
from .errors import DomainError, IntegrationDiverged

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SimulatorParams:
    """Wave-event parameters plus the global constants of one beat class."""

    theta: tuple[float, ...] = C.DEFAULT_THETA
    a: tuple[float, ...] = C.DEFAULT_A
    b: tuple[float, ...] = C.DEFAULT_B
    omega: float = C.DEFAULT_OMEGA
    A: float = C.BASELINE_AMPLITUDE
    f2: float = C.RESPIRATORY_FREQ
    fs: float = C.FS
    L: int = C.BEAT_LEN
    dt: float = field(init=False)

    def __post_init__(self):
        for name in ("theta", "a", "b"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != 5:
                raise DomainError(f"{name} needs 5 components, got {len(vals)}")
            object.__setattr__(self, name, vals)
        object.__setattr__(self, "dt", 1.0 / self.fs)
        self.validate()

    def validate(self) -> None:
        th = self.theta
        if not all(-math.pi <= t < math.pi for t in th):
            raise DomainError(f"theta outside [-pi, pi): {th}")
        if not all(th[i] < th[i + 1] for i in range(4)):
            raise DomainError(f"theta must be strictly increasing P<Q<R<S<T: {th}")
        if not all(bb > 0 for bb in self.b):
            raise DomainError(f"b must be positive: {self.b}")
        if not all(math.isfinite(v) for v in self.a):
            raise DomainError(f"a must be finite: {self.a}")
        if self.dt * self.fs != 1.0:
            raise DomainError(f"fs={self.fs} gives dt*fs != 1")
        if self.L < 1 or self.omega <= 0 or self.f2 <= 0 or self.A < 0:
            raise DomainError("need L >= 1, omega > 0, f2 > 0, A >= 0")

    @property
    def eta(self) -> np.ndarray:
        """The 15 free components in (theta, a, b) order."""
        return np.array(self.theta + self.a + self.b, dtype=np.float64)

    def with_eta(self, eta: Sequence[float]) -> "SimulatorParams":
        eta = [float(v) for v in eta]
        if len(eta) != 15:
            raise DomainError(f"eta needs 15 components, got {len(eta)}")
        return replace(self, theta=tuple(eta[0:5]), a=tuple(eta[5:10]), b=tuple(eta[10:15]))


DEFAULT_PARAMS = SimulatorParams()


class State(NamedTuple):
    x: float
    y: float
    z: float
    t: float


DEFAULT_INIT = State(C.X0, C.Y0, 0.0, 0.0)


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    params: SimulatorParams

    def __len__(self) -> int:
        return len(self.t)

    def state(self, i: int) -> State:
        return State(float(self.x[i]), float(self.y[i]), float(self.z[i]), float(self.t[i]))

    @property
    def states(self) -> list[State]:
        return [self.state(i) for i in range(len(self))]

    def to_csv(self, path=None) -> str:
        """Write ``t,x,y,z`` rows at 17 significant digits; returns the text."""
        buf = io.StringIO()
        buf.write("t,x,y,z\n")
        for row in zip(self.t, self.x, self.y, self.z):
            buf.write(",".join(format(float(v), ".17g") for v in row) + "\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def alpha(x: float, y: float) -> float:
    return 1.0 - math.sqrt(x * x + y * y)


def theta_of(x: float, y: float) -> float:
    if x == 0.0 and y == 0.0:
        raise DomainError("phase undefined at the origin")
    return math.atan2(y, x)


def wrap_angle(d: float) -> float:
    """Wrap an angle difference into [-pi, pi)."""
    return (d + math.pi) % TWO_PI - math.pi


def delta_theta(x: float, y: float, theta_beta: float) -> float:
    return wrap_angle(theta_of(x, y) - theta_beta)


def baseline(t: float, A: float, f2: float) -> float:
    return A * math.sin(TWO_PI * f2 * t)


def f_x(x: float, y: float, params: SimulatorParams) -> float:
    return alpha(x, y) * x - params.omega * y


def f_y(x: float, y: float, params: SimulatorParams) -> float:
    return alpha(x, y) * y + params.omega * x


def event_forcing(x: float, y: float, params: SimulatorParams) -> float:
    """Sum of the five wave-event terms (without the leading minus)."""
    total = 0.0
    phase = None
    for th, a, b in zip(params.theta, params.a, params.b):
        # A zero-magnitude event contributes nothing, even where the phase is undefined.
        if a == 0.0:
            continue
        if phase is None:
            phase = theta_of(x, y)
        d = wrap_angle(phase - th)
        total += a * d * math.exp(-d * d / (2.0 * b * b))
    return total


def f_z(x: float, y: float, z: float, t: float, params: SimulatorParams) -> float:
    return -event_forcing(x, y, params) - (z - baseline(t, params.A, params.f2))


def _next_time(t: float, params: SimulatorParams) -> float:
    k = round(t * params.fs)
    if k * params.dt == t:
        # Keep grid times exact: t_l = l * dt.
        return (k + 1) * params.dt
    return t + params.dt


def euler_step(state: State, params: SimulatorParams) -> State:
    x, y, z, t = state
    dt = params.dt
    nx = x + f_x(x, y, params) * dt
    ny = y + f_y(x, y, params) * dt
    nz = z + f_z(x, y, z, t, params) * dt
    if not (math.isfinite(nx) and math.isfinite(ny) and math.isfinite(nz)):
        raise IntegrationDiverged(-1, f"non-finite state after step from {state}")
    return State(nx, ny, nz, _next_time(t, params))


def _derivs(s: State, params: SimulatorParams) -> tuple[float, float, float]:
    return f_x(s.x, s.y, params), f_y(s.x, s.y, params), f_z(s.x, s.y, s.z, s.t, params)


def rk4_step(state: State, params: SimulatorParams) -> State:
    """Classical Runge-Kutta step; cross-check only, never used by the losses."""
    dt = params.dt
    h = 0.5 * dt
    k1 = _derivs(state, params)
    s2 = State(state.x + h * k1[0], state.y + h * k1[1], state.z + h * k1[2], state.t + h)
    k2 = _derivs(s2, params)
    s3 = State(state.x + h * k2[0], state.y + h * k2[1], state.z + h * k2[2], state.t + h)
    k3 = _derivs(s3, params)
    s4 = State(state.x + dt * k3[0], state.y + dt * k3[1], state.z + dt * k3[2], state.t + dt)
    k4 = _derivs(s4, params)
    out = [
        v + dt / 6.0 * (d1 + 2 * d2 + 2 * d3 + d4)
        for v, d1, d2, d3, d4 in zip(state[:3], k1, k2, k3, k4)
    ]
    if not all(math.isfinite(v) for v in out):
        raise IntegrationDiverged(-1)
    return State(out[0], out[1], out[2], _next_time(state.t, params))


def integrate(
    params: SimulatorParams = DEFAULT_PARAMS,
    init: State = DEFAULT_INIT,
    method: str = "euler",
) -> Trajectory:
    """Run the stepper for ``params.L`` samples starting at ``init``."""
    if method == "euler":
        step = euler_step
    elif method == "rk4":
        step = rk4_step
    else:
        raise ValueError(f"unknown method {method!r}")
    init = State(*(float(v) for v in init))
    if not all(math.isfinite(v) for v in init):
        raise DomainError(f"non-finite initial state {init}")
    states = [init]
    s = init
    for i in range(params.L - 1):
        try:
            s = step(s, params)
        except IntegrationDiverged:
            raise IntegrationDiverged(i + 1) from None
        states.append(s)
    arr = np.array(states, dtype=np.float64)
    return Trajectory(t=arr[:, 3], x=arr[:, 0], y=arr[:, 1], z=arr[:, 2], params=params)


# ---------------------------------------------------------------------------
# Vectorized helpers. These evaluate the same expressions over arrays; results
# may differ from the scalar path in the last ulp, so they are used for losses
# and fitting, never for the canonical trajectory.

_XY_CACHE: dict = {}


def xy_path(params: SimulatorParams = DEFAULT_PARAMS, x0: float = C.X0, y0: float = C.Y0):
    """Euler (x, y) solution of length L; identical bits to ``integrate``'s x, y."""
    key = (params.omega, params.fs, params.L, float(x0), float(y0))
    hit = _XY_CACHE.get(key)
    if hit is None:
        xs = [float(x0)]
        ys = [float(y0)]
        x, y = xs[0], ys[0]
        dt = params.dt
        for _ in range(params.L - 1):
            x, y = x + f_x(x, y, params) * dt, y + f_y(x, y, params) * dt
            xs.append(x)
            ys.append(y)
        hit = (np.array(xs), np.array(ys))
        hit[0].flags.writeable = False
        hit[1].flags.writeable = False
        _XY_CACHE[key] = hit
    return hit


def grid_times(params: SimulatorParams = DEFAULT_PARAMS) -> np.ndarray:
    return np.arange(params.L) * params.dt


def forcing_matrix(etas, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Event forcing (the positive sum inside f_z) for each eta row and sample.

    etas: [n, 15] or [15]; returns [n, len(x)] or [len(x)].
    """
    etas = np.asarray(etas, dtype=np.float64)
    single = etas.ndim == 1
    etas = np.atleast_2d(etas)
    th, a, b = etas[:, None, 0:5], etas[:, None, 5:10], etas[:, None, 10:15]
    phase = np.arctan2(y, x)[None, :, None]
    d = (phase - th + math.pi) % TWO_PI - math.pi
    F = (a * d * np.exp(-d * d / (2.0 * b * b))).sum(axis=-1)
    return F[0] if single else F


def simulate_z(etas, params: SimulatorParams = DEFAULT_PARAMS, z0: float = 0.0) -> np.ndarray:
    """Fast Euler z solution for one or many eta vectors from the default (x0, y0)."""
    x, y = xy_path(params)
    F = forcing_matrix(etas, x, y)
    base = params.A * np.sin(TWO_PI * params.f2 * grid_times(params))
    dt = params.dt
    # z[l+1] = (1 - dt) z[l] + dt (base[l] - F[l]) as a first-order IIR filter.
    u = base - F
    z = lfilter([0.0, dt], [1.0, -(1.0 - dt)], u, axis=-1)
    if z0 != 0.0:
        z = z + z0 * (1.0 - dt) ** np.arange(params.L)
    return z
