"""
Time stepping for the transformed liquid-gas system on a staggered Lagrangian grid.

c and Q live on cell centers, u on nodes. The velocity update is implicit in the
viscous term and uses the (possibly energy-corrected) pressure explicitly; the
liquid mass is advanced through the specific volume V = 1/Q, for which
V_t = rho_l u_xi holds exactly.
"""
import dataclasses
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import solve_banded

from .errors import PreconditionError, SolverError
from .model_core import pressure, visc_coeff

logger = logging.getLogger(__name__)

# Relative change of the secant pressure below which the sweeps stop.
PRESSURE_SWEEP_RTOL = 1e-13
# Below this relative change of V the secant pressure is replaced by the midpoint pressure.
SECANT_SWITCH = 1e-7


@dataclass(frozen=True)
class Grid:
    """Uniform grid on the mass interval [0, 1]."""
    n_cells: int

    @property
    def dxi_exact(self):
        return Fraction(1, self.n_cells)

    @property
    def dxi(self):
        return float(self.dxi_exact)

    @property
    def centers(self):
        return (np.arange(self.n_cells) + 0.5) * self.dxi

    @property
    def nodes(self):
        return np.arange(self.n_cells + 1) * self.dxi

    @property
    def node_weights(self):
        """Control volumes of the nodes: half cells at the two ends."""
        w = np.full(self.n_cells + 1, self.dxi)
        w[[0, -1]] = 0.5 * self.dxi
        return w


class StepControl(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    dt_init: float = Field(default=1e-3, gt=0)
    cfl_visc: float = Field(default=1.0, gt=0, le=1)
    dt_min: float = Field(default=1e-12, gt=0)
    t_end: float = Field(default=1.0, ge=0)
    positivity_guard: float = Field(default=0.5, gt=0, lt=1)
    # 0 keeps the plain explicit pressure; k > 0 allows up to k energy-consistent re-solves
    pressure_sweeps: int = Field(default=8, ge=0)
    viscous_mode: Literal["implicit", "explicit"] = "implicit"

    @model_validator(mode="after")
    def _check_dt_bounds(self):
        if self.dt_min > self.dt_init:
            raise ValueError(f"dt_min={self.dt_min} exceeds dt_init={self.dt_init}")
        return self


@dataclass(frozen=True)
class LagrangianState:
    """
    Snapshot of the solution. `c` is never rewritten after initialization.
    `a` is the Eulerian position of the left free boundary and `dissipated`
    the accumulated viscous dissipation since t = 0. `damped` collects the
    kinetic energy removed by the implicit update itself, 1/2 sum w (u* - u)^2.
    """
    t: float
    c: np.ndarray
    q: np.ndarray
    u: np.ndarray
    a: float = 0.0
    dissipated: float = 0.0
    damped: float = 0.0

    def __post_init__(self):
        for arr in (self.c, self.q, self.u):
            arr.setflags(write=False)

    @classmethod
    def from_initial(cls, initial):
        return cls(t=0.0, c=initial.c0, q=np.array(initial.q0, dtype=float),
                   u=np.array(initial.u0, dtype=float), a=initial.a0)

    @property
    def n_cells(self):
        return len(self.c)

    @property
    def grid(self):
        return Grid(self.n_cells)


def velocity_gradient(u, dxi):
    return np.diff(u) / dxi


def dissipation_rate(c, q, u, params, dxi):
    """Discrete integral of E u_xi^2 over the cells."""
    e = visc_coeff(c, q, params.beta)
    return float(np.sum(e * velocity_gradient(u, dxi) ** 2) * dxi)


def suggest_dt(state, params, ctrl):
    """Largest dt allowed by dt_init, the positivity bound and (explicit mode) the viscous CFL."""
    dxi = state.grid.dxi
    rate = np.max(np.abs(params.rho_l * state.q * velocity_gradient(state.u, dxi)))
    dt = ctrl.dt_init
    if rate > 0:
        dt = min(dt, 0.5 * ctrl.positivity_guard / rate)
    if ctrl.viscous_mode == "explicit":
        e_max = np.max(visc_coeff(state.c, state.q, params.beta))
        if e_max > 0:
            dt = min(dt, ctrl.cfl_visc * dxi ** 2 / (2.0 * e_max))
    return dt


def _solve_velocity(u, e, p, dt, grid):
    """
    Solves w_i (u*_i - u_i) = dt (sigma_i - sigma_{i-1}) with the face flux
    sigma_j = E_j (u*_{j+1} - u*_j)/dxi - P_j and sigma = 0 beyond both ends.
    """
    dxi = grid.dxi
    w = grid.node_weights
    k = dt * e / dxi

    k_left = np.concatenate(([0.0], k))
    k_right = np.concatenate((k, [0.0]))
    p_left = np.concatenate(([0.0], p))
    p_right = np.concatenate((p, [0.0]))

    rhs = w * u - dt * p_right + dt * p_left

    ab = np.zeros((3, grid.n_cells + 1))
    ab[0, 1:] = -k
    ab[1, :] = w + k_left + k_right
    ab[2, :-1] = -k
    return solve_banded((1, 1), ab, rhs, check_finite=False)


def _explicit_velocity(u, e, p, dt, grid):
    dxi = grid.dxi
    sigma = e * velocity_gradient(u, dxi) - p
    flux = np.concatenate(([0.0], sigma, [0.0]))
    return u + dt * np.diff(flux) / grid.node_weights


def _secant_pressure(c, v_old, v_new, gamma):
    """Pressure whose work matches the exact change of c^g V^(1-g)/(rho_l (g-1))."""
    dv = v_new - v_old
    v_mid = 0.5 * (v_old + v_new)
    c_g = np.power(c, gamma)
    small = np.abs(dv) <= SECANT_SWITCH * v_old
    safe_dv = np.where(small, 1.0, dv)
    secant = c_g * (np.power(v_old, 1.0 - gamma) - np.power(v_new, 1.0 - gamma)) / ((gamma - 1.0) * safe_dv)
    return np.where(small, c_g * np.power(v_mid, -gamma), secant)


def _try_step(state, params, ctrl, dt):
    """One attempt at dt. Returns the new state, or None if positivity is violated."""
    grid = state.grid
    dxi = grid.dxi
    c, q, u = state.c, state.q, state.u
    v_old = 1.0 / q

    e = visc_coeff(c, q, params.beta)
    p_used = pressure(c, q, params.gamma)
    advance = _explicit_velocity if ctrl.viscous_mode == "explicit" else _solve_velocity

    u_new = advance(u, e, p_used, dt, grid)
    v_new = v_old + dt * params.rho_l * velocity_gradient(u_new, dxi)

    for sweep in range(ctrl.pressure_sweeps):
        if np.any(v_new <= 0) or not np.all(np.isfinite(v_new)):
            break
        p_bar = _secant_pressure(c, v_old, v_new, params.gamma)
        change = np.max(np.abs(p_bar - p_used))
        p_used = p_bar
        u_new = advance(u, e, p_used, dt, grid)
        v_new = v_old + dt * params.rho_l * velocity_gradient(u_new, dxi)
        if change <= PRESSURE_SWEEP_RTOL * max(1.0, float(np.max(np.abs(p_bar)))):
            break

    if not (np.all(np.isfinite(u_new)) and np.all(np.isfinite(v_new))):
        logger.error(f"Non-finite values at t={state.t:.6g}, dt={dt:.3e}: "
                     f"min q={q.min():.3e}, max |u|={np.max(np.abs(u)):.3e}")
        raise SolverError(f"non-finite values after step at t={state.t}", state=state)

    if np.any(v_new <= 0):
        return None
    q_new = 1.0 / v_new
    if np.any(q_new < q * (1.0 - ctrl.positivity_guard)):
        return None

    return LagrangianState(
        t=state.t + dt,
        c=c,
        q=q_new,
        u=u_new,
        a=state.a + 0.5 * dt * (u[0] + u_new[0]),
        dissipated=state.dissipated + dt * dissipation_rate(c, q, u_new, params, dxi),
        damped=state.damped + 0.5 * float(np.sum(grid.node_weights * (u_new - u) ** 2)),
    )


def step(state, params, regime, ctrl, dt=None):
    """
    Advances the state by one accepted step, halving dt until the update keeps
    every Q positive and no Q drops by more than ctrl.positivity_guard.

    Both regimes use the same zero-flux end closure: for stress-free ends the
    ghost flux E u_xi - P is zero by the boundary condition, for continuous
    vacuum c and Q vanish at the end nodes so E and P vanish there.
    """
    if dt is None:
        dt = suggest_dt(state, params, ctrl)
    while True:
        if dt < ctrl.dt_min:
            logger.error(f"Time step underflow at t={state.t:.6g} ({regime.tag}): "
                         f"dt={dt:.3e} < dt_min={ctrl.dt_min:.3e}, min q={state.q.min():.3e}, "
                         f"max |u|={np.max(np.abs(state.u)):.3e}")
            raise SolverError(f"dt underflow at t={state.t}", state=state)
        new_state = _try_step(state, params, ctrl, dt)
        if new_state is not None:
            return new_state
        logger.warning(f"Positivity guard hit at t={state.t:.6g}; halving dt={dt:.3e}")
        dt *= 0.5


def _check_sample_times(sample_times, t_end):
    times = np.asarray(sample_times, dtype=float)
    if times.size == 0:
        raise PreconditionError("sample_times must not be empty")
    if times[0] < 0 or np.any(np.diff(times) <= 0):
        raise PreconditionError("sample_times must be non-negative and strictly increasing")
    if times[-1] > t_end * (1.0 + 1e-12):
        raise PreconditionError(f"last sample time {times[-1]} exceeds t_end={t_end}")
    return times


def iter_run(initial, params, regime, ctrl, sample_times, on_step=None):
    """
    Yields the state at every requested sample time. Steps are clipped so that
    they land exactly on the sample times; nothing is interpolated.
    on_step, if given, is called with every accepted state.
    """
    times = _check_sample_times(sample_times, ctrl.t_end)
    state = LagrangianState.from_initial(initial)
    n_steps = 0
    logger.info(f"Starting run: regime={regime.tag}, N={state.n_cells}, t_end={ctrl.t_end}, "
                f"gamma={params.gamma}, beta={params.beta}")

    for t_sample in times:
        tol = 1e-12 * max(1.0, t_sample)
        while t_sample - state.t > tol:
            dt = min(suggest_dt(state, params, ctrl), t_sample - state.t)
            state = step(state, params, regime, ctrl, dt=dt)
            if abs(state.t - t_sample) <= tol:
                state = dataclasses.replace(state, t=float(t_sample))
            n_steps += 1
            if on_step is not None:
                on_step(state)
        yield state

    logger.info(f"Run complete: {n_steps} steps, t={state.t:.6g}, min q={state.q.min():.4e}")


def run(initial, params, regime, ctrl, sample_times, on_step=None):
    return list(iter_run(initial, params, regime, ctrl, sample_times, on_step=on_step))
