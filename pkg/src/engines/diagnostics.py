"""
Functionals, identities, closed-form oracles and decay-rate fits evaluated on
solver states and trajectories.
"""
import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid

from .errors import DomainError, FitError, PreconditionError, ReconstructionError
from .model_core import m_of_q, pressure, visc_coeff
from .solver import LagrangianState, dissipation_rate, velocity_gradient

logger = logging.getLogger(__name__)

MEAN_ZERO_TOL = 1e-10
DEFAULT_SLACK = 0.2


def _cq_power_over_q(c, q, power):
    """c^p Q^(p-1), taken as 0 where c = 0."""
    c = np.asarray(c, dtype=float)
    q = np.asarray(q, dtype=float)
    out = np.zeros_like(c)
    mask = c > 0
    out[mask] = np.power(c[mask], power) * np.power(q[mask], power - 1.0)
    return out


def momentum(state):
    return float(np.sum(state.grid.node_weights * state.u))


def energy(state, params):
    """Kinetic plus internal energy: sum u^2/2 dxi + sum c^g Q^(g-1)/(rho_l (g-1)) dxi."""
    if params.gamma <= 1.0:
        raise DomainError(f"energy needs gamma > 1, got {params.gamma}")
    grid = state.grid
    kinetic = 0.5 * np.sum(grid.node_weights * state.u ** 2)
    internal = np.sum(_cq_power_over_q(state.c, state.q, params.gamma)) * grid.dxi
    return float(kinetic + internal / (params.rho_l * (params.gamma - 1.0)))


# --- Closed-form boundary behavior ---

def _endpoint_index(d):
    if d in ("left", 0):
        return 0
    if d in ("right", 1):
        return -1
    raise DomainError(f"endpoint must be 'left'/'right' (or 0/1), got {d!r}")


def exact_boundary_q(t, d, params, initial, regime=None):
    """
    Q at a stress-free end: the boundary ODE integrates to
    Q0 (1 / ((g-b) rho_l c0^(g-b) Q0^(g-b) t + 1))^(1/(g-b)).
    """
    if regime is not None and regime.is_continuous:
        raise DomainError("boundary Q vanishes identically in the continuous regime")
    k = params.gamma - params.beta
    if k <= 0:
        raise DomainError("exact boundary Q needs gamma > beta")
    idx = _endpoint_index(d)
    c0 = initial.c0[idx]
    q0 = initial.q0[idx]
    t = np.asarray(t, dtype=float)
    value = q0 * np.power(1.0 / (k * params.rho_l * c0 ** k * q0 ** k * t + 1.0), 1.0 / k)
    return float(value) if value.ndim == 0 else value


def boundary_rate(params):
    """Exact decay exponent of Q at a stress-free end."""
    return 1.0 / (params.gamma - params.beta)


# --- Theoretical decay rates ---

class RateInfo(NamedTuple):
    theta: float
    rate: float
    log_corrected: bool
    log_power: float


def lyapunov_theta(params):
    beta, gamma = params.beta, params.gamma
    if beta < 1.0:
        return beta, False
    if beta == 1.0:
        return 1.0, True
    ratio = (gamma - 1.0) / (gamma - beta)
    if ratio > 2.0:
        return 2.0, False
    return ratio, True


def theoretical_rate(params, regime):
    """Weighted-estimate exponent theta and the resulting mass decay rate for the regime."""
    if not (params.beta > 0 and params.gamma >= 1.0 + params.beta):
        raise DomainError(f"(A4) violated: beta={params.beta}, gamma={params.gamma}")
    theta, log_corrected = lyapunov_theta(params)
    k = 4.0 if regime.is_continuous else 2.0
    denom = params.gamma - 1.0 + k * params.beta
    log_power = 1.0 / denom if log_corrected else 0.0
    return RateInfo(theta=theta, rate=theta / denom, log_corrected=log_corrected, log_power=log_power)


# --- Auxiliary function w and the weighted functionals ---

def w_function(state, params, t=None):
    """
    w = rho_l u - (1/(1+t)) int_0^xi 1/Q + (1/(1+t)) int_0^1 int_0^x 1/Q, on nodes.
    Requires zero total momentum.
    """
    t = state.t if t is None else t
    grid = state.grid
    mom = momentum(state)
    if abs(mom) > MEAN_ZERO_TOL:
        raise PreconditionError(f"w needs zero mean velocity, got momentum {mom:.3e}")
    volume = np.concatenate(([0.0], np.cumsum(1.0 / state.q) * grid.dxi))
    normalizer = float(np.sum(grid.node_weights * volume))
    return params.rho_l * state.u + (normalizer - volume) / (1.0 + t)


def lyapunov_functional(state, params, t=None, theta=None, case=None, w=None):
    """
    Non-time-integrated part of the weighted estimate:
      I   (beta < 1): (1+t)^th int w^2/2 + (1+t)^(th-1)/(1-b) int c^b Q^(b-1) + rho_l (1+t)^th/(g-1) int c^g Q^(g-1)
      II  (beta = 1): drops the middle term
      III (beta > 1): last term halved
    """
    t = state.t if t is None else t
    if theta is None:
        theta, _ = lyapunov_theta(params)
    case = params.lyapunov_case if case is None else case
    if case == "I" and params.beta >= 1.0:
        raise DomainError(f"Case I weights need beta < 1, got beta={params.beta}")
    if w is None:
        w = w_function(state, params, t)

    grid = state.grid
    growth = (1.0 + t) ** theta
    total = 0.5 * growth * float(np.sum(grid.node_weights * w ** 2))
    internal = float(np.sum(_cq_power_over_q(state.c, state.q, params.gamma)) * grid.dxi)
    internal_weight = params.rho_l * growth / (params.gamma - 1.0)

    if case == "I":
        middle = float(np.sum(_cq_power_over_q(state.c, state.q, params.beta)) * grid.dxi)
        total += (1.0 + t) ** (theta - 1.0) / (1.0 - params.beta) * middle
        total += internal_weight * internal
    elif case == "II":
        total += internal_weight * internal
    elif case == "III":
        total += 0.5 * internal_weight * internal
    else:
        raise DomainError(f"unknown case {case!r}")
    return total


# --- Identity tying the boundary-to-probe momentum to the mass variables ---

def probe_cell(probe_x, n_cells):
    return min(max(int(probe_x * n_cells), 0), n_cells - 1)


def _identity_lhs_term(state, params, k):
    return np.power(state.c[k] * state.q[k], params.beta) / (params.beta * params.rho_l)


def _momentum_to_probe(state, k):
    return float(np.sum(state.grid.node_weights[: k + 1] * state.u[: k + 1]))


def identity_residual_trajectory(trajectory, probe_x, params):
    """
    Residual of (1/(b rho_l)) (cQ)^b + int_0^t (cQ)^g ds
      = (1/(b rho_l)) (c0 Q0)^b - sum_{i <= probe} (u_i(t) - u_i(0)) dxi
    along a sampled trajectory, with trapezoid time quadrature between samples.
    """
    first = trajectory[0]
    k = probe_cell(probe_x, first.n_cells)
    times = np.array([s.t for s in trajectory])
    p_probe = np.array([pressure(s.c[k], s.q[k], params.gamma) for s in trajectory])
    integral = cumulative_trapezoid(p_probe, times, initial=0.0)

    base = _identity_lhs_term(first, params, k)
    mom0 = _momentum_to_probe(first, k)
    residual = [
        _identity_lhs_term(s, params, k) + integral[i] - (base - (_momentum_to_probe(s, k) - mom0))
        for i, s in enumerate(trajectory)
    ]
    return pd.Series(residual, index=pd.Index(times, name="t"), name="identity_residual")


def quadrature_error_estimate(times, values):
    """
    Running bound on the error of the cumulative trapezoid integral of `values`:
    the gap to the same integral over every other sample, made non-decreasing in t.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.size < 3:
        return np.zeros_like(t)
    fine = cumulative_trapezoid(v, t, initial=0.0)
    idx = np.unique(np.r_[np.arange(0, t.size, 2), t.size - 1])
    coarse = cumulative_trapezoid(v[idx], t[idx], initial=0.0)
    return np.maximum.accumulate(np.abs(fine - np.interp(t, t[idx], coarse)))


# --- Power-law fits ---

@dataclass(frozen=True)
class DecayFit:
    exponent: float
    window: Tuple[float, float]
    r2: float
    theoretical_rate: Optional[float]
    log_corrected: bool
    verdict: Optional[bool]
    n_points: int


def fit_decay(times, values, window=None, log_power=0.0, theoretical_rate=None, slack=DEFAULT_SLACK):
    """
    Least-squares slope of log(value) - log_power * log(log(1+t)) against log(1+t).

    The verdict (when a theoretical rate is given) passes when the fitted decay
    is at least as fast as the rate minus the slack.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is None:
        window = (t.max() / 10.0, t.max())
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise FitError(f"empty fit window [{lo}, {hi}]")
    if lo > 0 and hi < 10.0 * lo:
        raise FitError(f"fit window [{lo}, {hi}] spans less than one decade")

    mask = (t >= lo) & (t <= hi)
    if log_power > 0:
        mask &= t > 0
    if mask.sum() < 3:
        raise FitError(f"need at least 3 points in [{lo}, {hi}], got {int(mask.sum())}")
    if np.any(v[mask] <= 0) or not np.all(np.isfinite(v[mask])):
        raise FitError("values must be positive and finite inside the fit window")

    x = np.log1p(t[mask])
    y = np.log(v[mask])
    if log_power > 0:
        y = y - log_power * np.log(x)

    slope, intercept = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else min(max(1.0 - ss_res / ss_tot, 0.0), 1.0)

    verdict = None
    if theoretical_rate is not None:
        verdict = bool(slope <= -theoretical_rate * (1.0 - slack))
    return DecayFit(exponent=float(slope), window=(lo, hi), r2=r2, theoretical_rate=theoretical_rate,
                    log_corrected=log_power > 0, verdict=verdict, n_points=int(mask.sum()))


def final_decade_increase(times, values):
    """Share of the cumulative time integral of `values` gained over the last decade of t."""
    t = np.asarray(times, dtype=float)
    cum = cumulative_trapezoid(np.asarray(values, dtype=float), t, initial=0.0)
    if cum[-1] <= 0:
        return 0.0
    at_decade = np.interp(t[-1] / 10.0, t, cum)
    return float((cum[-1] - at_decade) / cum[-1])


def decade_increase_ratio(times, values):
    """
    Growth of the cumulative integral over the last decade [T/10, T] divided by
    its growth over the decade before. Below 1 when the increments shrink.
    """
    t = np.asarray(times, dtype=float)
    cum = cumulative_trapezoid(np.asarray(values, dtype=float), t, initial=0.0)
    edges = np.interp([t[-1] / 100.0, t[-1] / 10.0], t, cum)
    previous = edges[1] - edges[0]
    if previous <= 0:
        raise FitError("no growth over the second-to-last decade")
    return float((cum[-1] - edges[1]) / previous)


# --- Eulerian reconstruction ---

@dataclass(frozen=True)
class EulerianSample:
    a_t: float
    b_t: float
    x: np.ndarray
    x_center: np.ndarray
    m: np.ndarray
    n: np.ndarray
    u: np.ndarray
    alpha_l: np.ndarray
    alpha_g: np.ndarray
    rho_g: np.ndarray


def reconstruct_eulerian(state, params, a_t=None):
    """Maps the mass grid back to physical space: each cell carries liquid mass dxi over width dxi/m."""
    a_t = state.a if a_t is None else a_t
    m = np.asarray(m_of_q(state.q, params.rho_l), dtype=float)
    if np.any(m <= 0):
        raise ReconstructionError("a cell with zero liquid mass has infinite width")
    widths = state.grid.dxi / m
    x = a_t + np.concatenate(([0.0], np.cumsum(widths)))
    n = state.c * m
    alpha_l = m / params.rho_l
    alpha_g = 1.0 - alpha_l
    with np.errstate(divide="ignore", invalid="ignore"):
        rho_g = np.where(alpha_g > 0, n / alpha_g, np.nan)
    return EulerianSample(a_t=float(x[0]), b_t=float(x[-1]), x=x, x_center=0.5 * (x[:-1] + x[1:]),
                          m=m, n=n, u=np.array(state.u), alpha_l=alpha_l, alpha_g=alpha_g, rho_g=rho_g)


# --- Grid refinement helpers ---

def restrict_to_coarse(fine, coarse_cells):
    """Conservative restriction: specific volume averaged over merged cells, velocity at shared nodes."""
    ratio, rem = divmod(fine.n_cells, coarse_cells)
    if rem or ratio < 1:
        raise PreconditionError(f"{fine.n_cells} cells cannot be merged into {coarse_cells}")
    volume = (1.0 / fine.q).reshape(coarse_cells, ratio).mean(axis=1)
    c = fine.c.reshape(coarse_cells, ratio).mean(axis=1)
    return LagrangianState(t=fine.t, c=c, q=1.0 / volume, u=np.array(fine.u[::ratio]),
                           a=fine.a, dissipated=fine.dissipated, damped=fine.damped)


def l1_distance(a, b):
    """L1 distance of Q (cells) plus u (nodes) on a common grid."""
    if a.n_cells != b.n_cells:
        raise PreconditionError("states live on different grids")
    grid = a.grid
    return float(np.sum(np.abs(a.q - b.q)) * grid.dxi + np.sum(grid.node_weights * np.abs(a.u - b.u)))


# --- Per-sample monitor ---

@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    log1p_t: float
    sup_m: float
    sup_n: float
    energy: float
    dissipation: float
    momentum: float
    sup_cq: float
    lp_cq_gamma: float
    moment_2n: float
    grad_cq_beta: float
    q_left: float
    q_right: float
    identity_residual: float
    w_norm: float
    lyapunov: float
    cumulative_dissipation: float
    numerical_dissipation: float
    moment_dissipation: float
    a_t: float
    b_t: float


class TrajectoryMonitor:
    """
    Evaluates every monitored functional on states of one run.

    The identity residual needs the time integral of (cQ)^gamma at the probe
    cell; `observe` accumulates it with the trapezoid rule at every accepted
    step and keeps it per observed time, so `record` of any observed state
    gives the same result whenever it is called. A state past the last
    observed step extends the history first.
    """

    def __init__(self, params, regime, initial_state, probe_x=0.5):
        self.params = params
        self.regime = regime
        self.initial_state = initial_state
        self.probe = probe_cell(probe_x, initial_state.n_cells)
        self.theta, _ = lyapunov_theta(params)
        self._times = [float(initial_state.t)]
        self._integrals = [0.0]
        self._last_p = self._probe_pressure(initial_state)

    def _probe_pressure(self, state):
        return pressure(state.c[self.probe], state.q[self.probe], self.params.gamma)

    def observe(self, state):
        last_t = self._times[-1]
        if state.t <= last_t:
            return
        p_now = self._probe_pressure(state)
        self._integrals.append(self._integrals[-1] + 0.5 * (state.t - last_t) * (self._last_p + p_now))
        self._times.append(float(state.t))
        self._last_p = p_now

    def integral_at(self, t):
        """Probe (cQ)^gamma integrated up to an observed time t."""
        i = int(np.searchsorted(self._times, t))
        tol = 1e-12 * max(1.0, abs(t))
        for j in (i - 1, i):
            if 0 <= j < len(self._times) and abs(self._times[j] - t) <= tol:
                return self._integrals[j]
        raise PreconditionError(f"t={t} was never observed (history covers {self._times[0]}..{self._times[-1]})")

    def identity_residual(self, state):
        self.observe(state)
        k = self.probe
        lhs = _identity_lhs_term(state, self.params, k) + self.integral_at(state.t)
        rhs = _identity_lhs_term(self.initial_state, self.params, k) - (
            _momentum_to_probe(state, k) - _momentum_to_probe(self.initial_state, k))
        return float(lhs - rhs)

    def record(self, state):
        params = self.params
        grid = state.grid
        dxi = grid.dxi
        weights = grid.node_weights
        m = np.asarray(m_of_q(state.q, params.rho_l), dtype=float)
        cq = state.c * state.q
        mom = momentum(state)

        # The system only sees velocity gradients, so w is evaluated in the zero-momentum frame
        centered = dataclasses.replace(state, u=state.u - mom)
        w = w_function(centered, params)

        u_cells = 0.5 * (state.u[:-1] + state.u[1:])
        n = params.moment_n
        e = visc_coeff(state.c, state.q, params.beta)
        g_beta = np.power(cq, params.beta)

        try:
            b_t = reconstruct_eulerian(state, params).b_t
        except ReconstructionError:
            b_t = float("nan")

        return DiagnosticsRecord(
            t=float(state.t),
            log1p_t=math.log1p(state.t),
            sup_m=float(m.max()),
            sup_n=float((state.c * m).max()),
            energy=energy(state, params),
            dissipation=dissipation_rate(state.c, state.q, state.u, params, dxi),
            momentum=mom,
            sup_cq=float(cq.max()),
            lp_cq_gamma=float(np.sum(np.power(cq, params.gamma)) * dxi),
            moment_2n=float(np.sum(weights * state.u ** (2 * n))),
            grad_cq_beta=float(np.sum(np.diff(g_beta) ** 2) / dxi),
            q_left=float(state.q[0]),
            q_right=float(state.q[-1]),
            identity_residual=self.identity_residual(state),
            w_norm=float(np.sum(weights * w ** 2)),
            lyapunov=lyapunov_functional(centered, params, theta=self.theta, w=w),
            cumulative_dissipation=float(state.dissipated),
            numerical_dissipation=float(state.damped),
            moment_dissipation=float(np.sum(e * u_cells ** (2 * n - 2) * velocity_gradient(state.u, dxi) ** 2) * dxi),
            a_t=float(state.a),
            b_t=b_t,
        )


def records_to_frame(records):
    columns = [f.name for f in dataclasses.fields(DiagnosticsRecord)]
    return pd.DataFrame([dataclasses.asdict(r) for r in records], columns=columns)
