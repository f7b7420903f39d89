import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import AssumptionError, DomainError, PreconditionError

logger = logging.getLogger(__name__)

# Finiteness bound for the discrete (A3) gradient check.
A3_GRADIENT_BOUND = 1e6
MIN_CELLS = 8
# Relative slack when comparing sampled profiles against the (A1)' envelopes.
ENVELOPE_RTOL = 1e-12


def _scalar_or_array(result):
    return float(result) if np.ndim(result) == 0 else result


def _check_nonnegative(name, value):
    arr = np.asarray(value, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise DomainError(f"{name} must be finite and non-negative")
    return arr


# --- Constitutive algebra of the transformed system ---

def q_of_m(m, rho_l):
    """Q(m) = m / (rho_l - m), the transformed liquid mass. Valid for 0 <= m < rho_l."""
    m_arr = _check_nonnegative("m", m)
    if np.any(m_arr >= rho_l):
        raise DomainError(f"m must stay below rho_l={rho_l}")
    return _scalar_or_array(m_arr / (rho_l - m_arr))


def m_of_q(q, rho_l):
    """Inverse of q_of_m: m = rho_l * Q / (1 + Q)."""
    q_arr = np.asarray(q, dtype=float)
    if np.any(np.isnan(q_arr)) or np.any(q_arr < 0):
        raise DomainError("Q must be non-negative")
    return _scalar_or_array(rho_l * q_arr / (1.0 + q_arr))


def pressure(c, q, gamma):
    """P = (c Q)^gamma. Depends on the product cQ only."""
    c_arr = _check_nonnegative("c", c)
    q_arr = _check_nonnegative("Q", q)
    return _scalar_or_array(np.power(c_arr * q_arr, gamma))


def visc_coeff(c, q, beta):
    """E = c^beta Q^(beta+1); vanishes at vacuum."""
    c_arr = _check_nonnegative("c", c)
    q_arr = _check_nonnegative("Q", q)
    return _scalar_or_array(np.power(c_arr, beta) * np.power(q_arr, beta + 1.0))


def phi(xi):
    """Vacuum envelope phi(x) = x (1 - x)."""
    xi = np.asarray(xi, dtype=float)
    return xi * (1.0 - xi)


def min_moment_n(gamma, beta):
    """Smallest integer n allowed by (A2): n >= (2 gamma + beta) / (2 beta)."""
    return int(math.ceil((2.0 * gamma + beta) / (2.0 * beta)))


# --- Parameters and regimes ---

class ModelParams(BaseModel):
    """
    Physical constants of the simplified model (A = B = 1).

    moment_n defaults to the smallest integer admitted by (A2).
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    gamma: float = Field(description="Adiabatic exponent.")
    beta: float = Field(description="Viscosity exponent.")
    rho_l: float = Field(default=1.0, description="Constant liquid density.")
    moment_n: int = Field(default=1, description="Order n of the 2n-th velocity moment.")

    @model_validator(mode="before")
    @classmethod
    def _check_a4_and_fill_moment(cls, data):
        if not isinstance(data, dict):
            return data
        try:
            gamma = float(data["gamma"])
            beta = float(data["beta"])
        except (KeyError, TypeError, ValueError):
            # Field validation reports the missing or malformed value
            return data
        if not beta > 0:
            raise AssumptionError("(A4)", f"beta must be positive, got beta={beta}")
        if not gamma >= 1.0 + beta:
            raise AssumptionError("(A4)", f"need gamma >= 1 + beta = {1.0 + beta}, got gamma={gamma}")
        if data.get("moment_n") is None:
            data = {**data, "moment_n": min_moment_n(gamma, beta)}
        return data

    @model_validator(mode="after")
    def _check_ranges(self):
        if not self.rho_l > 0:
            raise ValueError(f"rho_l must be positive, got {self.rho_l}")
        needed = min_moment_n(self.gamma, self.beta)
        if self.moment_n < needed:
            raise AssumptionError("(A2)", f"moment_n must be >= {needed}, got {self.moment_n}")
        return self

    @property
    def lyapunov_case(self):
        if self.beta < 1.0:
            return "I"
        if self.beta == 1.0:
            return "II"
        return "III"


class VacuumRegime(BaseModel):
    """
    Boundary-value problem being solved: masses jumping to vacuum at the ends
    (stress-free ends) or vanishing continuously like powers of phi.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    tag: Literal["discontinuous", "continuous"] = "discontinuous"
    alpha: Optional[float] = None
    k_consts: Optional[Tuple[float, float, float, float]] = None

    @model_validator(mode="after")
    def _check_envelope(self):
        if self.tag == "discontinuous":
            return self
        if self.alpha is None or self.k_consts is None:
            raise AssumptionError("(A1)'", "continuous regime needs alpha and K1..K4")
        if not 0.0 < self.alpha < 1.0:
            raise AssumptionError("(A1)'", f"alpha must lie in (0, 1), got {self.alpha}")
        k1, k2, k3, k4 = self.k_consts
        if not (0.0 < k1 <= k2 and 0.0 < k3 <= k4):
            raise AssumptionError("(A1)'", f"need 0 < K1 <= K2 and 0 < K3 <= K4, got {self.k_consts}")
        return self

    @classmethod
    def discontinuous(cls):
        return cls(tag="discontinuous")

    @classmethod
    def continuous(cls, alpha, k_consts):
        return cls(tag="continuous", alpha=alpha, k_consts=tuple(k_consts))

    @property
    def is_continuous(self):
        return self.tag == "continuous"

    def check_density_cap(self, rho_l):
        """K2 * sup phi^(alpha/2) < rho_l, so the upper mass envelope stays below the liquid density."""
        if not self.is_continuous:
            return
        k2 = self.k_consts[1]
        cap = k2 * 0.25 ** (self.alpha / 2.0)
        if not cap < rho_l:
            raise AssumptionError("(A1)'", f"K2 * sup phi^(alpha/2) = {cap} must be below rho_l = {rho_l}")


# --- Closed-form initial profiles on the mass coordinate xi in [0, 1] ---

class Profile(BaseModel):
    """Mass profile: constant `value`, bump `value + amplitude sin^2(pi xi)`, or `scale * phi^power`."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["constant", "bump", "phi_power"] = "constant"
    value: float = 0.5
    amplitude: float = 0.0
    scale: float = 1.0
    power: float = 0.5

    def evaluate(self, xi):
        xi = np.asarray(xi, dtype=float)
        if self.kind == "constant":
            return np.full_like(xi, self.value)
        if self.kind == "bump":
            return self.value + self.amplitude * np.sin(np.pi * xi) ** 2
        return self.scale * np.power(phi(xi), self.power)


class VelocityProfile(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["zero", "constant", "linear", "sine"] = "zero"
    amplitude: float = 0.0
    # coefficients of sin(2 pi k xi), k = 1, 2, ..., added on top of `kind`
    noise_modes: Tuple[float, ...] = ()

    def _base(self, xi):
        if self.kind == "zero":
            return np.zeros_like(xi)
        if self.kind == "constant":
            return np.full_like(xi, self.amplitude)
        if self.kind == "linear":
            return self.amplitude * (xi - 0.5)
        return self.amplitude * np.sin(2.0 * np.pi * xi)

    def evaluate(self, xi):
        xi = np.asarray(xi, dtype=float)
        u = self._base(xi)
        for k, coeff in enumerate(self.noise_modes, start=1):
            u = u + coeff * np.sin(2.0 * np.pi * k * xi)
        return u


class ProfileSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    m0: Profile = Profile()
    n0: Profile = Profile()
    u0: VelocityProfile = VelocityProfile()
    a0: float = 0.0

    @classmethod
    def constant(cls, m, n, u=None):
        u0 = VelocityProfile() if u is None else u
        return cls(m0=Profile(value=m), n0=Profile(value=n), u0=u0)

    @classmethod
    def phi_power(cls, m_scale, n_scale, alpha, u=None):
        """m0 = m_scale phi^(alpha/2), n0 = n_scale phi^alpha."""
        u0 = VelocityProfile() if u is None else u
        return cls(
            m0=Profile(kind="phi_power", scale=m_scale, power=alpha / 2.0),
            n0=Profile(kind="phi_power", scale=n_scale, power=alpha),
            u0=u0,
        )


@dataclass(frozen=True)
class InitialData:
    """Sampled initial state: c0, q0 on cell centers, u0 on nodes."""
    c0: np.ndarray
    q0: np.ndarray
    u0: np.ndarray
    a0: float = 0.0

    def __post_init__(self):
        for arr in (self.c0, self.q0, self.u0):
            arr.setflags(write=False)

    @property
    def n_cells(self):
        return len(self.c0)


def _below_envelope(values, envelope):
    return np.any(values < envelope * (1.0 - ENVELOPE_RTOL))


def _above_envelope(values, envelope):
    return np.any(values > envelope * (1.0 + ENVELOPE_RTOL))


def _check_discontinuous(m0, n0, rho_l):
    if np.any(~np.isfinite(m0)) or np.any(~np.isfinite(n0)):
        raise AssumptionError("(A1)", "initial masses must be finite")
    if m0.min() <= 0 or n0.min() <= 0:
        raise AssumptionError("(A1)", "need inf n0 > 0 and inf m0 > 0")
    if m0.max() >= rho_l:
        raise AssumptionError("(A1)", f"need sup m0 < rho_l = {rho_l}, got {m0.max()}")


def _check_continuous(profile, regime, m0, n0, xi_c, rho_l):
    regime.check_density_cap(rho_l)
    ends = np.array([0.0, 1.0])
    if np.any(profile.m0.evaluate(ends) != 0) or np.any(profile.n0.evaluate(ends) != 0):
        raise AssumptionError("(A1)'", "n0 and m0 must vanish at both ends")
    if np.any(~np.isfinite(m0)) or np.any(~np.isfinite(n0)):
        raise AssumptionError("(A1)'", "initial masses must be finite")
    k1, k2, k3, k4 = regime.k_consts
    env_m = np.power(phi(xi_c), regime.alpha / 2.0)
    env_n = np.power(phi(xi_c), regime.alpha)
    if _below_envelope(m0, k1 * env_m) or _above_envelope(m0, k2 * env_m):
        raise AssumptionError("(A1)'", "m0 leaves the envelope K1 phi^(alpha/2) <= m0 <= K2 phi^(alpha/2)")
    if _below_envelope(n0, k3 * env_n) or _above_envelope(n0, k4 * env_n):
        raise AssumptionError("(A1)'", "n0 leaves the envelope K3 phi^alpha <= n0 <= K4 phi^alpha")
    if m0.max() >= rho_l:
        raise AssumptionError("(A1)'", f"need m0 < rho_l = {rho_l}")


def make_initial_data(params, regime, profile, n_cells):
    """
    Samples the closed-form profiles on an n_cells staggered grid and checks
    the admissibility assumptions of the chosen regime.

    Raises AssumptionError naming the first violated assumption.
    """
    if n_cells < MIN_CELLS:
        raise PreconditionError(f"need at least {MIN_CELLS} cells, got {n_cells}")

    dxi = 1.0 / n_cells
    xi_c = (np.arange(n_cells) + 0.5) * dxi
    xi_n = np.arange(n_cells + 1) * dxi

    m0 = profile.m0.evaluate(xi_c)
    n0 = profile.n0.evaluate(xi_c)
    u0 = profile.u0.evaluate(xi_n)

    if regime.is_continuous:
        _check_continuous(profile, regime, m0, n0, xi_c, params.rho_l)
    else:
        _check_discontinuous(m0, n0, params.rho_l)

    c0 = n0 / m0
    q0 = np.asarray(q_of_m(m0, params.rho_l), dtype=float)

    # (A2): finite 2n-th moment of u0 (trapezoid weights on nodes)
    weights = np.full(n_cells + 1, dxi)
    weights[[0, -1]] = 0.5 * dxi
    if np.any(~np.isfinite(u0)):
        raise AssumptionError("(A2)", "u0 must be finite")
    with np.errstate(over="ignore"):
        moment = float(np.sum(weights * u0 ** (2 * params.moment_n)))
    if not np.isfinite(moment):
        raise AssumptionError("(A2)", f"the {2 * params.moment_n}-th moment of u0 is not finite")

    # (A3): square-summable discrete gradient of (c0 q0)^beta
    g = np.power(c0 * q0, params.beta)
    grad_sq = float(np.sum(np.diff(g) ** 2) / dxi)
    if not np.isfinite(grad_sq) or grad_sq > A3_GRADIENT_BOUND:
        raise AssumptionError("(A3)", f"gradient of (c0 q0)^beta too large: {grad_sq:.3e}")

    logger.debug(f"Initial data accepted: regime={regime.tag}, N={n_cells}, sup m0={m0.max():.4g}")
    return InitialData(c0=c0, q0=q0, u0=u0, a0=profile.a0)
