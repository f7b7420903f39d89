import logging

import numpy as np
import pytest
from pydantic import ValidationError

from engines.diagnostics import energy, exact_boundary_q, l1_distance, momentum, restrict_to_coarse
from engines.errors import PreconditionError, SolverError
from engines.model_core import InitialData, ModelParams, Profile, ProfileSpec, VelocityProfile, make_initial_data
from engines.solver import Grid, LagrangianState, StepControl, dissipation_rate, iter_run, run, step

logger = logging.getLogger(__name__)


def _bumpy_initial(params, regime, n_cells=32):
    profile = ProfileSpec(
        m0=Profile(kind="bump", value=0.3, amplitude=0.3),
        n0=Profile(kind="bump", value=0.4, amplitude=-0.2),
        u0=VelocityProfile(kind="constant", amplitude=0.1, noise_modes=(0.5, 0.1, -0.05)),
    )
    return make_initial_data(params, regime, profile, n_cells)


def test_grid_weights_sum_to_one():
    grid = Grid(10)
    assert grid.node_weights.sum() == pytest.approx(1.0, abs=1e-15)
    assert grid.node_weights[0] == grid.node_weights[-1] == pytest.approx(0.05)
    assert len(grid.centers) == 10 and len(grid.nodes) == 11


def test_step_control_rejects_inverted_dt_bounds():
    with pytest.raises(ValidationError):
        StepControl(dt_init=1e-4, dt_min=1e-3)


def test_homogeneous_expansion_is_exact(homogeneous_initial, params_21, discontinuous):
    """With the explicit pressure the linear velocity is an exact discrete solution: V = 1 + t."""
    ctrl = StepControl(dt_init=1e-2, t_end=2.0, pressure_sweeps=0)
    trajectory = run(homogeneous_initial, params_21, discontinuous, ctrl, [0.0, 0.5, 1.0, 2.0])
    for state in trajectory:
        np.testing.assert_allclose(state.q, 1.0 / (1.0 + state.t), rtol=1e-12)
        np.testing.assert_allclose(state.u, homogeneous_initial.u0, atol=1e-12)
        assert state.a == pytest.approx(-0.5 * state.t, abs=1e-12)


def test_samples_land_exactly_on_requested_times(homogeneous_initial, params_21, discontinuous):
    times = [0.0, 0.0123, 0.1, 0.35]
    ctrl = StepControl(dt_init=1e-2, t_end=0.35)
    trajectory = run(homogeneous_initial, params_21, discontinuous, ctrl, times)
    assert [s.t for s in trajectory] == times


def test_zero_horizon_returns_initial_state(homogeneous_initial, params_21, discontinuous):
    ctrl = StepControl(t_end=0.0)
    trajectory = run(homogeneous_initial, params_21, discontinuous, ctrl, [0.0])
    assert len(trajectory) == 1
    np.testing.assert_array_equal(trajectory[0].q, homogeneous_initial.q0)
    np.testing.assert_array_equal(trajectory[0].u, homogeneous_initial.u0)
    assert trajectory[0].t == 0.0


@pytest.mark.parametrize("times", [[], [0.0, 0.2, 0.1], [0.0, 2.0]])
def test_bad_sample_times(homogeneous_initial, params_21, discontinuous, times):
    with pytest.raises(PreconditionError):
        run(homogeneous_initial, params_21, discontinuous, StepControl(t_end=1.0), times)


@pytest.mark.parametrize("u_kind", ["zero", "linear"])
def test_gas_free_state_moves_ballistically(params_21, discontinuous, u_kind):
    n = 16
    xi_n = np.arange(n + 1) / n
    u0 = VelocityProfile(kind=u_kind, amplitude=0.2).evaluate(xi_n)
    initial = InitialData(c0=np.zeros(n), q0=np.ones(n), u0=u0)
    trajectory = run(initial, params_21, discontinuous, StepControl(dt_init=1e-2, t_end=1.0), [0.0, 1.0])
    final = trajectory[-1]
    np.testing.assert_array_equal(final.u, u0)
    # V_t = rho_l u_xi with u_xi = 0.2 (linear) or 0 (fixed point)
    slope = 0.2 if u_kind == "linear" else 0.0
    np.testing.assert_allclose(1.0 / final.q, 1.0 + slope * final.t, rtol=1e-12)
    assert final.dissipated == 0.0


def test_first_step_from_rest_pushes_ends_outward(params_21, discontinuous):
    """Uniform c = Q = 1, u = 0 on 4 cells: only the stress-free ends feel a force."""
    state = LagrangianState(t=0.0, c=np.ones(4), q=np.ones(4), u=np.zeros(5))
    ctrl = StepControl(pressure_sweeps=0)
    dt = 1e-3
    new = step(state, params_21, discontinuous, ctrl, dt=dt)

    assert new.u[0] < 0.0 < new.u[-1]
    np.testing.assert_allclose(new.u, -new.u[::-1], atol=1e-16)
    assert new.u[2] == pytest.approx(0.0, abs=1e-16)
    assert abs(new.u[1]) < 0.1 * abs(new.u[0])

    # the implicit update satisfies w (u* - u) = dt (sigma_i - sigma_{i-1}) with sigma(u*)
    grid = Grid(4)
    sigma = np.concatenate(([0.0], np.ones(4) * np.diff(new.u) / grid.dxi - 1.0, [0.0]))
    np.testing.assert_allclose(grid.node_weights * new.u, dt * np.diff(sigma), atol=1e-15)


def test_first_step_hand_value(params_21, discontinuous):
    # node 0: (h/2 + k) u0 - k u1 = -dt with k = dt E / h; u1 is second order in dt
    state = LagrangianState(t=0.0, c=np.ones(4), q=np.ones(4), u=np.zeros(5))
    new = step(state, params_21, discontinuous, StepControl(pressure_sweeps=0), dt=1e-3)
    assert new.u[0] == pytest.approx(-1e-3 / (0.125 + 4e-3), rel=1e-3)


def test_momentum_conserved(params_21, discontinuous):
    initial = _bumpy_initial(params_21, discontinuous)
    trajectory = run(initial, params_21, discontinuous, StepControl(dt_init=2e-3, t_end=0.5),
                     np.linspace(0.0, 0.5, 6))
    mom0 = momentum(trajectory[0])
    assert mom0 != 0.0
    for state in trajectory:
        assert momentum(state) == pytest.approx(mom0, abs=1e-12)


def test_gas_coefficient_never_changes(params_21, discontinuous):
    initial = _bumpy_initial(params_21, discontinuous)
    trajectory = run(initial, params_21, discontinuous, StepControl(dt_init=2e-3, t_end=0.3), [0.0, 0.1, 0.3])
    for state in trajectory:
        np.testing.assert_array_equal(state.c, initial.c0)
        assert np.all(state.q > 0)


@pytest.mark.parametrize("beta", [0.5, 1.0])
def test_every_step_dissipates_energy(discontinuous, beta):
    params = ModelParams(gamma=2.0, beta=beta)
    initial = _bumpy_initial(params, discontinuous)
    state = LagrangianState.from_initial(initial)
    ctrl = StepControl(dt_init=2e-3)
    e0 = energy(state, params)
    for _ in range(100):
        new = step(state, params, discontinuous, ctrl)
        dt = new.t - state.t
        spent = dt * dissipation_rate(state.c, state.q, new.u, params, state.grid.dxi)
        assert energy(new, params) + spent <= energy(state, params) * (1.0 + 1e-12)
        state = new
    # viscous plus numerical damping closes the balance to roundoff
    assert energy(state, params) + state.dissipated + state.damped == pytest.approx(e0, rel=1e-10)
    assert state.dissipated > 0


def test_explicit_viscous_mode_runs(params_21, discontinuous):
    initial = _bumpy_initial(params_21, discontinuous, n_cells=16)
    ctrl = StepControl(dt_init=1e-3, t_end=0.05, viscous_mode="explicit", pressure_sweeps=0)
    trajectory = run(initial, params_21, discontinuous, ctrl, [0.0, 0.05])
    assert momentum(trajectory[-1]) == pytest.approx(momentum(trajectory[0]), abs=1e-12)
    assert np.all(trajectory[-1].q > 0)


def test_dt_underflow_raises_with_last_state(params_21, discontinuous):
    n = 16
    u0 = VelocityProfile(kind="linear", amplitude=-1e6).evaluate(np.arange(n + 1) / n)
    state = LagrangianState(t=0.0, c=np.ones(n), q=np.ones(n), u=u0)
    ctrl = StepControl(dt_init=1e-3, dt_min=1e-4)
    with pytest.raises(SolverError) as err:
        step(state, params_21, discontinuous, ctrl)
    assert err.value.state is state


def test_on_step_sees_every_accepted_state(homogeneous_initial, params_21, discontinuous):
    seen = []
    ctrl = StepControl(dt_init=1e-2, t_end=0.1)
    list(iter_run(homogeneous_initial, params_21, discontinuous, ctrl, [0.0, 0.1], on_step=seen.append))
    assert len(seen) >= 10
    assert all(b.t > a.t for a, b in zip(seen, seen[1:]))
    assert seen[-1].t == 0.1


@pytest.mark.slow
def test_boundary_oracle_at_desk_scale(params_21, discontinuous):
    errors = {}
    for n_cells in (64, 256):
        initial = make_initial_data(params_21, discontinuous, ProfileSpec.constant(0.5, 0.5), n_cells)
        times = np.linspace(0.0, 100.0, 101)
        trajectory = run(initial, params_21, discontinuous, StepControl(dt_init=1e-3, t_end=100.0), times)
        q_left = np.array([s.q[0] for s in trajectory])
        exact = exact_boundary_q(times, "left", params_21, initial)
        errors[n_cells] = float(np.max(np.abs(q_left - exact) / exact))
        logger.info(f"N={n_cells}: max relative boundary error {errors[n_cells]:.3e}")
    assert errors[256] < 0.02
    assert errors[256] < errors[64]


@pytest.mark.slow
def test_self_convergence_under_refinement(discontinuous):
    params = ModelParams(gamma=2.0, beta=0.5)
    ctrl = StepControl(dt_init=1e-4, t_end=0.1)
    finals = {}
    for n_cells in (32, 64, 128, 512):
        initial = _bumpy_initial(params, discontinuous, n_cells)
        finals[n_cells] = run(initial, params, discontinuous, ctrl, [0.0, 0.1])[-1]
    reference = finals[512]
    errors = {n: l1_distance(finals[n], restrict_to_coarse(reference, n)) for n in (32, 64, 128)}
    logger.info(f"L1 errors against N=512: {errors}")
    assert np.log2(errors[32] / errors[128]) / 2.0 >= 1.0
