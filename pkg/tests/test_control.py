import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netid.checks import grid_projection
from netid.control import (
    ControlError, ControllerState, ControlSet, LossSpec, composite_gradient, composite_objective, initial_decision,
    injection_cost, injection_grad, project, projected_gradient_step, run_controller, voltage_band_grad,
    voltage_band_loss,
)
from netid.distributed import OnlineIdentifier
from netid.graph import Topology, build_laplacian
from netid.identify import IdentProblem, StepSchedule
from netid.maps import LinearMap, ModelLayout, central_difference
from netid.plant import SyntheticPlant, SyntheticTruth


def test_control_set_validation():
    with pytest.raises(ValueError):
        ControlSet("disk_box", 0.0, 1.0)
    with pytest.raises(ValueError):
        ControlSet("disk_box", 1.0, -0.1)
    with pytest.raises(ValueError):
        ControlSet("ellipse")
    assert ControlSet("disk_box", 1.0, 0.0).contains([0.0, 0.0])


def test_project_interior_and_radial():
    s = ControlSet("disk_box", 1.0, 0.8)
    np.testing.assert_array_equal(project([0.3, -0.2], s), [0.3, -0.2])
    np.testing.assert_allclose(project([0.0, 2.0], ControlSet("disk_box", 1.5, 1.5)), [0.0, 1.5], atol=1e-12)


def test_project_corner_against_grid():
    s = ControlSet("disk_box", 1.0, 0.5)
    p = project([1.2, 1.2], s)
    np.testing.assert_allclose(p, [0.5, math.sqrt(0.75)], atol=1e-9)
    assert np.linalg.norm(p - grid_projection(np.array([1.2, 1.2]), s, 2e-4)) <= 5e-4


def test_project_box_and_errors():
    s = ControlSet("box", lo=(-1.0, 0.0), hi=(1.0, 2.0))
    np.testing.assert_array_equal(project([3.0, -1.0], s), [1.0, 0.0])
    with pytest.raises(ValueError):
        project([np.nan, 0.0], ControlSet())


def brute_projection(u, s, n=4001):
    """Scan P on a fine grid and clip Q exactly; an upper bound on the true distance."""
    best, best_d = None, np.inf
    for p in np.linspace(0.0, min(s.p_max, s.s_max), n):
        q_lim = math.sqrt(max(s.s_max**2 - p * p, 0.0))
        q = min(max(u[1], -q_lim), q_lim)
        d = (p - u[0]) ** 2 + (q - u[1]) ** 2
        if d < best_d:
            best, best_d = np.array([p, q]), d
    return best, math.sqrt(best_d)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_projection_properties(seed):
    rng = np.random.default_rng(seed)
    s_max = float(rng.uniform(0.5, 2.0))
    s = ControlSet("disk_box", s_max, float(rng.uniform(0.0, 1.2 * s_max)))
    a, b = rng.uniform(-3 * s_max, 3 * s_max, 2), rng.uniform(-3 * s_max, 3 * s_max, 2)
    pa, pb = project(a, s), project(b, s)
    assert s.violation(pa) <= 1e-9
    assert np.max(np.abs(project(pa, s) - pa)) <= 1e-9
    assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-9
    # optimal distance up to the alternating-projection tolerance
    _, d_best = brute_projection(a, s)
    assert np.linalg.norm(a - pa) <= d_best + 1e-9


def test_band_loss_values():
    spec = LossSpec(band_weight=1.0)
    assert voltage_band_loss([0.95, 1.0, 1.05], spec) == 0.0
    assert voltage_band_loss([1.10], spec) == pytest.approx(0.0025)
    assert voltage_band_loss([0.90], spec) == pytest.approx(0.0025)


def test_band_loss_gradient_fd():
    spec = LossSpec()
    y = np.array([0.94, 1.0, 1.06])
    fd = central_difference(lambda v: np.atleast_1d(voltage_band_loss(v, spec)), y, 1e-7)[0]
    np.testing.assert_allclose(voltage_band_grad(y, spec), fd, atol=1e-8 * 100)
    assert np.max(np.abs(voltage_band_grad(y, spec) - fd)) / spec.band_weight <= 1e-8


def test_injection_cost_values_and_gradient():
    spec = LossSpec(curtail_weight=1.0, reactive_weight=1.0)
    s = ControlSet("disk_box", 2.0, 1.0)
    assert injection_cost([1.0, 0.0], s, spec) == 0.0
    assert injection_cost([0.5, 0.2], s, spec) == pytest.approx(0.29)
    u = np.array([0.3, -0.4])
    fd = central_difference(lambda v: np.atleast_1d(injection_cost(v, s, spec)), u, 1e-6)[0]
    assert np.max(np.abs(injection_grad(u, s, spec) - fd)) <= 1e-8


def single_agent(A):
    fam = LinearMap(d_u=2, d_y=2)
    layout = ModelLayout((fam,))
    return layout, np.asarray(A, dtype=float).ravel(order="F")


def test_step_unchanged_at_zero_gradient():
    layout, theta = single_agent([[0.01, 0.0], [0.0, 0.01]])
    s = ControlSet("disk_box", 1.0, 0.5)
    state = ControllerState((np.array([0.5, 0.0]),), alpha=0.1)
    # model output (0.005, 0) is below the band: move it inside with a shifted band
    spec = LossSpec(band_lo=-1.0, band_hi=1.0)
    nxt = projected_gradient_step(state, layout, theta, spec, [s])
    np.testing.assert_array_equal(nxt.u[0], [0.5, 0.0])
    assert nxt.tau == 1


def test_step_alpha_zero():
    layout, theta = single_agent([[1.0, 2.0], [0.5, -1.0]])
    state = ControllerState((np.array([0.2, 0.1]),), alpha=0.0)
    nxt = projected_gradient_step(state, layout, theta, LossSpec(), [ControlSet("disk_box", 1.0, 0.5)])
    np.testing.assert_array_equal(nxt.u[0], [0.2, 0.1])


def test_step_hand_instance_fd():
    layout, theta = single_agent([[0.3, 0.2], [0.1, -0.4]])
    s = ControlSet("disk_box", 5.0, 4.0)
    spec = LossSpec(band_lo=-0.01, band_hi=0.1, band_weight=10.0)
    u = np.array([1.0, 0.3])  # y = (0.36, -0.02): both off the band edges
    fd = central_difference(lambda v: np.atleast_1d(composite_objective([v], layout, theta, spec, [s])), u, 1e-6)[0]
    g = composite_gradient([u], layout, theta, spec, [s])[0]
    assert np.max(np.abs(g - fd)) <= 1e-7
    nxt = projected_gradient_step(ControllerState((u,), alpha=0.01), layout, theta, spec, [s])
    np.testing.assert_allclose(nxt.u[0], u - 0.01 * fd, atol=1e-9)


def test_composite_gradient_carries_one_over_n():
    fam = LinearMap(d_u=2, d_y=1)
    layout = ModelLayout((fam, fam))
    theta = np.array([1.0, 0.0, 1.0, 0.0])
    spec = LossSpec(band_lo=-1.0, band_hi=0.0, band_weight=1.0, curtail_weight=0.0, reactive_weight=0.0)
    sets = [ControlSet("disk_box", 5.0, 5.0)] * 2
    u = [np.array([1.0, 0.0]), np.array([1.0, 0.0])]
    # y = mean(P_i) = 1, excess 1, d loss/dy = 2, d y/d P_i = 1/2
    np.testing.assert_allclose(composite_gradient(u, layout, theta, spec, sets)[0], [1.0, 0.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_step_non_finite_gradient():
    layout, theta = single_agent([[np.inf, 0.0], [0.0, 0.0]])
    with pytest.raises(ControlError, match="agent 1"):
        projected_gradient_step(ControllerState((np.array([0.5, 0.0]),), alpha=0.1), layout, theta,
                                LossSpec(band_lo=-1.0, band_hi=0.0), [ControlSet()])


def test_initial_decision_is_available_power():
    np.testing.assert_array_equal(initial_decision(ControlSet("disk_box", 1.0, 0.7)), [0.7, 0.0])
    np.testing.assert_allclose(initial_decision(ControlSet("disk_box", 1.0, 1.5)), [1.0, 0.0])


def synthetic_loop(n_ticks=400, alpha=0.05, T_con=1, control=True, seed=0, c1=2.0):
    rng = np.random.default_rng(seed)
    n, d_y = 2, 2
    layout = ModelLayout.uniform("linear", n, d_y)
    theta_star = rng.uniform(-1, 1, layout.d_theta) + np.tile([0.0, 1.2, 0.0, 0.0], n)
    plant = SyntheticPlant(SyntheticTruth(layout, theta_star))
    topo = Topology.path(2)
    ident = OnlineIdentifier(IdentProblem(layout, build_laplacian(topo)), topo, StepSchedule(c1))
    pbar = 0.6 + 0.4 * np.sin(np.arange(n_ticks) / 15.0)
    sets_at = lambda k: [ControlSet("disk_box", 1.0, float(pbar[k]))] * n  # noqa: E731
    spec = LossSpec(band_lo=-0.5, band_hi=0.5)
    traj = run_controller(plant, ident, layout, sets_at, spec, n_ticks, alpha=alpha, T_con=T_con, control=control)
    return traj, plant, pbar


def test_model_error_decreases_inside_model_class():
    traj, _, _ = synthetic_loop(n_ticks=1000)
    err = traj.column("model_err_inf")[100:]
    smooth = np.convolve(err, np.ones(50) / 50, mode="valid")[::50]
    assert np.all(np.diff(smooth) <= 1e-12)
    assert smooth[-1] < 0.2 * smooth[0]


def test_alpha_zero_is_free_response():
    traj, plant, pbar = synthetic_loop(n_ticks=80, alpha=0.0)
    off, _, _ = synthetic_loop(n_ticks=80, control=False)
    for rec in traj.records:
        free = [np.array([pbar[rec.tick], 0.0])] * 2
        np.testing.assert_allclose(rec.u, np.array(free), atol=1e-15)
        np.testing.assert_allclose(rec.y, plant.truth(free), atol=1e-15)
    np.testing.assert_array_equal(traj.column("y"), off.column("y"))


def test_control_reduces_band_violation():
    on, _, _ = synthetic_loop(n_ticks=600)
    off, _, _ = synthetic_loop(n_ticks=600, control=False)
    assert off.band_violation_integral() > 0
    assert on.band_violation_integral() < off.band_violation_integral()


def test_tcon_gating_and_reset():
    traj, _, pbar = synthetic_loop(n_ticks=30, T_con=3)
    updated = traj.column("updated")
    np.testing.assert_array_equal(updated, [(k + 1) % 3 == 0 for k in range(30)])
    # identification rounds only on update ticks
    assert len(traj.rounds) == 10
    ts = traj.column("t")
    assert ts[0] == 1 and ts[-1] == 10
    # after an update tick the decision restarts at u(0) (carried to the next tick's pbar)
    for k in range(3, 30, 3):
        np.testing.assert_allclose(traj.records[k].u[:, 0], pbar[k], atol=1e-12)
        np.testing.assert_allclose(traj.records[k].u[:, 1], 0.0, atol=1e-12)


def test_tcon_one_updates_every_tick_and_eta_column():
    traj, _, _ = synthetic_loop(n_ticks=20, c1=0.01)
    assert all(traj.column("updated"))
    np.testing.assert_allclose(traj.column("eta"), 0.01 / np.sqrt(np.arange(1, 21)))


def test_tcon_validation():
    with pytest.raises(ValueError):
        synthetic_loop(n_ticks=5, T_con=0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_composite_objective_non_increasing_fixed_theta(seed):
    rng = np.random.default_rng(seed)
    n, d_y = int(rng.integers(1, 5)), int(rng.integers(1, 4))
    layout = ModelLayout.uniform("linear", n, d_y)
    theta = rng.uniform(-1, 1, layout.d_theta)
    spec = LossSpec(band_lo=-0.2, band_hi=0.2)
    sets = [ControlSet("disk_box", float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.2, 1.5))) for _ in range(n)]
    # step below 1/L with L = 2 (band_weight |J/n|^2 summed over agents + max injection weight)
    jnorm = sum(np.linalg.norm(layout.families[i].matrix(th), 2) ** 2 for i, th in enumerate(layout.split_theta(theta)))
    lip = 2 * (spec.band_weight * jnorm / n**2 + max(spec.curtail_weight, spec.reactive_weight))
    state = ControllerState(tuple(project(rng.uniform(-2, 2, 2), s) for s in sets), alpha=1.0 / lip)
    prev = composite_objective(state.u, layout, theta, spec, sets)
    for _ in range(50):
        state = projected_gradient_step(state, layout, theta, spec, sets)
        cur = composite_objective(state.u, layout, theta, spec, sets)
        assert cur <= prev + 1e-12 * (1 + abs(prev))
        prev = cur
