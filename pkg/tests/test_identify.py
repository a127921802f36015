import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netid.checks import lemma1_instance
from netid.control import ControlSet
from netid.experiments import sample_inputs
from netid.graph import Topology, build_laplacian, build_weights, random_connected_topology
from netid.identify import (
    IdentProblem, NumericalError, RegretLedger, StackedState, StepMonitor, StepSchedule, batch_objective,
    centralized_step, check_lemma1, eval_f_t, grad_f_t, hindsight_optimum, regret, regret_report, residual_z,
)
from netid.maps import LinearMap, ModelLayout, central_difference


@pytest.fixture
def scalar_pair():
    """N=2 Laplacian, scalar linear maps phi_i = a_i u_i."""
    layout = ModelLayout((LinearMap(d_u=1, d_y=1), LinearMap(d_u=1, d_y=1)))
    return IdentProblem(layout, build_laplacian(Topology.path(2)))


def hand_grad(a, w, u, y):
    """Gradient of ((a1 u1 - y - w1 + w2)^2 + (a2 u2 - y - w2 + w1)^2) / 8."""
    z1 = a[0] * u[0] - y - w[0] + w[1]
    z2 = a[1] * u[1] - y - w[1] + w[0]
    return np.array([z1 * u[0], z2 * u[1], -z1 + z2, z1 - z2]) / 4


def test_zero_residual_gives_zero(scalar_pair):
    x = StackedState([2.0, 2.0], [0.0, 0.0])
    u = [np.array([1.0]), np.array([1.0])]
    assert eval_f_t(x, u, [2.0], scalar_pair) == 0.0
    np.testing.assert_array_equal(grad_f_t(x, u, [2.0], scalar_pair), np.zeros(4))


def test_f_t_hand_value(scalar_pair):
    # Phi - y_stack = (1, -1)
    x = StackedState([2.0, 0.0], [0.0, 0.0])
    assert eval_f_t(x, [np.array([1.0]), np.array([1.0])], [1.0], scalar_pair) == pytest.approx(0.25, abs=1e-15)


def test_gradient_hand_instance(scalar_pair):
    a, w, u, y = np.array([0.7, -0.2]), np.array([0.3, -0.1]), np.array([1.5, 0.5]), 0.4
    x = StackedState(a, w)
    us = [u[:1], u[1:]]
    g = grad_f_t(x, us, [y], scalar_pair)
    np.testing.assert_allclose(g, hand_grad(a, w, u, y), atol=1e-15)
    fd = central_difference(lambda v: np.atleast_1d(eval_f_t(x.with_vector(v), us, [y], scalar_pair)), x.vector(), 1e-6)[0]
    np.testing.assert_allclose(g, fd, atol=1e-7)


def test_centralized_step_hand(scalar_pair):
    a, w, u, y = np.array([0.7, -0.2]), np.array([0.3, -0.1]), np.array([1.5, 0.5]), 0.4
    x = StackedState(a, w, t=1)
    nxt = centralized_step(x, [u[:1], u[1:]], [y], StepSchedule(0.1), scalar_pair)
    np.testing.assert_allclose(nxt.vector(), x.vector() - 0.1 * hand_grad(a, w, u, y), atol=1e-15)
    assert nxt.t == 2


def test_centralized_step_degenerate_cases(scalar_pair):
    x = StackedState([0.7, -0.2], [0.3, -0.1])
    us = [np.array([1.0]), np.array([2.0])]
    assert np.array_equal(centralized_step(x, us, [1.0], StepSchedule(0.0), scalar_pair).vector(), x.vector())
    fit = StackedState([1.0, 1.0], [0.0, 0.0])
    same = centralized_step(fit, [np.array([1.0]), np.array([1.0])], [1.0], StepSchedule(5.0), scalar_pair)
    assert np.array_equal(same.vector(), fit.vector())


@pytest.mark.filterwarnings("ignore:overflow")
def test_centralized_step_non_finite_aborts(scalar_pair):
    x = StackedState([1e200, 0.0], [0.0, 0.0])
    with pytest.raises(NumericalError, match="t=1"):
        centralized_step(x, [np.array([1e200]), np.array([1.0])], [0.0], StepSchedule(1e100), scalar_pair)


def test_schedule():
    s = StepSchedule(0.01)
    assert s.eta(1) == 0.01 and s.eta(4) == 0.005
    with pytest.raises(ValueError):
        s.eta(0)
    with pytest.raises(ValueError):
        StepSchedule(-1.0)


def test_monitor_halves_once(caplog):
    mon, sched = StepMonitor(), StepSchedule(1.0)
    with caplog.at_level(logging.WARNING):
        for _ in range(25):
            mon.record(1.0, 2.0, 0.5, sched)
    assert sched.c1 == 0.5 and mon.halved and mon.violations == 25
    assert "halving" in caplog.text
    mon.record(2.0, 1.0, 0.1, sched)
    assert mon.streak == 0 and mon.violation_fraction == pytest.approx(25 / 26)


def random_problem(rng, n=None, d_y=None, kind="laplacian"):
    n = n or int(rng.integers(2, 6))
    d_y = d_y or int(rng.integers(1, 4))
    topo = random_connected_topology(n, rng)
    return IdentProblem(ModelLayout.uniform("linear", n, d_y), build_weights(topo, kind, rng))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), kind=st.sampled_from(["laplacian", "column_stochastic"]))
def test_f_t_consistency_and_fd(seed, kind):
    rng = np.random.default_rng(seed)
    p = random_problem(rng, kind=kind)
    x = StackedState(rng.normal(size=p.layout.d_theta), rng.normal(size=p.n * p.d_y))
    u = [rng.uniform(-1, 1, 2) for _ in range(p.n)]
    y = rng.normal(size=p.d_y)
    z = residual_z(x, u, y, p)
    assert eval_f_t(x, u, y, p) == pytest.approx(float(z @ z) / (2 * p.n**2), abs=1e-13)
    # independent dense oracle for z
    phi = np.concatenate([p.layout.families[i].matrix(th) @ u[i] for i, th in enumerate(p.layout.split_theta(x.theta))])
    dense = np.kron(p.weights.matrix, np.eye(p.d_y))
    np.testing.assert_allclose(z, phi - np.tile(y, p.n) - dense @ x.w, atol=1e-13)
    g = grad_f_t(x, u, y, p)
    fd = central_difference(lambda v: np.atleast_1d(eval_f_t(x.with_vector(v), u, y, p)), x.vector(), 1e-6)[0]
    assert np.max(np.abs(g - fd)) <= 1e-6 * (1 + np.max(np.abs(g)))


def test_batch_objective_matches_sum(scalar_pair):
    rng = np.random.default_rng(4)
    p = random_problem(rng, 3, 2)
    U = rng.uniform(-1, 1, (7, p.layout.d_u))
    Y = rng.normal(size=(7, 2))
    x = StackedState(rng.normal(size=p.layout.d_theta), rng.normal(size=6))
    F, G = batch_objective(p, U, Y, x.vector())
    parts = [p.layout.split_u(u) for u in U]
    assert F == pytest.approx(sum(eval_f_t(x, uu, y, p) for uu, y in zip(parts, Y)), rel=1e-13)
    np.testing.assert_allclose(G, sum(grad_f_t(x, uu, y, p) for uu, y in zip(parts, Y)), atol=1e-13)


def fill_ledger(problem, U, Y, x=None):
    led = RegretLedger()
    x = x or StackedState.initial(problem)
    for u, y in zip(U, Y):
        led.append(u, y, eval_f_t(x, problem.layout.split_u(u), y, problem))
    return led


@pytest.mark.parametrize("method", ["lstsq", "descent"])
def test_hindsight_realizable(method):
    rng = np.random.default_rng(5)
    p = random_problem(rng, 3, 2)
    # common inputs and identical agents: phi_i == y for every i, so w = 0 fits exactly
    A = rng.uniform(-1, 1, 4)
    V = rng.uniform(-1, 1, (30, 2))
    U_same = np.tile(V, (1, p.n))
    theta_same = np.tile(A, p.n)
    Y = np.array([p.layout.predict(p.layout.split_u(u), theta_same) for u in U_same])
    res = hindsight_optimum(fill_ledger(p, U_same, Y), p, method=method)
    assert res.converged and res.value <= 1e-12


def test_hindsight_duplicated_samples_scale():
    rng = np.random.default_rng(6)
    p = random_problem(rng, 3, 1)
    U = rng.uniform(-1, 1, (4, p.layout.d_u))
    Y = rng.normal(size=(4, 1))
    one = hindsight_optimum(fill_ledger(p, U, Y), p)
    three = hindsight_optimum(fill_ledger(p, np.tile(U, (3, 1)), np.tile(Y, (3, 1))), p)
    assert three.value == pytest.approx(3 * one.value, rel=1e-9, abs=1e-14)


def test_hindsight_probe_oracle():
    rng = np.random.default_rng(7)
    p = random_problem(rng, 3, 2)
    U = rng.uniform(-1, 1, (20, p.layout.d_u))
    Y = rng.normal(size=(20, 2))
    led = fill_ledger(p, U, Y)
    res = hindsight_optimum(led, p, method="descent")
    assert res.converged
    Ua, Ya = led.arrays()
    x = res.x.vector()
    for _ in range(1000):
        d = rng.normal(size=x.size)
        d *= 1e-3 / np.linalg.norm(d)
        assert batch_objective(p, Ua, Ya, x + d)[0] >= res.value - 1e-15


def test_hindsight_methods_agree():
    rng = np.random.default_rng(8)
    p = random_problem(rng, 4, 2)
    led = fill_ledger(p, rng.uniform(-1, 1, (25, p.layout.d_u)), rng.normal(size=(25, 2)))
    a = hindsight_optimum(led, p, method="lstsq")
    b = hindsight_optimum(led, p, method="descent")
    assert a.converged and b.converged
    assert a.value == pytest.approx(b.value, rel=1e-9)


def test_regret_zero_when_start_is_optimal(scalar_pair):
    u = np.array([1.0, 1.0])
    led = RegretLedger()
    x = StackedState([1.0, 1.0], [0.0, 0.0])
    led.append(u, [1.0], eval_f_t(x, scalar_pair.layout.split_u(u), [1.0], scalar_pair))
    assert abs(regret(led, scalar_pair)) <= 1e-8


def test_regret_one_sample_equals_first_loss(scalar_pair):
    # a single sample is always fitted exactly in hindsight
    led = fill_ledger(scalar_pair, np.array([[1.0, 2.0]]), np.array([[0.7]]))
    rep = regret_report(led, scalar_pair)
    assert rep.hindsight_F <= 1e-16
    assert rep.value == pytest.approx(led.losses[0], abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 100_000), T=st.integers(1, 30))
def test_regret_nonnegative(seed, T):
    rng = np.random.default_rng(seed)
    p = random_problem(rng)
    ledger = RegretLedger()
    x = StackedState.initial(p)
    sched = StepSchedule(0.5)
    for _ in range(T):
        u = [rng.uniform(-1, 1, 2) for _ in range(p.n)]
        y = rng.normal(size=p.d_y)
        ledger.append(np.concatenate(u), y, eval_f_t(x, u, y, p))
        x = centralized_step(x, u, y, sched, p)
    assert regret(ledger, p) >= -1e-6


def test_ledger_prefix():
    led = RegretLedger()
    for k in range(5):
        led.append([k, k], [k], float(k))
    pre = led.prefix(3)
    assert len(pre) == 3 and pre.total == 3.0
    with pytest.raises(ValueError):
        RegretLedger().arrays()


def test_lemma1_realizable_reports_zero():
    p = IdentProblem(ModelLayout.uniform("linear", 2, 1), build_laplacian(Topology.path(2)))
    theta = np.array([0.5, -1.0, 0.5, -1.0])
    led = RegretLedger()
    rng = np.random.default_rng(0)
    for _ in range(10):
        v = rng.uniform(-1, 1, 2)
        led.append(np.concatenate([v, v]), p.layout.predict([v, v], theta), 0.0)
    rep = check_lemma1(StackedState(theta, np.zeros(2)), led, p)
    assert rep.max_stationarity == 0.0 and rep.per_sample_max == 0.0 and rep.passed


def test_lemma1_n2_and_perturbation():
    p = IdentProblem(ModelLayout.uniform("linear", 2, 1), build_laplacian(Topology.path(2)))
    rng = np.random.default_rng(1)
    sets = [ControlSet("disk_box", 1.0, 1.0)] * 2
    led = RegretLedger()
    for _ in range(40):
        u = sample_inputs(sets, rng, "common")
        led.append(np.concatenate(u), rng.normal(size=1), 0.0)
    opt = hindsight_optimum(led, p, tol=1e-10)
    rep = check_lemma1(opt.x, led, p)
    assert opt.converged and rep.max_stationarity <= 1e-6
    bumped = opt.x.with_vector(opt.x.vector() + np.concatenate([np.full(p.layout.d_theta, 1e-2), np.zeros(2)]))
    assert check_lemma1(bumped, led, p).max_stationarity > rep.max_stationarity


@pytest.mark.parametrize("seed", range(3))
def test_lemma1_holds_with_common_excitation(seed):
    p, led = lemma1_instance(seed)
    opt = hindsight_optimum(led, p)
    assert opt.converged and check_lemma1(opt.x, led, p).passed


def test_lemma1_breaks_with_independent_excitation():
    """Characterization: with agent-specific inputs the reformulated optimum fits each
    agent separately and is not stationary for the aggregate fit."""
    rng = np.random.default_rng(2)
    p = IdentProblem(ModelLayout.uniform("linear", 3, 1), build_laplacian(Topology.ring(3)))
    theta_star = rng.uniform(-1, 1, p.layout.d_theta)
    sets = [ControlSet("disk_box", 1.0, 1.0)] * 3
    led = RegretLedger()
    for _ in range(60):
        u = sample_inputs(sets, rng, "independent")
        led.append(np.concatenate(u), p.layout.predict(u, theta_star), 0.0)
    opt = hindsight_optimum(led, p)
    rep = check_lemma1(opt.x, led, p)
    assert opt.converged and not rep.passed
    assert rep.max_stationarity > 1e3 * rep.tolerance
