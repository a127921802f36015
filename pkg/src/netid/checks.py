"""Property suite behind ``netid check``.

Every check is a plain function returning a :class:`CheckResult`; the
acceptance tests call the same functions. ``mutation`` injects a known
defect so the suite can demonstrate that it catches it.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, replace
from typing import Callable
from unittest import mock

import numpy as np

from . import distributed
from .control import ControlSet, project
from .distributed import OnlineIdentifier, audit_messages, expected_numbers_per_round
from .experiments import run_control, run_identification, sample_inputs
from .graph import Topology, build_weights, random_connected_topology
from .identify import (
    IdentProblem, RegretLedger, StackedState, StepSchedule, check_lemma1, eval_f_t, grad_f_t, hindsight_optimum,
)
from .maps import CplMap, LinearMap, ModelLayout, central_difference, finite_diff_check
from .scenario import Scenario, bundled_path, load_scenario

MUTATIONS = ("none", "w_sign", "jacobian")


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} {self.value:.3e} (limit {self.threshold:.1e})  {self.detail}".rstrip()


@contextlib.contextmanager
def mutated(kind: str = "none"):
    """Temporarily inject a defect.

    ``w_sign``: agents move w_i against the gradient's sign.
    ``jacobian``: analytic parameter Jacobians are scaled by 1.01.
    """
    if kind not in MUTATIONS:
        raise ValueError(f"unknown mutation {kind!r}")
    if kind == "none":
        yield
        return
    if kind == "w_sign":
        original = distributed.agent_phase_b

        def flipped(agent, *args, **kwargs):
            new = original(agent, *args, **kwargs)
            return replace(new, w=2 * agent.w - new.w)

        with mock.patch.object(distributed, "agent_phase_b", flipped):
            yield
        return
    lin, cpl = LinearMap.jac_theta, CplMap.jac_theta
    with mock.patch.object(LinearMap, "jac_theta", lambda self, u, th: 1.01 * lin(self, u, th)), \
            mock.patch.object(CplMap, "jac_theta", lambda self, u, th: 1.01 * cpl(self, u, th)):
        yield


def _timed(fun: Callable[..., CheckResult]) -> Callable[..., CheckResult]:
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fun(*args, **kwargs)
        return replace(res, seconds=time.perf_counter() - t0)

    wrapper.__name__ = fun.__name__
    wrapper.__doc__ = fun.__doc__
    return wrapper


# --- individual properties --------------------------------------------------


def _interior_cpl_point(fam: CplMap, rng: np.random.Generator):
    """theta and u with the discriminant comfortably positive."""
    while True:
        b = rng.uniform(1.5, 3.0, fam.d_y)
        c = rng.uniform(-0.5, 0.5, fam.d_y)
        u = rng.uniform(-1.0, 1.0, 2)
        theta = np.concatenate([b, c])
        if np.min(fam.discriminant(u, theta)) > 0.5:
            return u, theta


@_timed
def check_gradients(n_points: int = 200, seed: int = 0, tol: float = 1e-6, h: float = 1e-6) -> CheckResult:
    """Analytic jac_theta, jac_u and grad f_t against central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tag in ("linear", "cpl"):
        for _ in range(n_points):
            d_y = int(rng.integers(1, 4))
            fam = LinearMap(d_u=2, d_y=d_y) if tag == "linear" else CplMap(d_u=2, d_y=d_y)
            if tag == "linear":
                u, theta = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, fam.d_theta)
            else:
                u, theta = _interior_cpl_point(fam, rng)
            worst = max(worst, finite_diff_check(fam, u, theta, h))
            # grad f_t over a small stacked problem built around this family
            n = int(rng.integers(2, 4))
            layout = ModelLayout((fam,) * n)
            topo = Topology.ring(n) if n > 2 else Topology.path(2)
            problem = IdentProblem(layout, build_weights(topo, "laplacian"))
            us = [u + rng.uniform(-0.05, 0.05, 2) for _ in range(n)]
            thetas = [theta for _ in range(n)]
            y = rng.uniform(-1, 1, d_y)
            x = StackedState(np.concatenate(thetas), rng.uniform(-0.2, 0.2, n * d_y))
            g = grad_f_t(x, us, y, problem)
            fd = central_difference(lambda v: np.atleast_1d(eval_f_t(x.with_vector(v), us, y, problem)), x.vector(), h)[0]
            worst = max(worst, float(np.max(np.abs(g - fd) / (1.0 + np.abs(g)))))
    return CheckResult("gradient-fd", worst <= tol, worst, tol, f"{2 * n_points} points")


@_timed
def check_distributed(n_instances: int = 20, rounds: int = 100, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    """Two-phase message passing reproduces the centralized iterates."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_instances):
        n = int(rng.integers(2, 9))
        d_y = int(rng.integers(1, 5))
        topo = random_connected_topology(n, rng)
        kind = ("laplacian", "column_stochastic")[k % 2]
        weights = build_weights(topo, kind, rng if kind == "column_stochastic" else None)
        tags = rng.choice(["linear", "cpl"], n)
        layout = ModelLayout(tuple(LinearMap(d_u=2, d_y=d_y) if t == "linear" else CplMap(d_u=2, d_y=d_y) for t in tags))
        problem = IdentProblem(layout, weights)
        x0 = StackedState(layout.default_theta() + rng.uniform(-0.1, 0.1, layout.d_theta), rng.uniform(-0.1, 0.1, n * d_y))
        sched = StepSchedule(float(rng.uniform(0.01, 1.0)))
        dist = OnlineIdentifier(problem, topo, sched, x0, "distributed", keep_messages=False)
        cent = OnlineIdentifier(problem, topo, StepSchedule(sched.c1), x0, "centralized", keep_messages=False)
        for _ in range(rounds):
            u = [rng.uniform(0.1, 1.0, 2) for _ in range(n)]
            y = rng.uniform(-1.0, 1.0, d_y)
            dist.update(u, y)
            cent.update(u, y)
            worst = max(worst, float(np.max(np.abs(dist.state.vector() - cent.state.vector()))))
    return CheckResult("distributed=centralized", worst <= tol, worst, tol, f"{n_instances} instances x {rounds} rounds")


def grid_projection(u_raw, cset: ControlSet, pitch: float = 2e-4) -> np.ndarray:
    """Nearest point of the pitch grid inside a disk_box set.

    Exhaustive over grid columns P = k * pitch; within a column the closest
    feasible grid Q is found in closed form, which is exact on the grid.
    """
    p_hi = min(cset.p_max, cset.s_max)
    P = np.arange(0.0, p_hi + 0.5 * pitch, pitch)
    P = P[P <= p_hi + 1e-15]
    q_lim = np.sqrt(np.maximum(cset.s_max**2 - P**2, 0.0))
    kmax = np.floor(q_lim / pitch + 1e-12)
    k = np.clip(np.round(u_raw[1] / pitch), -kmax, kmax)
    Q = k * pitch
    d2 = (P - u_raw[0]) ** 2 + (Q - u_raw[1]) ** 2
    best = int(np.argmin(d2))
    return np.array([P[best], Q[best]])


@_timed
def check_projection(n_points: int = 500, seed: int = 0, tol: float = 5e-4, tol_exact: float = 1e-9,
                     pitch: float = 2e-4, oracle: str = "location") -> CheckResult:
    """Dykstra projection against a brute-force grid; idempotence; non-expansiveness.

    ``oracle="location"`` compares the two points (distance <= ``tol``).
    ``oracle="distance"`` compares distances to the raw point instead: the
    projection may never be farther than the grid minimizer, nor closer by
    more than ``3 * pitch``. On the curved part of the boundary the grid
    minimizer can slide along the arc by far more than the pitch at almost
    no cost in distance, so only the second form is sharp there.
    """
    if oracle not in ("location", "distance"):
        raise ValueError(f"unknown projection oracle {oracle!r}")
    rng = np.random.default_rng(seed)
    worst_loc = worst_excess = worst_gap = worst_exact = 0.0
    misses = 0
    for _ in range(n_points):
        s = float(rng.uniform(0.5, 2.0))
        cset = ControlSet("disk_box", s, float(rng.uniform(0.0, 1.2 * s)))
        a, b = rng.uniform(-3 * s, 3 * s, 2), rng.uniform(-3 * s, 3 * s, 2)
        pa, pb = project(a, cset), project(b, cset)
        g = grid_projection(a, cset, pitch)
        loc = float(np.linalg.norm(pa - g))
        misses += loc > tol
        worst_loc = max(worst_loc, loc)
        d_proj, d_grid = float(np.linalg.norm(a - pa)), float(np.linalg.norm(a - g))
        worst_excess = max(worst_excess, d_proj - d_grid)
        worst_gap = max(worst_gap, d_grid - d_proj)
        worst_exact = max(worst_exact, float(np.max(np.abs(project(pa, cset) - pa))),
                          float(np.linalg.norm(pa - pb) - np.linalg.norm(a - b)), cset.violation(pa))
    exact_ok = worst_exact <= tol_exact
    detail = f"{misses}/{n_points} beyond {tol:.0e}; idempotence/non-expansive slack {worst_exact:.1e}"
    if oracle == "location":
        return CheckResult("projection-oracle", worst_loc <= tol and exact_ok, worst_loc, tol, detail)
    ok = exact_ok and worst_excess <= 1e-12 and worst_gap <= 3 * pitch
    return CheckResult("projection-distance", ok, worst_gap, 3 * pitch, f"max excess over grid {worst_excess:.1e}")


def lemma1_instance(seed: int, T: int = 60, noise: float = 0.05):
    """Random linear-family problem with common excitation and a noisy linear truth."""
    rng = np.random.default_rng(seed)
    n, d_y = int(rng.integers(2, 7)), int(rng.integers(1, 4))
    layout = ModelLayout.uniform("linear", n, d_y)
    topo = random_connected_topology(n, rng)
    problem = IdentProblem(layout, build_weights(topo, "laplacian"))
    theta_star = rng.uniform(-1, 1, layout.d_theta)
    sets = [ControlSet("disk_box", float(rng.uniform(0.5, 2.0)), 1.0) for _ in range(n)]
    ledger = RegretLedger()
    x0 = StackedState.initial(problem)
    for _ in range(T):
        u = sample_inputs(sets, rng, "common")
        y = layout.predict(u, theta_star) + rng.normal(0.0, noise, d_y)
        ledger.append(np.concatenate(u), y, eval_f_t(x0, u, y, problem))
    return problem, ledger


@_timed
def check_lemma1_suite(n_instances: int = 10, seed: int = 0, tol_grad: float = 1e-8, rtol: float = 1e-6) -> CheckResult:
    """Hindsight minimizers of the reformulated problem are stationary for the aggregate fit."""
    worst_ratio = 0.0
    all_ok = True
    for k in range(n_instances):
        problem, ledger = lemma1_instance(seed * 1000 + k)
        opt = hindsight_optimum(ledger, problem, tol=tol_grad)
        rep = check_lemma1(opt.x, ledger, problem, rtol=rtol)
        all_ok &= opt.converged and rep.passed
        worst_ratio = max(worst_ratio, rep.max_stationarity / rep.tolerance)
    return CheckResult("lemma1-stationarity", all_ok, worst_ratio, 1.0, "stationarity / tolerance")


def regret_slope(reports) -> float:
    T = np.array([r.T for r in reports], dtype=float)
    R = np.array([r.value for r in reports])
    if np.any(R <= 0):
        return float("inf") if np.all(R <= 0) else float(np.polyfit(np.log(T), np.log(np.maximum(R, 1e-300)), 1)[0])
    return float(np.polyfit(np.log(T), np.log(R), 1)[0])


@_timed
def check_regret(seeds=(1, 2, 3), scenario: Scenario | None = None, max_slope: float = 0.6, floor: float = -1e-6) -> CheckResult:
    """Least-squares slope of log R_T against log T and non-negativity of R_T."""
    base = scenario or load_scenario(bundled_path("identify_regret.toml"))
    worst_slope, worst_floor, ok = -np.inf, np.inf, True
    for s in seeds:
        run = run_identification(base.with_overrides(seed=s))
        slope = regret_slope(run.regrets)
        low = min(r.value for r in run.regrets)
        ok &= slope <= max_slope and low >= floor and all(r.converged for r in run.regrets)
        worst_slope, worst_floor = max(worst_slope, slope), min(worst_floor, low)
    return CheckResult("regret-slope", ok, worst_slope, max_slope, f"min R_T {worst_floor:.3g}")


@_timed
def check_consistency(scenario: Scenario | None = None, abs_tol: float = 1e-3, rel_tol: float = 0.01) -> CheckResult:
    """Final 100-step mean prediction error of the identification scenario."""
    scen = scenario or load_scenario(bundled_path("identify_consistency.toml"))
    run = run_identification(scen)
    final, init = run.final_error(), run.initial_error()
    ok = final <= abs_tol and final <= rel_tol * init
    return CheckResult("identification-consistency", ok, final, abs_tol, f"{final / init:.2%} of initial error")


@_timed
def check_messages(seed: int = 0, rounds: int = 25) -> CheckResult:
    """Structural privacy scan and per-round byte count."""
    rng = np.random.default_rng(seed)
    problems, worst = [], 0
    for n in (2, 4, 7):
        d_y = int(rng.integers(1, 4))
        topo = random_connected_topology(n, rng)
        problem = IdentProblem(ModelLayout.uniform("linear", n, d_y), build_weights(topo, "laplacian"))
        ident = OnlineIdentifier(problem, topo, StepSchedule(0.1))
        for _ in range(rounds):
            ident.update([rng.uniform(0, 1, 2) for _ in range(n)], rng.uniform(-1, 1, d_y))
        problems += audit_messages(ident.messages)
        expected = expected_numbers_per_round(topo, d_y)
        worst = max(worst, max(abs(m.numbers_total - expected) for m in ident.messages))
    ok = not problems and worst == 0
    return CheckResult("message-audit", ok, float(worst), 0.0, "; ".join(problems[:3]))


@_timed
def check_voltage(ticks: int | None = None) -> CheckResult:
    """Uncontrolled vs linear vs cpl closed loop on the bundled feeder."""
    runs = {}
    for tag in ("off", "linear", "cpl"):
        scen = load_scenario(bundled_path(f"control_{tag}.toml"))
        runs[tag] = run_control(scen if ticks is None else scen.with_overrides(ticks=ticks)).summary()
    v = voltage_verdict(runs)
    return CheckResult("voltage-regulation", all(v.values()), runs["linear"]["band_violation_integral"],
                       0.2 * runs["off"]["band_violation_integral"], ", ".join(f"{k}={'ok' if ok else 'fail'}" for k, ok in v.items()))


def voltage_verdict(s: dict) -> dict[str, bool]:
    off, lin, cpl = s["off"], s["linear"], s["cpl"]
    return {
        "a": off["violation_tick_fraction"] >= 0.05,
        "b": lin["band_violation_integral"] <= 0.2 * off["band_violation_integral"],
        "c": cpl["band_violation_integral"] <= lin["band_violation_integral"]
        and cpl["mean_model_error"] < lin["mean_model_error"],
    }


def check_projection_distance() -> CheckResult:
    return check_projection(oracle="distance")


QUICK = (check_gradients, check_distributed, check_projection_distance, check_lemma1_suite, check_regret, check_messages)


def run_suite(mutation: str = "none", checks=QUICK) -> list[CheckResult]:
    with mutated(mutation):
        return [c() for c in checks]
