"""Experiment orchestration: identification-only runs and closed-loop runs.

A scenario's seed fixes every random draw. Each stream (truth, inputs,
noise, profiles) gets its own child generator of one ``SeedSequence`` so
adding draws to one stream never shifts another.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .control import ControlSet, Trajectory, run_controller
from .distributed import OnlineIdentifier, RoundRecord
from .graph import build_weights
from .identify import IdentProblem, RegretLedger, RegretReport, StepSchedule, eval_f_t, regret_report
from .maps import ModelLayout, make_family
from .plant import FeederPlant, fusion_measure, generate_profiles
from .scenario import ConfigError, Scenario, load_feeder

log = logging.getLogger(__name__)

STREAMS = ("truth", "inputs", "noise", "weights")


def streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(STREAMS, children)}


def sample_uniform(cset: ControlSet, rng: np.random.Generator, max_tries: int = 10_000) -> np.ndarray:
    """Uniform draw from a disk_box set by rejection from its bounding box."""
    p_hi = min(cset.p_max, cset.s_max)
    for _ in range(max_tries):
        u = np.array([rng.uniform(0.0, p_hi), rng.uniform(-cset.s_max, cset.s_max)])
        if cset.contains(u, 0.0):
            return u
    raise RuntimeError("rejection sampling did not find a feasible input")


def sample_inputs(sets, rng: np.random.Generator, excitation: str = "common") -> list[np.ndarray]:
    """Random inputs for one round.

    ``independent``: every agent draws uniformly from its own set.
    ``common``: one draw from the unit set, scaled into each agent's set
    (P by min(p_max, s_max), Q by s_max), so all agents see the same
    excitation direction.
    """
    if excitation == "independent":
        return [sample_uniform(s, rng) for s in sets]
    if excitation != "common":
        raise ValueError(f"unknown excitation {excitation!r}")
    v = sample_uniform(ControlSet("disk_box", 1.0, 1.0), rng)
    return [np.array([v[0] * min(s.p_max, s.s_max), v[1] * s.s_max]) for s in sets]


@dataclass
class IdentificationRun:
    scenario: Scenario
    problem: IdentProblem
    identifier: OnlineIdentifier
    theta_star: np.ndarray
    ledger: RegretLedger
    pred_error: np.ndarray  # ||y_hat_theta(t) - y_hat(t)||_inf before the update at t
    regrets: list[RegretReport] = field(default_factory=list)

    @property
    def rounds(self) -> list[RoundRecord]:
        return self.identifier.records

    def final_error(self, window: int = 100) -> float:
        return float(np.mean(self.pred_error[-window:]))

    def initial_error(self, window: int = 100) -> float:
        return float(np.mean(self.pred_error[:window]))


def identification_setup(scen: Scenario):
    """Problem, topology and truth parameters of an identification scenario."""
    rngs = streams(scen.seed)
    n, d_y = scen.topology.n_agents, scen.identify.d_y
    layout = ModelLayout.uniform(scen.family[0], n, d_y)
    topo = scen.topology.build()
    weights = build_weights(topo, scen.topology.weights, rngs["weights"] if scen.topology.weights == "column_stochastic" else None)
    problem = IdentProblem(layout, weights)
    truth_layout = ModelLayout.uniform(scen.identify.truth, n, d_y)
    s = scen.identify.truth_scale
    theta_star = rngs["truth"].uniform(-s, s, truth_layout.d_theta)
    return problem, topo, truth_layout, theta_star, rngs


def drift_term(t: int, d_y: int, amplitude: float, period: float) -> np.ndarray:
    """Bounded drift disturbance, amplitude * sin(2 pi t / period + phase_k)."""
    if amplitude == 0:
        return np.zeros(d_y)
    phase = 2 * np.pi * np.arange(d_y) / d_y
    return amplitude * np.sin(2 * np.pi * t / period + phase)


def run_identification(scen: Scenario, keep_messages: bool = False) -> IdentificationRun:
    """Online identification against a synthetic truth with random exciting inputs."""
    if scen.mode != "identify":
        raise ValueError("run_identification needs a scenario with mode = \"identify\"")
    ident = scen.identify
    problem, topo, truth_layout, theta_star, rngs = identification_setup(scen)
    sets = [ControlSet("disk_box", ident.s_max, ident.p_max)] * problem.n
    identifier = OnlineIdentifier(problem, topo, StepSchedule(scen.schedule.c1), mode=scen.identifier, keep_messages=keep_messages)
    ledger = RegretLedger()
    errs = np.empty(scen.ticks)
    for k in range(scen.ticks):
        u = sample_inputs(sets, rngs["inputs"], ident.excitation)
        y = truth_layout.predict(u, theta_star) + drift_term(k + 1, problem.d_y, ident.drift, ident.drift_period)
        if ident.noise_sigma > 0:
            y = y + rngs["noise"].normal(0.0, ident.noise_sigma, y.size)
        x = identifier.state
        errs[k] = float(np.max(np.abs(problem.layout.predict(u, x.theta) - y)))
        ledger.append(np.concatenate(u), y, eval_f_t(x, u, y, problem))
        identifier.update(u, y)
    run = IdentificationRun(scen, problem, identifier, theta_star, ledger, errs)
    for T in ident.regret_at:
        run.regrets.append(regret_report(ledger.prefix(T), problem))
    return run


# --- closed loop ------------------------------------------------------------


@dataclass
class ControlRun:
    scenario: Scenario
    trajectory: Trajectory
    pbar: np.ndarray
    layout: ModelLayout

    def summary(self) -> dict[str, float]:
        return summarize(self.trajectory, self.pbar)


def summarize(traj: Trajectory, pbar: np.ndarray) -> dict[str, float]:
    return {
        "ticks": len(traj),
        "band_violation_integral": traj.band_violation_integral(),
        "violation_tick_fraction": traj.violation_tick_fraction(),
        "total_curtailment": traj.total_curtailment(pbar),
        "mean_model_error": traj.mean_model_error(),
    }


def run_control(scen: Scenario, keep_messages: bool = False) -> ControlRun:
    """Closed-loop voltage regulation on a feeder fixture."""
    if scen.mode != "control":
        raise ValueError("run_control needs a scenario with mode = \"control\"")
    fixture = load_feeder(scen.control.feeder)
    feeder = fixture.feeder
    if feeder.n_pes != scen.topology.n_agents:
        raise ConfigError("topology.n_agents", f"feeder {feeder.name} has {feeder.n_pes} PES units")
    params = replace(fixture.profiles, **scen.profiles) if scen.profiles else fixture.profiles
    profiles = generate_profiles(scen.seed, scen.ticks, feeder, params)
    plant = FeederPlant(feeder, profiles)
    rngs = streams(scen.seed)
    families = scen.families(feeder.n_pes)
    layout = ModelLayout(tuple(make_family(f, feeder.d_y) for f in families))
    topo = scen.topology.build()
    weights = build_weights(topo, scen.topology.weights, rngs["weights"] if scen.topology.weights == "column_stochastic" else None)
    problem = IdentProblem(layout, weights)
    identifier = OnlineIdentifier(problem, topo, StepSchedule(scen.schedule.c1), mode=scen.identifier, keep_messages=keep_messages)
    sigma = scen.control.noise_sigma
    measure = None
    if sigma > 0:
        noise_rng = rngs["noise"]
        measure = lambda y: fusion_measure(y, range(y.size), sigma, noise_rng)  # noqa: E731
    sets_at = lambda k: [ControlSet("disk_box", r, p) for r, p in zip(feeder.pes_rating, profiles.pbar[k])]  # noqa: E731
    traj = run_controller(
        plant, identifier, layout, sets_at, scen.loss, scen.ticks,
        alpha=scen.schedule.alpha, T_con=scen.schedule.T_con,
        reset_on_update=scen.schedule.reset_on_update, control=scen.control.control, measure=measure,
    )
    return ControlRun(scen, traj, profiles.pbar, layout)

