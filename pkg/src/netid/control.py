"""Projected-gradient predictive controller driven by the identified model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .maps import ModelLayout

DYKSTRA_TOL = 1e-10
DYKSTRA_MAX_SWEEPS = 1000


@dataclass(frozen=True)
class ControlSet:
    """Feasible decisions of one PES.

    ``disk_box``: {(P, Q): P^2 + Q^2 <= s_max^2, 0 <= P <= p_max}.
    ``box``: elementwise ``lo <= u <= hi``.
    """

    kind: str = "disk_box"
    s_max: float = 1.0
    p_max: float = 1.0
    lo: tuple[float, ...] = ()
    hi: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == "disk_box":
            if not self.s_max > 0:
                raise ValueError("s_max must be positive")
            if not self.p_max >= 0:
                raise ValueError("p_max must be non-negative")
        elif self.kind == "box":
            if len(self.lo) != len(self.hi) or any(a > b for a, b in zip(self.lo, self.hi)):
                raise ValueError("box bounds must satisfy lo <= hi")
        else:
            raise ValueError(f"unknown control set kind {self.kind!r}")

    def with_p_max(self, p_max: float) -> "ControlSet":
        return replace(self, p_max=float(p_max))

    def violation(self, u) -> float:
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return float(max(0.0, np.max(np.asarray(self.lo) - u), np.max(u - np.asarray(self.hi))))
        return float(max(0.0, math.hypot(u[0], u[1]) - self.s_max, -u[0], u[0] - self.p_max))

    def contains(self, u, tol: float = 1e-9) -> bool:
        return self.violation(u) <= tol


def _proj_disk(v: np.ndarray, radius: float) -> np.ndarray:
    norm = math.hypot(v[0], v[1])
    return v if norm <= radius else v * (radius / norm)


def _proj_slab(v: np.ndarray, hi: float) -> np.ndarray:
    return np.array([min(max(v[0], 0.0), hi), v[1]])


def project(u_raw, cset: ControlSet) -> np.ndarray:
    """Euclidean projection onto ``cset``.

    The disk/slab intersection is handled with Dykstra's alternating
    projections. A final disk projection is applied; it only shrinks toward
    the origin, so the slab constraint stays satisfied.
    """
    u = np.asarray(u_raw, dtype=float).ravel()
    if not np.all(np.isfinite(u)):
        raise ValueError(f"cannot project non-finite point {u}")
    if cset.kind == "box":
        return np.clip(u, cset.lo, cset.hi)
    if cset.contains(u, 0.0):
        return u.copy()
    x = u.copy()
    p = np.zeros(2)
    q = np.zeros(2)
    for _ in range(DYKSTRA_MAX_SWEEPS):
        y = _proj_disk(x + p, cset.s_max)
        p = x + p - y
        x_new = _proj_slab(y + q, cset.p_max)
        q = y + q - x_new
        done = np.max(np.abs(x_new - x)) <= DYKSTRA_TOL
        x = x_new
        if done:
            break
    return _proj_disk(x, cset.s_max)


@dataclass(frozen=True)
class LossSpec:
    band_lo: float = 0.95
    band_hi: float = 1.05
    band_weight: float = 100.0
    curtail_weight: float = 3.0
    reactive_weight: float = 1.0

    def __post_init__(self):
        if not self.band_lo < self.band_hi:
            raise ValueError("band_lo must be below band_hi")
        if min(self.band_weight, self.curtail_weight, self.reactive_weight) < 0:
            raise ValueError("loss weights must be non-negative")


def band_excess(y, lo: float = 0.95, hi: float = 1.05) -> np.ndarray:
    """Signed excursion outside [lo, hi]: positive above, negative below, 0 inside."""
    y = np.asarray(y, dtype=float)
    return np.maximum(y - hi, 0.0) - np.maximum(lo - y, 0.0)


def voltage_band_loss(y_hat_theta, spec: LossSpec) -> float:
    ex = band_excess(y_hat_theta, spec.band_lo, spec.band_hi)
    return spec.band_weight * float(ex @ ex)


def voltage_band_grad(y_hat_theta, spec: LossSpec) -> np.ndarray:
    return 2.0 * spec.band_weight * band_excess(y_hat_theta, spec.band_lo, spec.band_hi)


def injection_cost(u_i, cset: ControlSet, spec: LossSpec) -> float:
    """alpha_p (pbar - P)^2 + alpha_q Q^2."""
    p, q = float(u_i[0]), float(u_i[1])
    return spec.curtail_weight * (cset.p_max - p) ** 2 + spec.reactive_weight * q * q


def injection_grad(u_i, cset: ControlSet, spec: LossSpec) -> np.ndarray:
    p, q = float(u_i[0]), float(u_i[1])
    return np.array([-2.0 * spec.curtail_weight * (cset.p_max - p), 2.0 * spec.reactive_weight * q])


def composite_objective(u: Sequence, layout: ModelLayout, theta, spec: LossSpec, sets: Sequence[ControlSet]) -> float:
    """band_loss(y_hat_theta(u)) + sum_i injection_cost(u_i)."""
    y = layout.predict(list(u), theta)
    return voltage_band_loss(y, spec) + sum(injection_cost(ui, s, spec) for ui, s in zip(u, sets))


def composite_gradient(u: Sequence, layout: ModelLayout, theta, spec: LossSpec, sets: Sequence[ControlSet]) -> list[np.ndarray]:
    u = [np.asarray(ui, dtype=float) for ui in u]
    thetas = layout.split_theta(theta)
    y = layout.predict(u, theta)
    g_band = voltage_band_grad(y, spec)
    n = layout.n_agents
    return [
        f.jac_u(ui, th).T @ g_band / n + injection_grad(ui, s, spec)
        for f, ui, th, s in zip(layout.families, u, thetas, sets)
    ]


@dataclass(frozen=True)
class ControllerState:
    u: tuple[np.ndarray, ...]
    tau: int = 0
    t: int = 1
    alpha: float = 0.05
    T_con: int = 1


class ControlError(RuntimeError):
    pass


def projected_gradient_step(state: ControllerState, layout: ModelLayout, theta, spec: LossSpec,
                            sets: Sequence[ControlSet]) -> ControllerState:
    """u_i <- Proj_{U_i}[u_i - alpha * d/du_i (band_loss(y_hat_theta) + h_i(u_i))] for every agent."""
    grads = composite_gradient(state.u, layout, theta, spec, sets)
    new_u = []
    for i, (ui, g, s) in enumerate(zip(state.u, grads, sets)):
        if not np.all(np.isfinite(g)):
            raise ControlError(f"non-finite control gradient at agent {i + 1}")
        new_u.append(project(ui - state.alpha * g, s))
    return replace(state, u=tuple(new_u), tau=state.tau + 1)


def initial_decision(cset: ControlSet) -> np.ndarray:
    """No curtailment, no reactive power."""
    return project(np.array([cset.p_max, 0.0]), cset)


@dataclass
class TickRecord:
    tick: int
    tau: int
    t: int
    eta: float
    u: np.ndarray  # (N, 2)
    y: np.ndarray  # true sensor voltages
    y_meas: np.ndarray
    y_hat_theta: np.ndarray
    ell: float
    h: float
    band_violation_count: int
    band_violation_sq: float
    model_err_inf: float
    updated: bool


@dataclass
class Trajectory:
    """Per-tick records of a closed-loop run plus identification round traces."""

    records: list[TickRecord] = field(default_factory=list)
    rounds: list = field(default_factory=list)
    messages: list = field(default_factory=list)
    domain_clamps: int = 0
    sublevel_violations: int = 0
    max_grad_norm: float = 0.0
    final_theta: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.records)

    def append(self, rec: TickRecord):
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def band_violation_integral(self) -> float:
        return float(sum(r.band_violation_sq for r in self.records))

    def violation_tick_fraction(self) -> float:
        return float(np.mean([r.band_violation_count > 0 for r in self.records])) if self.records else 0.0

    def mean_model_error(self) -> float:
        return float(np.mean(self.column("model_err_inf")))

    def total_curtailment(self, pbar: np.ndarray) -> float:
        u = np.stack([r.u for r in self.records])
        return float(np.sum(pbar[: len(self.records)] - u[:, :, 0]))


def run_controller(
    plant,
    identifier,
    layout: ModelLayout,
    sets_at: Callable[[int], Sequence[ControlSet]],
    spec: LossSpec,
    n_ticks: int,
    alpha: float = 0.05,
    T_con: int = 1,
    reset_on_update: bool = True,
    control: bool = True,
    measure: Callable | None = None,
) -> Trajectory:
    """Closed loop: apply u, measure, then refresh the model or take a control step.

    ``plant.step(tick, u)`` returns a state whose sensor voltages come from
    ``plant.true_output(state)``; ``identifier.update(u, y_hat)`` performs one
    identification round and exposes ``theta`` and ``state.t``.

    Active power is carried between ticks as a curtailment below the
    available power, so with ``control=False`` or ``alpha=0`` the decisions
    stay at the no-curtailment point and the run is the free response.
    With ``T_con == 1`` the model is refreshed and a control step follows in
    the same tick, without the reset to u(0).
    """
    if T_con < 1:
        raise ValueError("T_con must be at least 1")
    traj = Trajectory()
    sets = list(sets_at(0))
    u = [initial_decision(s) for s in sets]
    state = ControllerState(tuple(u), tau=0, t=identifier.state.t, alpha=alpha if control else 0.0, T_con=T_con)
    prev_sets = sets
    for tick in range(n_ticks):
        sets = list(sets_at(tick))
        # keep the curtailment, follow the available power
        u = [project(ui + np.array([s.p_max - ps.p_max, 0.0]), s) for ui, s, ps in zip(state.u, sets, prev_sets)]
        state = replace(state, u=tuple(u))
        plant_state = plant.step(tick, u)
        y_true = plant.true_output(plant_state)
        y_hat = y_true if measure is None else measure(y_true)
        theta = identifier.theta
        y_model = layout.predict(list(u), theta)
        ex_true = band_excess(y_true, spec.band_lo, spec.band_hi)
        h_val = sum(injection_cost(ui, s, spec) for ui, s in zip(u, sets))
        rec = TickRecord(
            tick=tick, tau=state.tau, t=identifier.state.t, eta=identifier.schedule.eta(identifier.state.t),
            u=np.array(u), y=y_true.copy(), y_meas=np.asarray(y_hat, dtype=float).copy(), y_hat_theta=y_model,
            ell=voltage_band_loss(y_model, spec), h=h_val,
            band_violation_count=int(np.count_nonzero(ex_true)), band_violation_sq=float(ex_true @ ex_true),
            model_err_inf=float(np.max(np.abs(y_model - y_hat))), updated=False,
        )
        traj.append(rec)
        refresh = T_con == 1 or (state.tau + 1) % T_con == 0
        if refresh:
            identifier.update(u, y_hat)
            rec.updated = True
            state = replace(state, t=identifier.state.t)
        if T_con == 1 or not refresh:
            if state.alpha > 0:
                state = projected_gradient_step(state, layout, identifier.theta, spec, sets)
            else:
                state = replace(state, tau=state.tau + 1)
        else:
            if reset_on_update:
                state = replace(state, u=tuple(initial_decision(s) for s in sets))
            state = replace(state, tau=state.tau + 1)
        prev_sets = sets
    traj.rounds = list(identifier.records)
    traj.messages = list(getattr(identifier, "messages", []))
    traj.domain_clamps = identifier.monitor.domain.clamped
    traj.sublevel_violations = identifier.monitor.violations
    traj.max_grad_norm = identifier.monitor.max_grad_norm
    traj.final_theta = identifier.theta.copy()
    return traj
