"""Online identification of the stacked model on the graph-reformulated objective.

For one sample (u, y_hat) the objective is

    f_t(x) = ||Phi(u, theta) - 1 (x) y_hat - P_hat w||^2 / (2 N^2),   x = [theta; w]

where Phi stacks the N local estimates. Its gradient splits into per-agent
blocks, which is what the message-passing version in
:mod:`netid.distributed` exploits.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .graph import LiftedWeightMatrix, WeightMatrix
from .maps import DomainCounter, ModelLayout

log = logging.getLogger(__name__)

SUBLEVEL_STREAK = 10


class NumericalError(RuntimeError):
    """A state or gradient became non-finite."""


@dataclass(frozen=True)
class IdentProblem:
    """Everything f_t needs besides the data: map layout and coupling weights."""

    layout: ModelLayout
    weights: WeightMatrix

    def __post_init__(self):
        if self.weights.n != self.layout.n_agents:
            raise ValueError(
                f"weight matrix is {self.weights.n}x{self.weights.n} but the layout has {self.layout.n_agents} agents"
            )

    @property
    def n(self) -> int:
        return self.layout.n_agents

    @property
    def d_y(self) -> int:
        return self.layout.d_y

    @property
    def lifted(self) -> LiftedWeightMatrix:
        return self.weights.lift(self.d_y)

    @property
    def dim(self) -> int:
        return self.layout.d_theta + self.n * self.d_y


@dataclass(frozen=True)
class StackedState:
    """Decision vector x = [theta; w] with its update counter ``t`` (1-based)."""

    theta: np.ndarray
    w: np.ndarray
    t: int = 1

    def __post_init__(self):
        object.__setattr__(self, "theta", np.array(self.theta, dtype=float).ravel())
        object.__setattr__(self, "w", np.array(self.w, dtype=float).ravel())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.w])

    def with_vector(self, x, t: int | None = None) -> "StackedState":
        x = np.asarray(x, dtype=float)
        k = self.theta.size
        return StackedState(x[:k], x[k:], self.t if t is None else t)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.w)))

    @classmethod
    def initial(cls, problem: IdentProblem, theta=None) -> "StackedState":
        theta = problem.layout.default_theta() if theta is None else np.asarray(theta, dtype=float)
        return cls(theta, np.zeros(problem.n * problem.d_y), 1)


@dataclass
class StepSchedule:
    """Diminishing step eta_t = c1 / sqrt(t)."""

    c1: float = 0.01

    def __post_init__(self):
        if not self.c1 >= 0:
            raise ValueError("c1 must be non-negative")

    def eta(self, t: int) -> float:
        if t < 1:
            raise ValueError("the update counter starts at 1")
        return self.c1 / math.sqrt(t)


def _check_data(problem: IdentProblem, x: StackedState, y_hat) -> np.ndarray:
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if y_hat.size != problem.d_y:
        raise ValueError(f"measurement must have d_y = {problem.d_y} entries, got {y_hat.size}")
    if x.theta.size != problem.layout.d_theta:
        raise ValueError(f"theta must have {problem.layout.d_theta} entries, got {x.theta.size}")
    if x.w.size != problem.n * problem.d_y:
        raise ValueError(f"w must have {problem.n * problem.d_y} entries, got {x.w.size}")
    return y_hat


def residual_z(x: StackedState, u, y_hat, problem: IdentProblem, counter: DomainCounter | None = None) -> np.ndarray:
    """z = Phi(u, theta) - 1 (x) y_hat - P_hat w, stacked over agents."""
    y_hat = _check_data(problem, x, y_hat)
    phi = problem.layout.stack_values(u, x.theta, counter)
    return phi - np.tile(y_hat, problem.n) - problem.lifted.apply(x.w)


def eval_f_t(x: StackedState, u, y_hat, problem: IdentProblem) -> float:
    z = residual_z(x, u, y_hat, problem)
    return float(z @ z) / (2.0 * problem.n**2)


def grad_from_residual(x: StackedState, u, z, problem: IdentProblem) -> np.ndarray:
    layout = problem.layout
    scale = 1.0 / problem.n**2
    zb = z.reshape(problem.n, problem.d_y)
    g_theta = [
        f.jac_theta(ui, th).T @ zb[i] for i, (f, ui, th) in enumerate(zip(layout.families, layout.split_u(u), layout.split_theta(x.theta)))
    ]
    g_w = -problem.lifted.apply_transpose(z)
    return scale * np.concatenate([*g_theta, g_w])


def grad_f_t(x: StackedState, u, y_hat, problem: IdentProblem) -> np.ndarray:
    """Gradient of f_t with respect to [theta; w]."""
    return grad_from_residual(x, u, residual_z(x, u, y_hat, problem), problem)


@dataclass
class StepMonitor:
    """Telemetry for the online updates: sub-level violations and gradient bounds.

    A step violates the sub-level condition when f_t(x+) > f_t(x). After
    ``SUBLEVEL_STREAK`` consecutive violations the schedule's c1 is halved,
    once per monitor.
    """

    steps: int = 0
    violations: int = 0
    streak: int = 0
    max_grad_norm: float = 0.0
    halved: bool = False
    last_f: float = float("nan")
    last_f_after: float = float("nan")
    last_grad_norm: float = float("nan")
    domain: DomainCounter = field(default_factory=DomainCounter)

    @property
    def violation_fraction(self) -> float:
        return self.violations / self.steps if self.steps else 0.0

    def record(self, f_before: float, f_after: float, grad_norm: float, schedule: StepSchedule) -> bool:
        self.steps += 1
        self.last_f, self.last_f_after, self.last_grad_norm = f_before, f_after, grad_norm
        self.max_grad_norm = max(self.max_grad_norm, grad_norm)
        violated = f_after > f_before
        if violated:
            self.violations += 1
            self.streak += 1
            if self.streak >= SUBLEVEL_STREAK and not self.halved:
                schedule.c1 *= 0.5
                self.halved = True
                log.warning("%d consecutive sub-level violations; halving c1 to %g", self.streak, schedule.c1)
        else:
            self.streak = 0
        return violated


def centralized_step(
    x: StackedState,
    u,
    y_hat,
    schedule: StepSchedule,
    problem: IdentProblem,
    monitor: StepMonitor | None = None,
) -> StackedState:
    """One online gradient step x(t+1) = x(t) - eta_t grad f_t(x(t))."""
    counter = monitor.domain if monitor is not None else None
    z = residual_z(x, u, y_hat, problem, counter)
    grad = grad_from_residual(x, u, z, problem)
    eta = schedule.eta(x.t)
    x_next = x.with_vector(x.vector() - eta * grad, t=x.t + 1)
    if not (x_next.is_finite() and np.all(np.isfinite(grad))):
        raise NumericalError(
            f"non-finite state after update t={x.t} (eta={eta:g}, |grad|={np.linalg.norm(grad):g}, "
            f"|z|={np.linalg.norm(z):g})"
        )
    if monitor is not None:
        f_before = float(z @ z) / (2.0 * problem.n**2)
        monitor.record(f_before, eval_f_t(x_next.with_vector(x_next.vector(), t=x.t), u, y_hat, problem),
                       float(np.linalg.norm(grad)), schedule)
    return x_next


# --- regret accounting -----------------------------------------------------


@dataclass
class RegretLedger:
    """History of (u(t), y_hat(t), f_t(x(t))). Diagnostics only; the online
    updates never read it."""

    inputs: list = field(default_factory=list)
    measurements: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    total: float = 0.0
    optimum: "HindsightResult | None" = None

    def append(self, u, y_hat, f_value: float):
        self.inputs.append(np.asarray(u, dtype=float).ravel().copy())
        self.measurements.append(np.asarray(y_hat, dtype=float).ravel().copy())
        self.losses.append(float(f_value))
        self.total += float(f_value)
        self.optimum = None

    def __len__(self) -> int:
        return len(self.losses)

    def prefix(self, T: int) -> "RegretLedger":
        out = RegretLedger()
        for u, y, f in zip(self.inputs[:T], self.measurements[:T], self.losses[:T]):
            out.append(u, y, f)
        return out

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.losses:
            raise ValueError("ledger is empty")
        return np.vstack(self.inputs), np.vstack(self.measurements)


def _batch_residuals(problem: IdentProblem, U: np.ndarray, Y: np.ndarray, theta: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Residuals for every sample, shape (T, N, d_y)."""
    layout = problem.layout
    off = layout.u_offsets
    Pw = problem.lifted.apply(w).reshape(problem.n, problem.d_y)
    phis = [f.values_batch(U[:, off[i] : off[i + 1]], th) for i, (f, th) in enumerate(zip(layout.families, layout.split_theta(theta)))]
    return np.stack(phis, axis=1) - Y[:, None, :] - Pw[None, :, :]


def batch_objective(problem: IdentProblem, U, Y, xvec) -> tuple[float, np.ndarray]:
    """F(x) = sum_t f_t(x) and its gradient over a block of samples."""
    layout = problem.layout
    k = layout.d_theta
    theta, w = xvec[:k], xvec[k:]
    Z = _batch_residuals(problem, U, Y, theta, w)
    scale = 1.0 / problem.n**2
    value = 0.5 * scale * float(np.sum(Z * Z))
    off = layout.u_offsets
    g_theta = [
        f.vjp_theta_batch(U[:, off[i] : off[i + 1]], th, Z[:, i, :])
        for i, (f, th) in enumerate(zip(layout.families, layout.split_theta(theta)))
    ]
    g_w = -problem.lifted.apply_transpose(Z.sum(axis=0).ravel())
    return value, scale * np.concatenate([*g_theta, g_w])


def _linear_design(problem: IdentProblem, U: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """F(x) = ||M x - b||^2 / (2 N^2) when every family is linear."""
    layout = problem.layout
    n, d_y, T = problem.n, problem.d_y, U.shape[0]
    k = layout.d_theta
    M = np.zeros((T, n, d_y, k + n * d_y))
    eye = np.eye(d_y)
    toff, uoff = layout.theta_offsets, layout.u_offsets
    for i in range(n):
        Ui = U[:, uoff[i] : uoff[i + 1]]
        # kron(u^T, I) for every sample at once
        M[:, i, :, toff[i] : toff[i + 1]] = np.einsum("tj,ab->tajb", Ui, eye).reshape(T, d_y, -1)
        M[:, i, :, k:] = -np.kron(problem.weights.matrix[i], eye)[None]
    return M.reshape(T * n * d_y, -1), np.repeat(Y[:, None, :], n, axis=1).ravel()


@dataclass(frozen=True)
class HindsightResult:
    x: StackedState
    value: float
    grad_norm: float
    converged: bool
    iterations: int


def hindsight_optimum(
    ledger: RegretLedger,
    problem: IdentProblem,
    tol: float = 1e-8,
    max_iters: int = 200_000,
    x0: StackedState | None = None,
    method: str = "auto",
) -> HindsightResult:
    """Minimize F(x) = sum_t f_t(x) over the ledger.

    ``method="descent"`` runs batch gradient descent: each iteration tries a
    Barzilai-Borwein step and backtracks (Armijo) until F decreases
    sufficiently, so F is monotone along the iterates. It stops when
    ``max|grad F| <= tol``. ``"lstsq"`` solves the linear least-squares
    problem directly and needs every family to be linear; ``"auto"`` picks
    it whenever possible, then polishes with descent.
    """
    if method not in ("auto", "lstsq", "descent"):
        raise ValueError(f"unknown hindsight method {method!r}")
    U, Y = ledger.arrays()
    start = StackedState.initial(problem) if x0 is None else x0
    x = start.vector()
    linear = all(f.tag == "linear" for f in problem.layout.families)
    if method == "lstsq" and not linear:
        raise ValueError("the lstsq hindsight solver needs linear families")
    if method != "descent" and linear:
        M, b = _linear_design(problem, U, Y)
        x = np.linalg.lstsq(M, b, rcond=None)[0]
    f, g = batch_objective(problem, U, Y, x)
    step = 1.0 / max(1.0, float(np.linalg.norm(g)))
    x_prev = g_prev = None
    it = 0
    gnorm = float(np.max(np.abs(g)))
    while gnorm > tol and it < max_iters:
        it += 1
        if x_prev is not None:
            s, yv = x - x_prev, g - g_prev
            sy = float(s @ yv)
            if sy > 0:
                step = float(s @ s) / sy
        gg = float(g @ g)
        while True:
            x_try = x - step * g
            f_try, g_try = batch_objective(problem, U, Y, x_try)
            if np.isfinite(f_try) and f_try <= f - 1e-4 * step * gg:
                break
            step *= 0.5
            if step < 1e-300:
                break
        if step < 1e-300:
            break
        x_prev, g_prev = x, g
        x, f, g = x_try, f_try, g_try
        gnorm = float(np.max(np.abs(g)))
    converged = gnorm <= tol
    if not converged:
        log.warning("hindsight solver stopped after %d iterations with max|grad F| = %.3e", it, gnorm)
    result = HindsightResult(start.with_vector(x, t=len(ledger) + 1), f, gnorm, converged, it)
    ledger.optimum = result
    return result


@dataclass(frozen=True)
class RegretReport:
    T: int
    sum_f: float
    hindsight_F: float
    value: float
    converged: bool
    grad_norm: float


def regret_report(ledger: RegretLedger, problem: IdentProblem, **solver_kwargs) -> RegretReport:
    if len(ledger) == 0:
        raise ValueError("regret needs a non-empty ledger")
    opt = ledger.optimum if ledger.optimum is not None and not solver_kwargs else hindsight_optimum(ledger, problem, **solver_kwargs)
    return RegretReport(len(ledger), ledger.total, opt.value, ledger.total - opt.value, opt.converged, opt.grad_norm)


def regret(ledger: RegretLedger, problem: IdentProblem, **solver_kwargs) -> float:
    """R_T = sum_t f_t(x(t)) - min_x sum_t f_t(x)."""
    return regret_report(ledger, problem, **solver_kwargs).value


# --- stationarity of the aggregate least-squares problem -------------------


@dataclass(frozen=True)
class StationarityReport:
    max_stationarity: float
    per_agent: np.ndarray
    per_sample_max: float
    data_scale: float
    tolerance: float
    passed: bool


def check_lemma1(x_star: StackedState, ledger: RegretLedger, problem: IdentProblem, rtol: float = 1e-6) -> StationarityReport:
    """Stationarity of theta* for the aggregate fit

        min_theta  sum_t ||sum_i (y_hat(t) - phi_i(u_i(t), theta_i))||^2 / (2 N^2).

    ``per_agent[j]`` is ``max|grad_{theta_j}|`` of that objective.
    ``per_sample_max`` is the largest single-sample term of the same
    gradient; it vanishes only when every sample is fitted exactly.
    """
    U, Y = ledger.arrays()
    layout = problem.layout
    n = problem.n
    thetas = layout.split_theta(x_star.theta)
    off = layout.u_offsets
    phis = [f.values_batch(U[:, off[i] : off[i + 1]], th) for i, (f, th) in enumerate(zip(layout.families, thetas))]
    R = sum(phis) - n * Y  # (T, d_y): sum_i (phi_i - y_hat)
    per_agent = np.zeros(n)
    per_sample = 0.0
    for j, (f, th) in enumerate(zip(layout.families, thetas)):
        Uj = U[:, off[j] : off[j + 1]]
        g = f.vjp_theta_batch(Uj, th, R) / n**2
        per_agent[j] = float(np.max(np.abs(g))) if g.size else 0.0
        for u_t, r_t in zip(Uj, R):
            per_sample = max(per_sample, float(np.max(np.abs(f.jac_theta(u_t, th).T @ r_t))) / n**2)
    data_scale = float(np.max(np.abs(Y))) * max(1.0, float(np.max(np.abs(U))))
    tol = rtol * (1.0 + data_scale)
    worst = float(per_agent.max())
    return StationarityReport(worst, per_agent, per_sample, data_scale, tol, worst <= tol)
