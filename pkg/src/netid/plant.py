"""Synthetic radial feeder used as the ground-truth system.

Power flow is solved with a complex backward-forward sweep. All quantities
are per unit; bus 0 is the slack bus held at 1.0. Injections follow the
generator convention: positive active power flows *into* the grid.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .maps import ModelLayout

PF_TOL = 1e-10
PF_MAX_SWEEPS = 500


class PowerFlowError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class Feeder:
    """Radial feeder. ``parent[k]`` is the upstream bus of ``k`` (-1 for the slack),
    ``r[k], x[k]`` the impedance of the line feeding bus ``k`` (ignored at the slack)."""

    parent: tuple[int, ...]
    r: tuple[float, ...]
    x: tuple[float, ...]
    pes_buses: tuple[int, ...]
    sensor_buses: tuple[int, ...]
    base_load_p: tuple[float, ...] = ()
    base_load_q: tuple[float, ...] = ()
    pes_rating: tuple[float, ...] = ()
    pes_peak: tuple[float, ...] = ()
    name: str = "feeder"
    order: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.parent)
        for name in ("parent", "r", "x", "pes_buses", "sensor_buses", "base_load_p", "base_load_q", "pes_rating", "pes_peak"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if n < 1 or self.parent[0] != -1:
            raise ValueError("bus 0 must be the slack bus with parent -1")
        if len(self.r) != n or len(self.x) != n:
            raise ValueError("r and x need one entry per bus")
        children = [[] for _ in range(n)]
        for k in range(1, n):
            p = self.parent[k]
            if not 0 <= p < n or p == k:
                raise ValueError(f"bus {k} has invalid parent {p}")
            if not (self.r[k] > 0 and self.x[k] > 0):
                raise ValueError(f"line into bus {k} needs r, x > 0")
            children[p].append(k)
        order, queue = [], deque([0])
        while queue:
            k = queue.popleft()
            order.append(k)
            queue.extend(children[k])
        if len(order) != n:
            raise ValueError("parent array does not describe a tree rooted at bus 0")
        object.__setattr__(self, "order", tuple(order))
        for what, buses in (("pes", self.pes_buses), ("sensor", self.sensor_buses)):
            if not buses or any(not 0 <= b < n for b in buses) or len(set(buses)) != len(buses):
                raise ValueError(f"{what} buses must be distinct valid bus indices")
        for name, size in (("base_load_p", n), ("base_load_q", n), ("pes_rating", len(self.pes_buses)), ("pes_peak", len(self.pes_buses))):
            val = getattr(self, name)
            if val and len(val) != size:
                raise ValueError(f"{name} needs {size} entries")

    @property
    def n_bus(self) -> int:
        return len(self.parent)

    @property
    def n_pes(self) -> int:
        return len(self.pes_buses)

    @property
    def d_y(self) -> int:
        return len(self.sensor_buses)


@dataclass(frozen=True)
class PlantState:
    tick: int
    voltages: np.ndarray
    injections: np.ndarray
    sweeps: int
    residual: float


def solve_power_flow(feeder: Feeder, injections, tol: float = PF_TOL, max_sweeps: int = PF_MAX_SWEEPS) -> np.ndarray:
    """Bus voltage magnitudes for complex net injections ``p + 1j q`` per bus."""
    return solve_power_flow_state(feeder, injections, tol, max_sweeps).voltages


def solve_power_flow_state(feeder: Feeder, injections, tol: float = PF_TOL, max_sweeps: int = PF_MAX_SWEEPS, tick: int = 0) -> PlantState:
    s = np.asarray(injections, dtype=complex).ravel()
    n = feeder.n_bus
    if s.size != n:
        raise ValueError(f"need {n} bus injections, got {s.size}")
    z = np.asarray(feeder.r) + 1j * np.asarray(feeder.x)
    v = np.ones(n, dtype=complex)
    order = feeder.order
    parent = feeder.parent
    change = float("inf")
    for sweep in range(1, max_sweeps + 1):
        # backward: current flowing from parent into each bus's subtree
        branch = -np.conj(s / v)
        for k in reversed(order[1:]):
            branch[parent[k]] += branch[k]
        v_new = v.copy()
        v_new[0] = 1.0
        for k in order[1:]:
            v_new[k] = v_new[parent[k]] - z[k] * branch[k]
        if not np.all(np.isfinite(v_new)):
            raise PowerFlowError(f"power flow diverged at sweep {sweep}", change)
        change = float(np.max(np.abs(v_new - v)))
        v = v_new
        if change <= tol:
            return PlantState(tick, np.abs(v), s, sweep, change)
    raise PowerFlowError(f"power flow did not converge in {max_sweeps} sweeps (last change {change:.3e})", change)


def two_bus_voltage(r: float, x: float, p_load: float, q_load: float, v0: float = 1.0) -> float:
    """Closed-form receiving-end magnitude of a single line feeding a constant-power load."""
    a = v0 * v0 - 2.0 * (r * p_load + x * q_load)
    disc = a * a - 4.0 * (r * r + x * x) * (p_load * p_load + q_load * q_load)
    if disc < 0:
        raise ValueError("load exceeds the line's transfer capability")
    return float(np.sqrt((a + np.sqrt(disc)) / 2.0))


@dataclass(frozen=True)
class ProfileParams:
    """Shape parameters for :func:`generate_profiles` (all amplitudes relative)."""

    load_amplitude: float = 0.3
    load_period: float = 1.0  # in units of the run length
    load_phase: float = 0.0
    load_noise: float = 0.02
    sun_center: float = 0.5  # fraction of the run
    sun_width: float = 0.18  # std of the bell, fraction of the run
    sun_cutoff: float = 0.05
    cloud_noise: float = 0.0


@dataclass(frozen=True)
class Profiles:
    """Exogenous series per tick: loads per bus (p, q) and available PES power."""

    load_p: np.ndarray  # (ticks, n_bus)
    load_q: np.ndarray  # (ticks, n_bus)
    pbar: np.ndarray  # (ticks, n_pes)
    irradiance: np.ndarray  # (ticks,)
    seed: int

    @property
    def n_ticks(self) -> int:
        return self.load_p.shape[0]


def irradiance_curve(n_ticks: int, params: ProfileParams) -> np.ndarray:
    """Bell curve in [0, 1] clipped to zero where it falls below ``sun_cutoff``."""
    k = np.arange(n_ticks)
    center = params.sun_center * n_ticks
    width = max(params.sun_width * n_ticks, 1e-12)
    bell = np.exp(-0.5 * ((k - center) / width) ** 2)
    return np.where(bell >= params.sun_cutoff, bell, 0.0)


def load_shape(n_ticks: int, params: ProfileParams) -> np.ndarray:
    """1 + amplitude * sin(2 pi k / (period * n_ticks) + phase)."""
    k = np.arange(n_ticks)
    period = max(params.load_period * n_ticks, 1e-12)
    return 1.0 + params.load_amplitude * np.sin(2 * np.pi * k / period + params.load_phase)


def generate_profiles(seed: int, n_ticks: int, feeder: Feeder, params: ProfileParams | None = None) -> Profiles:
    """Seeded load and irradiance series.

    loads:  base * load_shape(k) * (1 + e),  e ~ N(0, load_noise) clipped to +-3 load_noise
    pbar_i: peak_i * irradiance(k) * (1 - c),  c ~ U(0, cloud_noise)
    """
    if n_ticks < 1:
        raise ValueError("n_ticks must be at least 1")
    params = params or ProfileParams()
    rng = np.random.default_rng(seed)
    shape = load_shape(n_ticks, params)
    base_p = np.asarray(feeder.base_load_p or np.zeros(feeder.n_bus), dtype=float)
    base_q = np.asarray(feeder.base_load_q or np.zeros(feeder.n_bus), dtype=float)
    noise = np.clip(rng.normal(0.0, params.load_noise, (n_ticks, feeder.n_bus)), -3 * params.load_noise, 3 * params.load_noise)
    factor = shape[:, None] * (1.0 + noise)
    load_p = base_p[None, :] * factor
    load_q = base_q[None, :] * factor
    load_p[:, 0] = load_q[:, 0] = 0.0
    sun = irradiance_curve(n_ticks, params)
    cloud = rng.uniform(0.0, params.cloud_noise, (n_ticks, feeder.n_pes)) if params.cloud_noise > 0 else np.zeros((n_ticks, feeder.n_pes))
    peak = np.asarray(feeder.pes_peak or feeder.pes_rating or np.zeros(feeder.n_pes), dtype=float)
    pbar = np.maximum(peak[None, :] * sun[:, None] * (1.0 - cloud), 0.0)
    return Profiles(load_p, load_q, pbar, sun, seed)


def fusion_measure(state: PlantState | np.ndarray, sensor_buses: Sequence[int], noise_sigma: float = 0.0,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Sensor voltages as collected by the fusion center, plus optional Gaussian noise."""
    volts = state.voltages if isinstance(state, PlantState) else np.asarray(state, dtype=float)
    y = volts[list(sensor_buses)].astype(float)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noisy measurements need an rng")
        y = y + rng.normal(0.0, noise_sigma, y.size)
    return y


class FeederPlant:
    """Feeder + profiles: maps PES decisions at a tick to a plant state."""

    def __init__(self, feeder: Feeder, profiles: Profiles):
        if profiles.load_p.shape[1] != feeder.n_bus or profiles.pbar.shape[1] != feeder.n_pes:
            raise ValueError("profiles do not match the feeder")
        self.feeder = feeder
        self.profiles = profiles

    @property
    def d_y(self) -> int:
        return self.feeder.d_y

    @property
    def n_agents(self) -> int:
        return self.feeder.n_pes

    def pbar(self, tick: int) -> np.ndarray:
        return self.profiles.pbar[tick]

    def injections(self, tick: int, u: Sequence[np.ndarray]) -> np.ndarray:
        s = -(self.profiles.load_p[tick] + 1j * self.profiles.load_q[tick])
        for bus, ui in zip(self.feeder.pes_buses, u):
            s[bus] += ui[0] + 1j * ui[1]
        return s

    def step(self, tick: int, u: Sequence[np.ndarray]) -> PlantState:
        try:
            return solve_power_flow_state(self.feeder, self.injections(tick, u), tick=tick)
        except PowerFlowError as exc:
            raise PowerFlowError(f"tick {tick}: {exc}", exc.residual) from exc

    def true_output(self, state: PlantState) -> np.ndarray:
        return state.voltages[list(self.feeder.sensor_buses)]


@dataclass
class SyntheticTruth:
    """Ground truth inside the model class: y = mean_i phi_i(u_i, theta*_i) (+ noise)."""

    layout: ModelLayout
    theta_star: np.ndarray
    noise_sigma: float = 0.0
    rng: np.random.Generator | None = None

    def __call__(self, u) -> np.ndarray:
        return synthetic_truth(self.layout, self.theta_star, u, self.noise_sigma, self.rng)


def synthetic_truth(layout: ModelLayout, theta_star, u, noise_sigma: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    y = layout.predict(u, theta_star)
    for f, ui, th in zip(layout.families, layout.split_u(u), layout.split_theta(theta_star)):
        if f.tag == "cpl" and np.any(f.discriminant(ui, th) < 0):
            raise ValueError("truth model evaluated outside the cpl domain")
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noisy truth needs an rng")
        y = y + rng.normal(0.0, noise_sigma, y.size)
    return y


class SyntheticPlant:
    """Plant whose output is a :class:`SyntheticTruth`; drop-in for :class:`FeederPlant`
    in the closed loop. The returned state carries the output as ``voltages``."""

    def __init__(self, truth: SyntheticTruth):
        self.truth = truth

    @property
    def d_y(self) -> int:
        return self.truth.layout.d_y

    def step(self, tick: int, u: Sequence[np.ndarray]) -> PlantState:
        y = self.truth(list(u))
        return PlantState(tick, y, np.concatenate([np.asarray(ui, dtype=float) for ui in u]), 0, 0.0)

    def true_output(self, state: PlantState) -> np.ndarray:
        return state.voltages
