"""Parametric local input-output maps and their derivatives.

Two families are provided:

``linear``
    phi(u, theta) = A u with ``theta = vec(A)`` (column-major), A of shape
    (d_y, d_u).
``cpl``
    Constant-power-load voltage model, elementwise over the d_y outputs,
    phi(u, theta) = (B - sqrt(B**2 - 4 (C - ubar))) / 2 with
    ``ubar = ||u||`` the apparent power of ``u = [P, Q]`` and
    ``theta = [B; C]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EPS_DISC = 1e-9
EPS_U = 1e-9


@dataclass
class DomainCounter:
    """Counts cpl evaluations whose discriminant fell below ``EPS_DISC``."""

    clamped: int = 0
    evaluations: int = 0

    def reset(self):
        self.clamped = 0
        self.evaluations = 0


@dataclass(frozen=True)
class LocalEstimate:
    value: np.ndarray
    owner: int = 0


def _as_vec(x, n: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.size != n:
        raise ValueError(f"{what} must have {n} entries, got {x.size}")
    return x


@dataclass(frozen=True)
class MapFamily:
    """Base class; concrete families override the ``_`` hooks."""

    d_u: int
    d_y: int
    tag: str = field(init=False, default="")

    @property
    def d_theta(self) -> int:
        raise NotImplementedError

    def default_theta(self) -> np.ndarray:
        raise NotImplementedError

    def _check(self, u, theta):
        return _as_vec(u, self.d_u, "u_i"), _as_vec(theta, self.d_theta, "theta_i")

    def value(self, u, theta, counter: DomainCounter | None = None) -> np.ndarray:
        raise NotImplementedError

    def jac_theta(self, u, theta) -> np.ndarray:
        raise NotImplementedError

    def jac_u(self, u, theta) -> np.ndarray:
        raise NotImplementedError

    def values_batch(self, U, theta) -> np.ndarray:
        """Values for a (T, d_u) array of inputs, shape (T, d_y)."""
        return np.array([self.value(u, theta) for u in U])

    def vjp_theta_batch(self, U, theta, Z) -> np.ndarray:
        """sum_t jac_theta(u_t, theta)^T z_t for stacked inputs and cotangents."""
        return sum((self.jac_theta(u, theta).T @ z for u, z in zip(U, Z)), np.zeros(self.d_theta))


@dataclass(frozen=True)
class LinearMap(MapFamily):
    tag: str = field(init=False, default="linear")

    @property
    def d_theta(self) -> int:
        return self.d_y * self.d_u

    def default_theta(self) -> np.ndarray:
        return np.zeros(self.d_theta)

    def matrix(self, theta) -> np.ndarray:
        return np.asarray(theta, dtype=float).reshape(self.d_u, self.d_y).T

    def value(self, u, theta, counter=None):
        u, theta = self._check(u, theta)
        return self.matrix(theta) @ u

    def jac_theta(self, u, theta):
        u, theta = self._check(u, theta)
        # d(Au)_k / d vec(A)[j*d_y + k] = u_j
        return np.kron(u[None, :], np.eye(self.d_y))

    def jac_u(self, u, theta):
        u, theta = self._check(u, theta)
        return self.matrix(theta).copy()

    def values_batch(self, U, theta):
        return np.asarray(U, dtype=float) @ self.matrix(theta).T

    def vjp_theta_batch(self, U, theta, Z):
        # vec(sum_t z_t u_t^T), column-major
        return (np.asarray(Z, dtype=float).T @ np.asarray(U, dtype=float)).T.ravel()


@dataclass(frozen=True)
class CplMap(MapFamily):
    """Constant-power-load map; requires ``d_u == 2`` (u = [P, Q])."""

    tag: str = field(init=False, default="cpl")
    b0: float = 2.0
    c0: float = 1.0

    def __post_init__(self):
        if self.d_u != 2:
            raise ValueError("cpl family takes u = [P, Q] (d_u = 2)")

    @property
    def d_theta(self) -> int:
        return 2 * self.d_y

    def default_theta(self) -> np.ndarray:
        return np.concatenate([np.full(self.d_y, self.b0), np.full(self.d_y, self.c0)])

    def _parts(self, u, theta):
        u, theta = self._check(u, theta)
        b, c = theta[: self.d_y], theta[self.d_y :]
        ubar = float(np.hypot(u[0], u[1]))
        disc = b * b - 4.0 * (c - ubar)
        return u, b, c, ubar, disc

    def discriminant(self, u, theta) -> np.ndarray:
        return self._parts(u, theta)[4]

    def value(self, u, theta, counter=None):
        _, b, _, _, disc = self._parts(u, theta)
        low = disc < EPS_DISC
        if counter is not None:
            counter.evaluations += 1
            counter.clamped += int(np.any(low))
        return 0.5 * (b - np.sqrt(np.where(low, EPS_DISC, disc)))

    def jac_theta(self, u, theta):
        _, b, _, _, disc = self._parts(u, theta)
        low = disc < EPS_DISC
        root = np.sqrt(np.where(low, EPS_DISC, disc))
        # derivative of the clamped function: the sqrt term is constant when clamped
        d_b = np.where(low, 0.5, 0.5 * (1.0 - b / root))
        d_c = np.where(low, 0.0, 1.0 / root)
        return np.hstack([np.diag(d_b), np.diag(d_c)])

    def jac_u(self, u, theta):
        u, _, _, ubar, disc = self._parts(u, theta)
        if ubar < EPS_U:
            return np.zeros((self.d_y, 2))
        low = disc < EPS_DISC
        d_ubar = np.where(low, 0.0, -1.0 / np.sqrt(np.where(low, EPS_DISC, disc)))
        return np.outer(d_ubar, u / ubar)

    def _batch_parts(self, U, theta):
        U = np.asarray(U, dtype=float)
        theta = _as_vec(theta, self.d_theta, "theta_i")
        b, c = theta[: self.d_y], theta[self.d_y :]
        ubar = np.hypot(U[:, 0], U[:, 1])[:, None]
        disc = b * b - 4.0 * (c - ubar)
        low = disc < EPS_DISC
        return b, low, np.sqrt(np.where(low, EPS_DISC, disc))

    def values_batch(self, U, theta):
        b, _, root = self._batch_parts(U, theta)
        return 0.5 * (b - root)

    def vjp_theta_batch(self, U, theta, Z):
        b, low, root = self._batch_parts(U, theta)
        Z = np.asarray(Z, dtype=float)
        d_b = np.where(low, 0.5, 0.5 * (1.0 - b / root))
        d_c = np.where(low, 0.0, 1.0 / root)
        return np.concatenate([(d_b * Z).sum(axis=0), (d_c * Z).sum(axis=0)])


def make_family(tag: str, d_y: int, d_u: int = 2, **kwargs) -> MapFamily:
    if tag == "linear":
        return LinearMap(d_u=d_u, d_y=d_y)
    if tag == "cpl":
        return CplMap(d_u=d_u, d_y=d_y, **kwargs)
    raise ValueError(f"unknown model family {tag!r}")


def eval_local(family: MapFamily, u_i, theta_i, owner: int = 0, counter: DomainCounter | None = None) -> LocalEstimate:
    return LocalEstimate(family.value(u_i, theta_i, counter), owner)


def aggregate(locals_: Sequence) -> np.ndarray:
    """Network output estimate: the mean of the local estimates."""
    if len(locals_) == 0:
        raise ValueError("cannot aggregate an empty list of local estimates")
    vals = [np.asarray(e.value if isinstance(e, LocalEstimate) else e, dtype=float) for e in locals_]
    d_y = vals[0].shape
    if any(v.shape != d_y for v in vals):
        raise ValueError("local estimates disagree on d_y")
    # fixed summation order keeps results independent of worker count
    total = np.zeros(d_y)
    for v in vals:
        total = total + v
    return total / len(vals)


def jac_theta(family: MapFamily, u_i, theta_i) -> np.ndarray:
    return family.jac_theta(u_i, theta_i)


def jac_u(family: MapFamily, u_i, theta_i) -> np.ndarray:
    return family.jac_u(u_i, theta_i)


def central_difference(fun, x, h: float) -> np.ndarray:
    """Central-difference Jacobian of a vector function ``fun`` at ``x``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        step = np.zeros_like(x)
        step[k] = h
        cols.append((np.asarray(fun(x + step)) - np.asarray(fun(x - step))) / (2 * h))
    return np.column_stack(cols)


def finite_diff_check(family: MapFamily, u_i, theta_i, h: float = 1e-6) -> float:
    """Max of |analytic - central difference| / (1 + |analytic|) over both Jacobians."""
    u_i = np.asarray(u_i, dtype=float)
    theta_i = np.asarray(theta_i, dtype=float)
    fd_theta = central_difference(lambda th: family.value(u_i, th), theta_i, h)
    fd_u = central_difference(lambda uu: family.value(uu, theta_i), u_i, h)
    worst = 0.0
    for analytic, fd in ((family.jac_theta(u_i, theta_i), fd_theta), (family.jac_u(u_i, theta_i), fd_u)):
        worst = max(worst, float(np.max(np.abs(analytic - fd) / (1.0 + np.abs(analytic)))))
    return worst


@dataclass(frozen=True)
class ModelLayout:
    """Per-agent map families and the block layout of the stacked theta."""

    families: tuple[MapFamily, ...]

    def __post_init__(self):
        if not self.families:
            raise ValueError("layout needs at least one agent")
        d_y = {f.d_y for f in self.families}
        if len(d_y) != 1:
            raise ValueError(f"all agents must share d_y, got {sorted(d_y)}")

    @property
    def n_agents(self) -> int:
        return len(self.families)

    @property
    def d_y(self) -> int:
        return self.families[0].d_y

    @property
    def theta_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([f.d_theta for f in self.families])])

    @property
    def u_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([f.d_u for f in self.families])])

    @property
    def d_theta(self) -> int:
        return int(self.theta_offsets[-1])

    @property
    def d_u(self) -> int:
        return int(self.u_offsets[-1])

    def split_theta(self, theta) -> list[np.ndarray]:
        off = self.theta_offsets
        theta = np.asarray(theta, dtype=float)
        if theta.size != off[-1]:
            raise ValueError(f"theta must have {off[-1]} entries, got {theta.size}")
        return [theta[off[i] : off[i + 1]] for i in range(self.n_agents)]

    def split_u(self, u) -> list[np.ndarray]:
        if isinstance(u, (list, tuple)) and len(u) == self.n_agents:
            parts = [np.asarray(p, dtype=float).ravel() for p in u]
        else:
            flat = np.asarray(u, dtype=float).ravel()
            off = self.u_offsets
            if flat.size != off[-1]:
                raise ValueError(f"u must have {off[-1]} entries, got {flat.size}")
            parts = [flat[off[i] : off[i + 1]] for i in range(self.n_agents)]
        for f, p in zip(self.families, parts):
            if p.size != f.d_u:
                raise ValueError(f"u_i must have {f.d_u} entries, got {p.size}")
        return parts

    def default_theta(self) -> np.ndarray:
        return np.concatenate([f.default_theta() for f in self.families])

    def stack_values(self, u, theta, counter: DomainCounter | None = None) -> np.ndarray:
        """Phi(u, theta): the N local estimates stacked into one vector."""
        return np.concatenate(
            [f.value(ui, th, counter) for f, ui, th in zip(self.families, self.split_u(u), self.split_theta(theta))]
        )

    def predict(self, u, theta, counter: DomainCounter | None = None) -> np.ndarray:
        return aggregate(self.stack_values(u, theta, counter).reshape(self.n_agents, self.d_y))

    @classmethod
    def uniform(cls, tag: str, n_agents: int, d_y: int, d_u: int = 2, **kwargs) -> "ModelLayout":
        return cls(tuple(make_family(tag, d_y, d_u, **kwargs) for _ in range(n_agents)))
