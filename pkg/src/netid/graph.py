"""Communication topologies and the weight matrices that couple agents.

Nodes are 0-indexed internally. Config files and reports use 1-based
indices; conversion happens in :mod:`netid.scenario`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

ROW_SUM_TOL = 1e-12
RANK_TOL = 1e-9


class TopologyError(ValueError):
    """Raised for malformed or disconnected topologies."""


class NullSpaceError(ValueError):
    """Raised when a weight matrix does not have null space span{1}."""


@dataclass(frozen=True)
class Topology:
    """Undirected simple graph on ``n_nodes`` nodes."""

    n_nodes: int
    edges: tuple[tuple[int, int], ...]
    _neighbors: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_nodes < 1:
            raise TopologyError("n_nodes must be positive")
        seen = set()
        normalized = []
        for a, b in self.edges:
            a, b = int(a), int(b)
            if a == b:
                raise TopologyError(f"self-loop at node {a}")
            if not (0 <= a < self.n_nodes and 0 <= b < self.n_nodes):
                raise TopologyError(f"edge ({a}, {b}) references a node outside 0..{self.n_nodes - 1}")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise TopologyError(f"duplicate edge {key}")
            seen.add(key)
            normalized.append(key)
        object.__setattr__(self, "edges", tuple(sorted(normalized)))
        nbrs = [[] for _ in range(self.n_nodes)]
        for a, b in self.edges:
            nbrs[a].append(b)
            nbrs[b].append(a)
        object.__setattr__(self, "_neighbors", tuple(tuple(sorted(n)) for n in nbrs))

    def neighbors(self, i: int) -> tuple[int, ...]:
        """Neighbors of node ``i`` in ascending index order."""
        return self._neighbors[i]

    def degree(self, i: int) -> int:
        return len(self._neighbors[i])

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n_nodes, self.n_nodes))
        for a, b in self.edges:
            adj[a, b] = adj[b, a] = 1.0
        return adj

    def components(self) -> list[list[int]]:
        """Connected components, each sorted, ordered by smallest member."""
        unseen = set(range(self.n_nodes))
        comps = []
        while unseen:
            root = min(unseen)
            stack, comp = [root], []
            unseen.discard(root)
            while stack:
                k = stack.pop()
                comp.append(k)
                for j in self._neighbors[k]:
                    if j in unseen:
                        unseen.discard(j)
                        stack.append(j)
            comps.append(sorted(comp))
        return comps

    def is_connected(self) -> bool:
        return len(self.components()) == 1

    def require_connected(self):
        comps = self.components()
        if len(comps) > 1:
            detached = comps[1]
            raise TopologyError(
                f"topology is disconnected ({len(comps)} components); "
                f"nodes {[k + 1 for k in detached]} (1-based) are not reachable from node 1"
            )

    @classmethod
    def from_edges(cls, n_nodes: int, edges) -> "Topology":
        return cls(n_nodes, tuple((int(a), int(b)) for a, b in edges))

    @classmethod
    def path(cls, n: int) -> "Topology":
        return cls(n, tuple((k, k + 1) for k in range(n - 1)))

    @classmethod
    def ring(cls, n: int) -> "Topology":
        if n < 3:
            return cls.path(n)
        return cls(n, tuple((k, (k + 1) % n) for k in range(n)))

    @classmethod
    def complete(cls, n: int) -> "Topology":
        return cls(n, tuple(combinations(range(n), 2)))


def random_connected_topology(n: int, rng: np.random.Generator, extra_edge_prob: float = 0.3) -> Topology:
    """Random spanning tree plus independent extra edges."""
    order = rng.permutation(n)
    edges = set()
    for k in range(1, n):
        parent = order[rng.integers(0, k)]
        a, b = int(order[k]), int(parent)
        edges.add((min(a, b), max(a, b)))
    for a, b in combinations(range(n), 2):
        if (a, b) not in edges and rng.random() < extra_edge_prob:
            edges.add((a, b))
    return Topology(n, tuple(sorted(edges)))


@dataclass(frozen=True)
class NullSpaceReport:
    ok: bool
    max_row_sum: float
    sigma_second_smallest: float
    norm2: float
    message: str = ""


@dataclass(frozen=True)
class WeightMatrix:
    """Dense N x N weight matrix P with null space span{1_N}.

    ``kind`` is one of ``"laplacian"``, ``"column_stochastic"`` or ``"custom"``.
    """

    matrix: np.ndarray
    kind: str = "custom"
    topology: Topology | None = None

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"weight matrix must be square, got shape {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def __getitem__(self, idx):
        return self.matrix[idx]

    def lift(self, d_y: int) -> "LiftedWeightMatrix":
        return LiftedWeightMatrix(self, d_y)


def verify_nullspace(P) -> NullSpaceReport:
    """Numerical check that null{P} = span{1}.

    Passes iff ``max|P 1| <= 1e-12 * N`` and the second smallest singular
    value exceeds 1e-9. Never raises.
    """
    m = P.matrix if isinstance(P, WeightMatrix) else np.asarray(P, dtype=float)
    n = m.shape[0]
    row = float(np.max(np.abs(m @ np.ones(n)))) if n else 0.0
    sv = np.linalg.svd(m, compute_uv=False)
    # ascending order; sv[-2] is the second smallest
    sigma2 = float(sv[-2]) if n >= 2 else float("inf")
    norm2 = float(sv[0]) if n else 0.0
    problems = []
    if row > ROW_SUM_TOL * n:
        problems.append(f"P @ 1 is not zero (max |row sum| = {row:.3e})")
    if n >= 2 and not sigma2 > RANK_TOL:
        problems.append(f"null-space assumption violated: second smallest singular value {sigma2:.3e} <= {RANK_TOL:g}")
    return NullSpaceReport(not problems, row, sigma2, norm2, "; ".join(problems))


def _check_pattern(m: np.ndarray, topology: Topology, what: str):
    adj = topology.adjacency() + np.eye(topology.n_nodes)
    bad = np.argwhere((m != 0) & (adj == 0))
    if len(bad):
        i, j = bad[0]
        raise TopologyError(f"{what} has entry ({i + 1}, {j + 1}) outside the topology's sparsity pattern")


def _validated(m: np.ndarray, kind: str, topology: Topology) -> WeightMatrix:
    report = verify_nullspace(m)
    if not report.ok:
        raise NullSpaceError(report.message)
    _check_pattern(m, topology, "weight matrix")
    return WeightMatrix(m, kind, topology)


def build_laplacian(topology: Topology) -> WeightMatrix:
    """Graph Laplacian: degree on the diagonal, -1 per edge."""
    topology.require_connected()
    n = topology.n_nodes
    m = np.zeros((n, n))
    for a, b in topology.edges:
        m[a, b] = m[b, a] = -1.0
    for i in range(n):
        m[i, i] = topology.degree(i)
    return _validated(m, "laplacian", topology)


def build_from_column_stochastic(topology: Topology, stochastic) -> WeightMatrix:
    """P = I - S^T for a column stochastic S supported on the topology."""
    topology.require_connected()
    s = np.asarray(stochastic, dtype=float)
    n = topology.n_nodes
    if s.shape != (n, n):
        raise ValueError(f"stochastic matrix must be {n}x{n}, got {s.shape}")
    if np.any(s < 0) or np.any(s > 1):
        raise ValueError("stochastic matrix entries must lie in [0, 1]")
    col = s.sum(axis=0)
    if np.max(np.abs(col - 1.0)) > ROW_SUM_TOL:
        raise ValueError(f"stochastic matrix columns must sum to 1 (max deviation {np.max(np.abs(col - 1.0)):.3e})")
    _check_pattern(s, topology, "stochastic matrix")
    return _validated(np.eye(n) - s.T, "column_stochastic", topology)


def uniform_column_stochastic(topology: Topology) -> np.ndarray:
    """Column j spreads mass 1/(deg_j + 1) over j and its neighbors."""
    n = topology.n_nodes
    s = np.zeros((n, n))
    for j in range(n):
        members = (j,) + topology.neighbors(j)
        s[list(members), j] = 1.0 / len(members)
    return s


def random_column_stochastic(topology: Topology, rng: np.random.Generator) -> np.ndarray:
    n = topology.n_nodes
    s = np.zeros((n, n))
    for j in range(n):
        members = [j, *topology.neighbors(j)]
        weights = rng.uniform(0.2, 1.0, size=len(members))
        s[members, j] = weights / weights.sum()
    # renormalize so each column sums to 1 to machine precision
    s /= s.sum(axis=0, keepdims=True)
    return s


def build_weights(topology: Topology, kind: str, rng: np.random.Generator | None = None) -> WeightMatrix:
    """Construct P of the requested kind (``laplacian`` or ``column_stochastic``)."""
    if kind == "laplacian":
        return build_laplacian(topology)
    if kind == "column_stochastic":
        s = uniform_column_stochastic(topology) if rng is None else random_column_stochastic(topology, rng)
        return build_from_column_stochastic(topology, s)
    raise ValueError(f"unknown weight kind {kind!r}")


@dataclass(frozen=True)
class LiftedWeightMatrix:
    """Implicit P kron I_{d_y}; products are formed block by block."""

    base: WeightMatrix
    d_y: int

    @property
    def shape(self) -> tuple[int, int]:
        k = self.base.n * self.d_y
        return (k, k)

    def _blocks(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        n = self.base.n
        if w.size != n * self.d_y:
            raise ValueError(f"expected a vector of {n}*{self.d_y} = {n * self.d_y} entries, got {w.size}")
        return w.reshape(n, self.d_y)

    def apply(self, w) -> np.ndarray:
        """Block i of the result is sum_j P[i, j] w_j."""
        return (self.base.matrix @ self._blocks(w)).ravel()

    def apply_transpose(self, z) -> np.ndarray:
        """Block i of the result is sum_j P[j, i] z_j."""
        return (self.base.matrix.T @ self._blocks(z)).ravel()

    def dense(self) -> np.ndarray:
        """Materialized Kronecker product, for tests and diagnostics only."""
        return np.kron(self.base.matrix, np.eye(self.d_y))


def lifted_apply(lifted: LiftedWeightMatrix, w, transpose: bool = False) -> np.ndarray:
    return lifted.apply_transpose(w) if transpose else lifted.apply(w)
