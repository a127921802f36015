"""Message-passing realization of the online update.

Each round runs in lock step:

1. the fusion center broadcasts ``y_hat(t)`` to every agent;
2. phase A: agents send ``w_i`` to their neighbors, then compute the local
   residual ``z_i``;
3. phase B: agents send ``z_i`` to their neighbors, then update
   ``theta_i`` and ``w_i``.

Messages carry only ``y_hat``, ``w`` blocks, ``z`` blocks and round tags. The
schema has no field for parameters or inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .graph import Topology, WeightMatrix
from .identify import IdentProblem, NumericalError, StackedState, StepSchedule
from .maps import DomainCounter, MapFamily

BYTES_PER_NUMBER = 8
PAYLOAD_KINDS = ("y_hat", "w", "z")
MESSAGE_FIELDS = ("round", "kind", "sender", "receiver", "payload")


class ProtocolError(RuntimeError):
    """Missing, duplicated or stale messages."""


@dataclass(frozen=True)
class Message:
    round: int
    kind: str
    sender: int
    receiver: int
    payload: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in PAYLOAD_KINDS:
            raise ValueError(f"message kind must be one of {PAYLOAD_KINDS}, got {self.kind!r}")

    @property
    def n_numbers(self) -> int:
        return len(self.payload)

    @property
    def n_bytes(self) -> int:
        return BYTES_PER_NUMBER * len(self.payload)


FUSION_CENTER = -1


@dataclass
class RoundMessages:
    """Everything sent during one round, with byte accounting per link."""

    round: int
    broadcast: Message | None = None
    phase_a: list[Message] = field(default_factory=list)
    phase_b: list[Message] = field(default_factory=list)

    def all_messages(self) -> list[Message]:
        head = [self.broadcast] if self.broadcast is not None else []
        return head + self.phase_a + self.phase_b

    @property
    def bytes_phase_a(self) -> int:
        return sum(m.n_bytes for m in self.phase_a)

    @property
    def bytes_phase_b(self) -> int:
        return sum(m.n_bytes for m in self.phase_b)

    @property
    def numbers_total(self) -> int:
        return sum(m.n_numbers for m in self.all_messages())

    def link_bytes(self) -> dict[tuple[int, int], int]:
        out: dict[tuple[int, int], int] = {}
        for m in self.all_messages():
            key = (m.sender, m.receiver)
            out[key] = out.get(key, 0) + m.n_bytes
        return out


def expected_numbers_per_round(topology: Topology, d_y: int) -> int:
    """One broadcast of y_hat plus a w and a z block over every directed link."""
    return d_y + 2 * sum(topology.degree(i) for i in range(topology.n_nodes)) * d_y


def audit_messages(rounds) -> list[str]:
    """Structural privacy scan; returns a list of problems (empty when clean)."""
    problems = []
    for rm in rounds:
        for m in rm.all_messages():
            names = tuple(f for f in m.__dataclass_fields__)
            if names != MESSAGE_FIELDS:
                problems.append(f"round {rm.round}: unexpected message fields {names}")
            if m.kind not in PAYLOAD_KINDS:
                problems.append(f"round {rm.round}: payload kind {m.kind!r}")
            if m.round != rm.round:
                problems.append(f"round {rm.round}: message tagged with round {m.round}")
        if rm.broadcast is None or rm.broadcast.kind != "y_hat":
            problems.append(f"round {rm.round}: missing y_hat broadcast")
        if any(m.kind != "w" for m in rm.phase_a) or any(m.kind != "z" for m in rm.phase_b):
            problems.append(f"round {rm.round}: phase payload kinds out of order")
    return problems


@dataclass(frozen=True)
class AgentState:
    """Local view of agent ``index``: its parameters, auxiliary block and weights.

    ``row_weights[j] = P[i, j]`` and ``col_weights[j] = P[j, i]`` for ``j`` in
    the closed neighborhood, keyed in ascending index order.
    """

    index: int
    family: MapFamily
    theta: np.ndarray
    w: np.ndarray
    row_weights: dict
    col_weights: dict
    n_agents: int
    z: np.ndarray | None = None
    round: int = 1

    @property
    def neighbors(self) -> tuple[int, ...]:
        return tuple(j for j in self.row_weights if j != self.index)


def make_agents(problem: IdentProblem, topology: Topology, x: StackedState) -> list[AgentState]:
    P = problem.weights.matrix
    d_y = problem.d_y
    thetas = problem.layout.split_theta(x.theta)
    agents = []
    for i in range(problem.n):
        closed = sorted((i,) + topology.neighbors(i))
        agents.append(
            AgentState(
                index=i,
                family=problem.layout.families[i],
                theta=thetas[i].copy(),
                w=x.w[i * d_y : (i + 1) * d_y].copy(),
                row_weights={j: float(P[i, j]) for j in closed},
                col_weights={j: float(P[j, i]) for j in closed},
                n_agents=problem.n,
                round=x.t,
            )
        )
    return agents


def stack_agents(agents: list[AgentState]) -> StackedState:
    return StackedState(
        np.concatenate([a.theta for a in agents]),
        np.concatenate([a.w for a in agents]),
        agents[0].round,
    )


def _collect(agent: AgentState, inbox: dict, what: str) -> dict:
    out = {}
    for j in agent.neighbors:
        if j not in inbox:
            raise ProtocolError(f"agent {agent.index + 1}: no {what} message on link {j + 1} -> {agent.index + 1}")
        out[j] = inbox[j]
    return out


def agent_phase_a(agent: AgentState, y_hat, u_i, inbox_w: dict, counter: DomainCounter | None = None):
    """Local residual z_i = phi_i - y_hat - sum_j P[i, j] w_j.

    Returns the updated agent (z cached) and the outbox ``{neighbor: z_i}``.
    """
    w_nbrs = _collect(agent, inbox_w, "w")
    coupling = np.zeros_like(agent.w)
    for j, p_ij in agent.row_weights.items():
        coupling = coupling + p_ij * (agent.w if j == agent.index else np.asarray(w_nbrs[j], dtype=float))
    z_i = agent.family.value(u_i, agent.theta, counter) - np.asarray(y_hat, dtype=float) - coupling
    outbox = {j: z_i.copy() for j in agent.neighbors}
    return replace(agent, z=z_i), outbox


def agent_phase_b(agent: AgentState, u_i, schedule: StepSchedule, inbox_z: dict, round_tag: int | None = None) -> AgentState:
    """Gradient update of (theta_i, w_i) from the cached z_i and neighbors' z_j.

    The 1/N^2 factor of f_t is folded into the step so the result matches
    the centralized update exactly.
    """
    if agent.z is None:
        raise ProtocolError(f"agent {agent.index + 1}: phase B before phase A")
    if round_tag is not None and round_tag != agent.round:
        raise ProtocolError(f"agent {agent.index + 1}: stale round tag {round_tag} (current round {agent.round})")
    z_nbrs = _collect(agent, inbox_z, "z")
    eta = schedule.eta(agent.round) / agent.n_agents**2
    g_theta = agent.family.jac_theta(u_i, agent.theta).T @ agent.z
    mix = np.zeros_like(agent.w)
    for j, p_ji in agent.col_weights.items():
        mix = mix + p_ji * (agent.z if j == agent.index else np.asarray(z_nbrs[j], dtype=float))
    return replace(
        agent,
        theta=agent.theta - eta * g_theta,
        w=agent.w + eta * mix,
        z=None,
        round=agent.round + 1,
    )


def run_distributed_round(
    agents: list[AgentState],
    topology: Topology,
    weights: WeightMatrix,
    fusion_y,
    u,
    schedule: StepSchedule,
    counter: DomainCounter | None = None,
) -> tuple[list[AgentState], RoundMessages]:
    """One synchronous round of the two-phase protocol.

    ``u`` is a list of per-agent inputs. Each agent reads only its own entry.
    """
    rnd = agents[0].round
    if any(a.round != rnd for a in agents):
        raise ProtocolError("agents disagree on the round counter")
    y_hat = np.asarray(fusion_y, dtype=float).ravel()
    msgs = RoundMessages(rnd, broadcast=Message(rnd, "y_hat", FUSION_CENTER, FUSION_CENTER, tuple(y_hat)))
    try:
        for a in agents:
            for j in topology.neighbors(a.index):
                msgs.phase_a.append(Message(rnd, "w", a.index, j, tuple(a.w)))
        inbox_w = _deliver(msgs.phase_a, len(agents))
        staged, outboxes = [], []
        for a in agents:
            a2, out = agent_phase_a(a, y_hat, u[a.index], inbox_w[a.index], counter)
            staged.append(a2)
            outboxes.append(out)
        for a, out in zip(staged, outboxes):
            for j, z in out.items():
                msgs.phase_b.append(Message(rnd, "z", a.index, j, tuple(z)))
        inbox_z = _deliver(msgs.phase_b, len(agents))
        updated = [agent_phase_b(a, u[a.index], schedule, inbox_z[a.index], rnd) for a in staged]
    except ProtocolError as exc:
        raise ProtocolError(f"round {rnd}: {exc}") from exc
    for a in updated:
        if not (np.all(np.isfinite(a.theta)) and np.all(np.isfinite(a.w))):
            raise NumericalError(f"round {rnd}: agent {a.index + 1} state became non-finite")
    return updated, msgs


def _deliver(messages: list[Message], n: int) -> list[dict]:
    inboxes: list[dict] = [{} for _ in range(n)]
    for m in messages:
        if m.sender in inboxes[m.receiver]:
            raise ProtocolError(f"duplicate {m.kind} message on link {m.sender + 1} -> {m.receiver + 1}")
        inboxes[m.receiver][m.sender] = np.asarray(m.payload)
    return inboxes


@dataclass
class RoundRecord:
    t: int
    eta: float
    f_t: float
    grad_norm: float
    bytes_phase_a: int
    bytes_phase_b: int
    sublevel_violation: bool


class OnlineIdentifier:
    """Drives the online update round after round and keeps telemetry.

    ``mode="distributed"`` runs the two-phase protocol; ``"centralized"``
    applies the stacked gradient step. Both produce the same iterates.
    """

    def __init__(self, problem: IdentProblem, topology: Topology, schedule: StepSchedule,
                 x0: StackedState | None = None, mode: str = "distributed", keep_messages: bool = True):
        from .identify import StepMonitor

        if mode not in ("distributed", "centralized"):
            raise ValueError(f"unknown identification mode {mode!r}")
        self.problem = problem
        self.topology = topology
        self.schedule = schedule
        self.mode = mode
        self.monitor = StepMonitor()
        self.keep_messages = keep_messages
        self.messages: list[RoundMessages] = []
        self.records: list[RoundRecord] = []
        x0 = StackedState.initial(problem) if x0 is None else x0
        self._x = x0
        self.agents = make_agents(problem, topology, x0) if mode == "distributed" else None

    @property
    def state(self) -> StackedState:
        return stack_agents(self.agents) if self.mode == "distributed" else self._x

    @property
    def theta(self) -> np.ndarray:
        return self.state.theta

    def update(self, u, y_hat) -> RoundRecord:
        from .identify import centralized_step, eval_f_t, grad_f_t

        problem = self.problem
        u_parts = problem.layout.split_u(u)
        x = self.state
        f_before = eval_f_t(x, u_parts, y_hat, problem)
        grad = grad_f_t(x, u_parts, y_hat, problem)
        eta = self.schedule.eta(x.t)
        if self.mode == "distributed":
            self.agents, msgs = run_distributed_round(
                self.agents, self.topology, problem.weights, y_hat, u_parts, self.schedule, self.monitor.domain
            )
            if self.keep_messages:
                self.messages.append(msgs)
            x_next = stack_agents(self.agents)
            bytes_a, bytes_b = msgs.bytes_phase_a, msgs.bytes_phase_b
        else:
            x_next = centralized_step(x, u_parts, y_hat, self.schedule, problem)
            self._x = x_next
            bytes_a = bytes_b = 0
        f_after = eval_f_t(x_next, u_parts, y_hat, problem)
        gnorm = float(np.linalg.norm(grad))
        violated = self.monitor.record(f_before, f_after, gnorm, self.schedule)
        rec = RoundRecord(x.t, eta, f_before, gnorm, bytes_a, bytes_b, violated)
        self.records.append(rec)
        return rec
