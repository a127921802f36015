"""Scenario files: TOML ingestion, schema validation and feeder fixtures.

Every table and key a scenario may contain is declared in ``SCHEMA``; any
other key is rejected with its dotted path. Bus and agent indices in files
are 1-based and converted to 0-based on load.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .control import LossSpec
from .graph import Topology
from .plant import Feeder, ProfileParams

MODES = ("identify", "control")
TOPOLOGY_KINDS = ("ring", "path", "complete", "edges")
WEIGHT_KINDS = ("laplacian", "column_stochastic")
FAMILIES = ("linear", "cpl")
EXCITATIONS = ("common", "independent")


class ConfigError(ValueError):
    """Scenario validation failure; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class TopologySpec:
    kind: str = "ring"
    n_agents: int = 4
    edges: tuple[tuple[int, int], ...] = ()
    weights: str = "laplacian"

    def build(self) -> Topology:
        if self.kind == "ring":
            return Topology.ring(self.n_agents)
        if self.kind == "path":
            return Topology.path(self.n_agents)
        if self.kind == "complete":
            return Topology.complete(self.n_agents)
        return Topology.from_edges(self.n_agents, self.edges)


@dataclass(frozen=True)
class ScheduleSpec:
    c1: float = 0.01
    alpha: float = 0.05
    T_con: int = 1
    reset_on_update: bool = True


@dataclass(frozen=True)
class IdentifySpec:
    d_y: int = 2
    truth: str = "linear"
    truth_scale: float = 1.0
    noise_sigma: float = 0.0
    excitation: str = "common"
    drift: float = 0.0
    drift_period: float = 200.0
    s_max: float = 1.0
    p_max: float = 1.0
    regret_at: tuple[int, ...] = ()


@dataclass(frozen=True)
class ControlSpec:
    feeder: str = "feeder10"
    control: bool = True
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class Scenario:
    mode: str
    seed: int = 0
    ticks: int = 1000
    out: str = ""
    name: str = "scenario"
    family: tuple[str, ...] = ("linear",)
    identifier: str = "distributed"
    topology: TopologySpec = field(default_factory=TopologySpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    identify: IdentifySpec = field(default_factory=IdentifySpec)
    control: ControlSpec = field(default_factory=ControlSpec)
    profiles: dict = field(default_factory=dict)

    def families(self, n_agents: int) -> tuple[str, ...]:
        if len(self.family) == 1:
            return self.family * n_agents
        return self.family

    def with_overrides(self, seed: int | None = None, ticks: int | None = None, out: str | None = None) -> "Scenario":
        """Copy with CLI overrides applied. A shorter ``ticks`` drops regret horizons past the new end."""
        ident = self.identify
        if ticks is not None:
            ident = replace(ident, regret_at=tuple(T for T in ident.regret_at if T <= int(ticks)))
        new = replace(
            self,
            identify=ident,
            seed=self.seed if seed is None else int(seed),
            ticks=self.ticks if ticks is None else int(ticks),
            out=self.out if out is None else str(out),
        )
        validate(new)
        return new


# table -> {key: expected python type(s)}
SCHEMA: dict[str, dict[str, tuple[type, ...]]] = {
    "": {"mode": (str,), "seed": (int,), "ticks": (int,), "out": (str,), "name": (str,)},
    "model": {"family": (str, list), "identifier": (str,)},
    "topology": {"kind": (str,), "n_agents": (int,), "edges": (list,), "weights": (str,)},
    "schedule": {"c1": (int, float), "alpha": (int, float), "T_con": (int,), "reset_on_update": (bool,)},
    "loss": {f.name: (int, float) for f in fields(LossSpec)},
    "identify": {
        "d_y": (int,), "truth": (str,), "truth_scale": (int, float), "noise_sigma": (int, float),
        "excitation": (str,), "drift": (int, float), "drift_period": (int, float),
        "s_max": (int, float), "p_max": (int, float), "regret_at": (list,),
    },
    "control": {"feeder": (str,), "control": (str, bool), "noise_sigma": (int, float)},
    "profiles": {f.name: (int, float) for f in fields(ProfileParams)},
}


def _typed(path: str, value, types: tuple[type, ...]):
    # TOML booleans are not numbers here
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(path, f"expected {'/'.join(t.__name__ for t in types)}, got bool")
    if not isinstance(value, types):
        raise ConfigError(path, f"expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")
    if isinstance(value, float) and not math.isfinite(value):
        raise ConfigError(path, "must be finite")
    return value


def _check_keys(raw: dict):
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in SCHEMA or key == "":
                raise ConfigError(key, "unknown table")
            for sub, subval in value.items():
                if sub not in SCHEMA[key]:
                    raise ConfigError(f"{key}.{sub}", "unknown key")
                _typed(f"{key}.{sub}", subval, SCHEMA[key][sub])
        else:
            if key not in SCHEMA[""]:
                raise ConfigError(key, "unknown key")
            _typed(key, value, SCHEMA[""][key])


def parse_scenario(raw: dict) -> Scenario:
    """Build a validated :class:`Scenario` from a parsed TOML tree."""
    _check_keys(raw)
    if "mode" not in raw:
        raise ConfigError("mode", "missing")
    model = raw.get("model", {})
    fam = model.get("family", "linear")
    fam = (fam,) if isinstance(fam, str) else tuple(fam)
    topo = dict(raw.get("topology", {}))
    if "edges" in topo:
        edges = []
        for k, e in enumerate(topo["edges"]):
            if not (isinstance(e, list) and len(e) == 2 and all(isinstance(v, int) and not isinstance(v, bool) for v in e)):
                raise ConfigError(f"topology.edges[{k + 1}]", "expected a pair of 1-based node indices")
            if min(e) < 1:
                raise ConfigError(f"topology.edges[{k + 1}]", "node indices are 1-based")
            edges.append((e[0] - 1, e[1] - 1))
        topo["edges"] = tuple(edges)
    ident = dict(raw.get("identify", {}))
    if "regret_at" in ident:
        ident["regret_at"] = tuple(ident["regret_at"])
    ctrl = dict(raw.get("control", {}))
    if "control" in ctrl:
        flag = ctrl["control"]
        if isinstance(flag, str):
            if flag not in ("on", "off"):
                raise ConfigError("control.control", "expected \"on\" or \"off\"")
            flag = flag == "on"
        ctrl["control"] = flag
    sched = {k: (float(v) if k in ("c1", "alpha") else v) for k, v in raw.get("schedule", {}).items()}
    scen = Scenario(
        mode=raw["mode"],
        seed=raw.get("seed", 0),
        ticks=raw.get("ticks", 1000),
        out=raw.get("out", ""),
        name=raw.get("name", "scenario"),
        family=fam,
        identifier=model.get("identifier", "distributed"),
        topology=TopologySpec(**topo),
        schedule=ScheduleSpec(**sched),
        loss=LossSpec(**{k: float(v) for k, v in raw.get("loss", {}).items()}),
        identify=IdentifySpec(**{k: (float(v) if isinstance(v, int) and SCHEMA["identify"][k] == (int, float) else v)
                                 for k, v in ident.items()}),
        control=ControlSpec(**ctrl),
        profiles={k: float(v) for k, v in raw.get("profiles", {}).items()},
    )
    validate(scen)
    return scen


def _choice(path: str, value, allowed):
    if value not in allowed:
        raise ConfigError(path, f"{value!r} is not one of {', '.join(allowed)}")


def validate(s: Scenario):
    """Cross-field checks; raises :class:`ConfigError` naming the field."""
    _choice("mode", s.mode, MODES)
    if s.seed < 0:
        raise ConfigError("seed", "must be non-negative")
    if s.ticks < 1:
        raise ConfigError("ticks", "must be at least 1")
    for k, f in enumerate(s.family):
        _choice(f"model.family[{k + 1}]" if len(s.family) > 1 else "model.family", f, FAMILIES)
    _choice("model.identifier", s.identifier, ("distributed", "centralized"))
    t = s.topology
    _choice("topology.kind", t.kind, TOPOLOGY_KINDS)
    _choice("topology.weights", t.weights, WEIGHT_KINDS)
    if t.n_agents < 2:
        raise ConfigError("topology.n_agents", "need at least 2 agents")
    if t.kind == "edges" and not t.edges:
        raise ConfigError("topology.edges", "required when kind = \"edges\"")
    if t.kind != "edges" and t.edges:
        raise ConfigError("topology.edges", "only allowed when kind = \"edges\"")
    if any(max(e) >= t.n_agents for e in t.edges):
        raise ConfigError("topology.edges", f"node index exceeds n_agents = {t.n_agents}")
    if len(s.family) not in (1, t.n_agents):
        raise ConfigError("model.family", f"give one family or one per agent ({t.n_agents})")
    sc = s.schedule
    if sc.c1 <= 0:
        raise ConfigError("schedule.c1", "must be positive")
    if sc.alpha < 0:
        raise ConfigError("schedule.alpha", "must be non-negative")
    if sc.T_con < 1:
        raise ConfigError("schedule.T_con", "must be at least 1")
    if s.mode == "identify":
        ident = s.identify
        if ident.d_y < 1:
            raise ConfigError("identify.d_y", "must be at least 1")
        _choice("identify.truth", ident.truth, FAMILIES)
        _choice("identify.excitation", ident.excitation, EXCITATIONS)
        if ident.s_max <= 0 or ident.p_max <= 0:
            raise ConfigError("identify.s_max" if ident.s_max <= 0 else "identify.p_max", "must be positive")
        if ident.noise_sigma < 0 or ident.drift < 0 or ident.truth_scale <= 0:
            raise ConfigError("identify", "noise_sigma and drift must be non-negative, truth_scale positive")
        if ident.drift_period <= 0:
            raise ConfigError("identify.drift_period", "must be positive")
        for T in ident.regret_at:
            if not isinstance(T, int) or isinstance(T, bool) or not 1 <= T <= s.ticks:
                raise ConfigError("identify.regret_at", f"entries must be integers in [1, ticks], got {T!r}")
        if "cpl" in s.family or ident.truth == "cpl":
            raise ConfigError("model.family", "identification scenarios support the linear family only")
    else:
        if s.control.noise_sigma < 0:
            raise ConfigError("control.noise_sigma", "must be non-negative")


def load_scenario(path) -> Scenario:
    """Read and validate a scenario file. Relative feeder paths resolve against the file."""
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"invalid TOML: {exc}") from exc
    scen = parse_scenario(raw)
    feeder = scen.control.feeder
    if scen.mode == "control" and feeder.endswith(".toml") and not Path(feeder).is_absolute():
        scen = replace(scen, control=replace(scen.control, feeder=str(path.parent / feeder)))
    return scen


# --- feeder fixtures --------------------------------------------------------


@dataclass(frozen=True)
class FeederFixture:
    feeder: Feeder
    profiles: ProfileParams


FEEDER_KEYS = {
    "name", "parent", "r", "x", "pes_buses", "sensor_buses",
    "base_load_p", "base_load_q", "pes_rating", "pes_peak",
}


def parse_feeder(raw: dict) -> FeederFixture:
    """Feeder file layout: a ``[feeder]`` table (1-based buses, parent 0 marks
    the slack) and an optional ``[profiles]`` table of profile defaults."""
    for key in raw:
        if key not in ("feeder", "profiles"):
            raise ConfigError(key, "unknown table in feeder file")
    fd = dict(raw.get("feeder", {}))
    for key in fd:
        if key not in FEEDER_KEYS:
            raise ConfigError(f"feeder.{key}", "unknown key")
    for key in ("parent", "r", "x", "pes_buses", "sensor_buses"):
        if key not in fd:
            raise ConfigError(f"feeder.{key}", "missing")
    parent = [int(p) - 1 for p in fd["parent"]]
    for key in ("pes_buses", "sensor_buses"):
        if any(int(b) < 1 for b in fd[key]):
            raise ConfigError(f"feeder.{key}", "bus indices are 1-based")
        fd[key] = tuple(int(b) - 1 for b in fd[key])
    fd["parent"] = tuple(parent)
    for key in ("r", "x", "base_load_p", "base_load_q", "pes_rating", "pes_peak"):
        if key in fd:
            fd[key] = tuple(float(v) for v in fd[key])
    try:
        feeder = Feeder(**fd)
    except ValueError as exc:
        raise ConfigError("feeder", str(exc)) from exc
    prof = raw.get("profiles", {})
    for key, value in prof.items():
        if key not in SCHEMA["profiles"]:
            raise ConfigError(f"profiles.{key}", "unknown key")
        _typed(f"profiles.{key}", value, SCHEMA["profiles"][key])
    return FeederFixture(feeder, ProfileParams(**{k: float(v) for k, v in prof.items()}))


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("netid") / "data" / name))


def load_feeder(name_or_path: str) -> FeederFixture:
    """Load a bundled fixture by name (e.g. ``feeder10``) or a feeder TOML by path."""
    path = Path(name_or_path)
    if not name_or_path.endswith(".toml"):
        path = bundled_path(f"{name_or_path}.toml")
    if not path.is_file():
        raise ConfigError("control.feeder", f"no feeder fixture at {path}")
    with open(path, "rb") as fh:
        return parse_feeder(tomllib.load(fh))
