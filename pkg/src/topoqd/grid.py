"""Bus/branch grid model with node-breaker detail for switchable substations.

The exchange format is a single JSON document::

    {
      "base_mva": 100,                       # optional
      "slack": "1",
      "nodes": [{"id": "1", "substation": "S1", "shunt_mvar": 0.0}],
      "branches": [{"id": "L1", "from": "1", "to": "2", "x_pu": 0.1,
                    "limit_mw": 100, "r_pu": 0.0, "b_pu": 0.0, "tap": 1.0,
                    "in_service": true}],
      "injections": [{"id": "G1", "node": "1", "p_mw": 50, "q_mvar": 0,
                      "kind": "generator", "v_setpoint_pu": 1.0}],
      "contingencies": [{"id": "c1", "branches": ["L1"], "injections": []}],
      "busbar_outages": [{"id": "bb1", "substation": "2", "busbar": "2A"}],
      "substations": [{"node": "2", "busbars": ["2A", "2B"],
                       "couplers": [["2A", "2B"]],
                       "terminals": [{"element": "L1", "reachable": ["2A", "2B"],
                                      "default": "2A"}]}]
    }

``p_mw``/``q_mvar`` are signed nodal injections (generation positive, a load
of 30 MW is ``p_mw = -30``). ``r_pu``, ``b_pu``, ``tap``, ``shunt_mvar`` and
``in_service`` are optional and only matter for AC power flow.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Literal

import numpy as np

from topoqd.errors import IslandedContingency, ParseError, ValidationError
from topoqd.graph import is_connected

InjectionKind = Literal["generator", "load"]


@dataclass(frozen=True)
class Node:
    id: str
    substation: str | None = None
    shunt_mvar: float = 0.0


@dataclass(frozen=True)
class Branch:
    id: str
    from_node: str
    to_node: str
    reactance: float
    flow_limit: float
    in_service: bool = True
    resistance: float = 0.0
    charging: float = 0.0
    tap: float = 1.0


@dataclass(frozen=True)
class Injection:
    id: str
    node: str
    active_power: float
    reactive_power: float
    kind: InjectionKind
    voltage_setpoint: float | None = None


@dataclass(frozen=True)
class ContingencyCase:
    id: str
    removed_branches: tuple[str, ...]
    removed_injections: tuple[str, ...] = ()


@dataclass(frozen=True)
class BusbarOutage:
    id: str
    substation: str
    busbar: str
    # Branches lost in the default station configuration.
    implied_branches: tuple[str, ...] = ()


@dataclass(frozen=True)
class Terminal:
    element: str
    reachable: frozenset[str]
    default: str


@dataclass(frozen=True)
class SubstationDetail:
    node: str
    busbars: tuple[str, ...]
    couplers: tuple[tuple[str, str], ...]
    terminals: tuple[Terminal, ...]

    @property
    def default_assignment(self) -> dict[str, str]:
        return {t.element: t.default for t in self.terminals}


def busbar_implied_branches(
    station: SubstationDetail,
    busbar: str,
    assignment: dict[str, str],
    branch_ids: set[str] | frozenset[str],
) -> tuple[str, ...]:
    """Branches whose station terminal sits on ``busbar`` under ``assignment``."""
    return tuple(
        t.element
        for t in station.terminals
        if t.element in branch_ids and assignment.get(t.element, t.default) == busbar
    )


@dataclass(frozen=True)
class GridModel:
    nodes: tuple[Node, ...]
    branches: tuple[Branch, ...]
    injections: tuple[Injection, ...]
    outages: tuple[ContingencyCase, ...]
    busbar_outages: tuple[BusbarOutage, ...]
    substations: tuple[SubstationDetail, ...]
    slack_node: str
    base_mva: float = 100.0

    # -- derived indices --------------------------------------------------
    @cached_property
    def node_index(self) -> dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    @cached_property
    def branch_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.branches)}

    @cached_property
    def injection_index(self) -> dict[str, int]:
        return {g.id: i for i, g in enumerate(self.injections)}

    @cached_property
    def outage_index(self) -> dict[str, int]:
        return {o.id: i for i, o in enumerate(self.outages)}

    @cached_property
    def substation_by_node(self) -> dict[str, SubstationDetail]:
        return {s.node: s for s in self.substations}

    @cached_property
    def adjacency(self) -> dict[str, tuple[str, ...]]:
        """Node id -> ids of in-service branches incident to it."""
        adj: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for b in self.branches:
            if b.in_service:
                adj[b.from_node].append(b.id)
                adj[b.to_node].append(b.id)
        return {k: tuple(v) for k, v in adj.items()}

    @cached_property
    def injections_at(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for g in self.injections:
            out[g.node].append(g.id)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def branch_ends(self) -> tuple[np.ndarray, np.ndarray]:
        """(from, to) node positions of every branch."""
        idx = self.node_index
        src = np.array([idx[b.from_node] for b in self.branches], dtype=np.int64)
        dst = np.array([idx[b.to_node] for b in self.branches], dtype=np.int64)
        return src, dst

    @cached_property
    def in_service_mask(self) -> np.ndarray:
        return np.array([b.in_service for b in self.branches], dtype=bool)

    @cached_property
    def limits(self) -> np.ndarray:
        return np.array([b.flow_limit for b in self.branches], dtype=float)

    @cached_property
    def susceptances(self) -> np.ndarray:
        return np.array([1.0 / b.reactance for b in self.branches], dtype=float)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.branches)

    @property
    def slack_index(self) -> int:
        return self.node_index[self.slack_node]

    @property
    def switchable_nodes(self) -> tuple[str, ...]:
        return tuple(s.node for s in self.substations)

    def busbar_outage_branches(
        self, outage: BusbarOutage, assignment: dict[str, str] | None = None
    ) -> tuple[str, ...]:
        station = self.substation_by_node[outage.substation]
        ids = {b.id for b in self.branches if b.in_service}
        return busbar_implied_branches(station, outage.busbar, assignment or {}, ids)

    def to_dict(self) -> dict[str, Any]:
        return {
            "base_mva": self.base_mva,
            "slack": self.slack_node,
            "nodes": [
                _drop_defaults({"id": n.id, "substation": n.substation, "shunt_mvar": n.shunt_mvar},
                               {"substation": None, "shunt_mvar": 0.0})
                for n in self.nodes
            ],
            "branches": [
                _drop_defaults(
                    {
                        "id": b.id, "from": b.from_node, "to": b.to_node,
                        "x_pu": b.reactance, "limit_mw": b.flow_limit,
                        "r_pu": b.resistance, "b_pu": b.charging, "tap": b.tap,
                        "in_service": b.in_service,
                    },
                    {"r_pu": 0.0, "b_pu": 0.0, "tap": 1.0, "in_service": True},
                )
                for b in self.branches
            ],
            "injections": [
                _drop_defaults(
                    {
                        "id": g.id, "node": g.node, "p_mw": g.active_power,
                        "q_mvar": g.reactive_power, "kind": g.kind,
                        "v_setpoint_pu": g.voltage_setpoint,
                    },
                    {"v_setpoint_pu": None},
                )
                for g in self.injections
            ],
            "contingencies": [
                {"id": o.id, "branches": list(o.removed_branches),
                 "injections": list(o.removed_injections)}
                for o in self.outages
            ],
            "busbar_outages": [
                {"id": b.id, "substation": b.substation, "busbar": b.busbar}
                for b in self.busbar_outages
            ],
            "substations": [
                {
                    "node": s.node,
                    "busbars": list(s.busbars),
                    "couplers": [list(c) for c in s.couplers],
                    "terminals": [
                        {"element": t.element, "reachable": sorted(t.reachable),
                         "default": t.default}
                        for t in s.terminals
                    ],
                }
                for s in self.substations
            ],
        }


def _drop_defaults(d: dict[str, Any], defaults: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in d.items() if not (k in defaults and v == defaults[k])}


# -- parsing -------------------------------------------------------------------

def _req(obj: dict, key: str, where: str) -> Any:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: expected an object, got {type(obj).__name__}")
    if key not in obj:
        raise ParseError(f"{where}: missing field '{key}'")
    return obj[key]


def _num(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{where}: expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ValidationError(f"{where}: non-finite value {value}")
    return value


def _id(value: Any, where: str) -> str:
    if not isinstance(value, str):
        raise ParseError(f"{where}: ids must be strings, got {value!r}")
    return value


def _list(obj: dict, key: str, where: str, required: bool = True) -> list:
    if key not in obj:
        if required:
            raise ParseError(f"{where}: missing field '{key}'")
        return []
    value = obj[key]
    if not isinstance(value, list):
        raise ParseError(f"{where}.{key}: expected a list")
    return value


def grid_from_dict(doc: dict[str, Any]) -> GridModel:
    """Build and validate a GridModel from the parsed JSON document."""
    if not isinstance(doc, dict):
        raise ParseError("grid document must be a JSON object")

    nodes = tuple(
        Node(
            id=_id(_req(n, "id", f"nodes[{i}]"), f"nodes[{i}].id"),
            substation=n.get("substation"),
            shunt_mvar=_num(n.get("shunt_mvar", 0.0), f"nodes[{i}].shunt_mvar"),
        )
        for i, n in enumerate(_list(doc, "nodes", "grid"))
    )
    branches = []
    for i, b in enumerate(_list(doc, "branches", "grid")):
        w = f"branches[{i}]"
        branches.append(
            Branch(
                id=_id(_req(b, "id", w), f"{w}.id"),
                from_node=_id(_req(b, "from", w), f"{w}.from"),
                to_node=_id(_req(b, "to", w), f"{w}.to"),
                reactance=_num(_req(b, "x_pu", w), f"{w}.x_pu"),
                flow_limit=_num(_req(b, "limit_mw", w), f"{w}.limit_mw"),
                in_service=bool(b.get("in_service", True)),
                resistance=_num(b.get("r_pu", 0.0), f"{w}.r_pu"),
                charging=_num(b.get("b_pu", 0.0), f"{w}.b_pu"),
                tap=_num(b.get("tap", 1.0), f"{w}.tap"),
            )
        )
    injections = []
    for i, g in enumerate(_list(doc, "injections", "grid", required=False)):
        w = f"injections[{i}]"
        vset = g.get("v_setpoint_pu")
        injections.append(
            Injection(
                id=_id(_req(g, "id", w), f"{w}.id"),
                node=_id(_req(g, "node", w), f"{w}.node"),
                active_power=_num(_req(g, "p_mw", w), f"{w}.p_mw"),
                reactive_power=_num(g.get("q_mvar", 0.0), f"{w}.q_mvar"),
                kind=_req(g, "kind", w),
                voltage_setpoint=None if vset is None else _num(vset, f"{w}.v_setpoint_pu"),
            )
        )
    outages = tuple(
        ContingencyCase(
            id=_id(_req(o, "id", f"contingencies[{i}]"), f"contingencies[{i}].id"),
            removed_branches=tuple(_list(o, "branches", f"contingencies[{i}]", required=False)),
            removed_injections=tuple(_list(o, "injections", f"contingencies[{i}]", required=False)),
        )
        for i, o in enumerate(_list(doc, "contingencies", "grid", required=False))
    )
    substations = []
    for i, s in enumerate(_list(doc, "substations", "grid", required=False)):
        w = f"substations[{i}]"
        terminals = []
        for j, t in enumerate(_list(s, "terminals", w)):
            tw = f"{w}.terminals[{j}]"
            terminals.append(
                Terminal(
                    element=_id(_req(t, "element", tw), f"{tw}.element"),
                    reachable=frozenset(_list(t, "reachable", tw)),
                    default=_id(_req(t, "default", tw), f"{tw}.default"),
                )
            )
        couplers = []
        for c in _list(s, "couplers", w, required=False):
            if not isinstance(c, list) or len(c) != 2:
                raise ParseError(f"{w}.couplers: each coupler must be a [busbar, busbar] pair")
            couplers.append((str(c[0]), str(c[1])))
        substations.append(
            SubstationDetail(
                node=_id(_req(s, "node", w), f"{w}.node"),
                busbars=tuple(_list(s, "busbars", w)),
                couplers=tuple(couplers),
                terminals=tuple(terminals),
            )
        )
    slack = _id(_req(doc, "slack", "grid"), "grid.slack")
    raw_bb = _list(doc, "busbar_outages", "grid", required=False)

    partial = GridModel(
        nodes=nodes,
        branches=tuple(branches),
        injections=tuple(injections),
        outages=outages,
        busbar_outages=(),
        substations=tuple(substations),
        slack_node=slack,
        base_mva=_num(doc.get("base_mva", 100.0), "grid.base_mva"),
    )
    _validate_core(partial)

    busbar_outages = []
    label_to_node = {n.substation: n.id for n in nodes if n.substation is not None}
    for i, b in enumerate(raw_bb):
        w = f"busbar_outages[{i}]"
        sub = _id(_req(b, "substation", w), f"{w}.substation")
        busbar = _id(_req(b, "busbar", w), f"{w}.busbar")
        node = sub if sub in partial.substation_by_node else label_to_node.get(sub)
        if node is None or node not in partial.substation_by_node:
            raise ValidationError(f"{w}: unknown substation '{sub}'")
        if busbar not in partial.substation_by_node[node].busbars:
            raise ValidationError(f"{w}: substation '{sub}' has no busbar '{busbar}'")
        outage = BusbarOutage(id=_id(_req(b, "id", w), f"{w}.id"), substation=node, busbar=busbar)
        busbar_outages.append(
            BusbarOutage(outage.id, node, busbar, partial.busbar_outage_branches(outage))
        )
    _unique([b.id for b in busbar_outages], "busbar outage")

    grid = GridModel(
        nodes=partial.nodes,
        branches=partial.branches,
        injections=partial.injections,
        outages=partial.outages,
        busbar_outages=tuple(busbar_outages),
        substations=partial.substations,
        slack_node=partial.slack_node,
        base_mva=partial.base_mva,
    )
    _validate_contingencies(grid)
    return grid


def _unique(ids: list[str], what: str) -> None:
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            raise ValidationError(f"duplicate {what} id '{i}'")
        seen.add(i)


def _validate_core(grid: GridModel) -> None:
    _unique([n.id for n in grid.nodes], "node")
    _unique([b.id for b in grid.branches], "branch")
    _unique([g.id for g in grid.injections], "injection")
    _unique([o.id for o in grid.outages], "contingency")
    element_ids = {b.id for b in grid.branches}
    overlap = element_ids & {g.id for g in grid.injections}
    if overlap:
        raise ValidationError(f"ids shared between branches and injections: {sorted(overlap)}")
    nodes = grid.node_index
    if grid.base_mva <= 0:
        raise ValidationError("base_mva must be positive")
    if grid.slack_node not in nodes:
        raise ValidationError(f"slack node '{grid.slack_node}' does not exist")

    for b in grid.branches:
        if b.from_node not in nodes or b.to_node not in nodes:
            raise ValidationError(f"branch '{b.id}' references an unknown node")
        if b.from_node == b.to_node:
            raise ValidationError(f"branch '{b.id}' connects node '{b.from_node}' to itself")
        if b.reactance <= 0:
            raise ValidationError(f"branch '{b.id}': reactance must be > 0, got {b.reactance}")
        if b.flow_limit <= 0:
            raise ValidationError(f"branch '{b.id}': flow limit must be > 0, got {b.flow_limit}")
        if b.tap <= 0:
            raise ValidationError(f"branch '{b.id}': tap ratio must be > 0")

    for g in grid.injections:
        if g.node not in nodes:
            raise ValidationError(f"injection '{g.id}' references unknown node '{g.node}'")
        if g.kind not in ("generator", "load"):
            raise ValidationError(f"injection '{g.id}': kind must be generator or load")
        if g.kind == "load" and g.voltage_setpoint is not None:
            raise ValidationError(f"injection '{g.id}': loads carry no voltage setpoint")
        if g.voltage_setpoint is not None and g.voltage_setpoint <= 0:
            raise ValidationError(f"injection '{g.id}': voltage setpoint must be > 0")

    src, dst = grid.branch_ends
    if not is_connected(grid.n_nodes, src, dst, grid.in_service_mask):
        raise ValidationError("base-case graph is not connected")

    seen_nodes: set[str] = set()
    for s in grid.substations:
        _validate_station(grid, s)
        if s.node in seen_nodes:
            raise ValidationError(f"node '{s.node}' has more than one substation detail")
        seen_nodes.add(s.node)

    inj_ids = {g.id for g in grid.injections}
    for o in grid.outages:
        if not o.removed_branches and not o.removed_injections:
            raise ValidationError(f"contingency '{o.id}' removes nothing")
        for e in o.removed_branches:
            if e not in element_ids:
                raise ValidationError(f"contingency '{o.id}' references unknown branch '{e}'")
        for g in o.removed_injections:
            if g not in inj_ids:
                raise ValidationError(f"contingency '{o.id}' references unknown injection '{g}'")


def _validate_station(grid: GridModel, s: SubstationDetail) -> None:
    w = f"substation '{s.node}'"
    if s.node not in grid.node_index:
        raise ValidationError(f"{w}: unknown node")
    if not s.busbars:
        raise ValidationError(f"{w}: no busbars")
    if len(set(s.busbars)) != len(s.busbars):
        raise ValidationError(f"{w}: duplicate busbar ids")
    bars = set(s.busbars)
    for a, b in s.couplers:
        if a not in bars or b not in bars or a == b:
            raise ValidationError(f"{w}: coupler ({a}, {b}) must join two distinct busbars")
    # coupler graph connected in the default (all closed) state
    pos = {b: i for i, b in enumerate(s.busbars)}
    csrc = np.array([pos[a] for a, _ in s.couplers], dtype=np.int64)
    cdst = np.array([pos[b] for _, b in s.couplers], dtype=np.int64)
    if not is_connected(len(s.busbars), csrc, cdst):
        raise ValidationError(f"{w}: coupler graph is not connected")
    for t in s.terminals:
        if not t.reachable <= bars:
            raise ValidationError(f"{w}: terminal '{t.element}' reaches an unknown busbar")
        if t.default not in t.reachable:
            raise ValidationError(f"{w}: terminal '{t.element}' default busbar is not reachable")
    elements = [t.element for t in s.terminals]
    if len(set(elements)) != len(elements):
        raise ValidationError(f"{w}: duplicate terminal elements")
    expected = set(grid.adjacency[s.node]) | set(grid.injections_at[s.node])
    if set(elements) != expected:
        missing = sorted(expected - set(elements))
        extra = sorted(set(elements) - expected)
        raise ValidationError(f"{w}: terminals must cover exactly the station's elements "
                              f"(missing {missing}, extra {extra})")


def _validate_contingencies(grid: GridModel) -> None:
    src, dst = grid.branch_ends
    bidx = grid.branch_index
    for o in grid.outages:
        active = grid.in_service_mask.copy()
        active[[bidx[e] for e in o.removed_branches]] = False
        if not is_connected(grid.n_nodes, src, dst, active):
            raise IslandedContingency(f"contingency '{o.id}' disconnects the base-case graph")


def load_grid(path: str | Path) -> GridModel:
    """Read, parse and validate a grid file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not UTF-8 ({exc})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON ({exc})") from exc
    return grid_from_dict(doc)


def save_grid(grid: GridModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(grid.to_dict(), indent=2), encoding="utf-8")


def base_power_vector(grid: GridModel) -> np.ndarray:
    """Net nodal active injection in MW; the slack absorbs the residual."""
    p = np.zeros(grid.n_nodes)
    idx = grid.node_index
    for g in grid.injections:
        p[idx[g.node]] += g.active_power
    p[grid.slack_index] -= p.sum()
    return p
