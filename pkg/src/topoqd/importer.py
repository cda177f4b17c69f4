"""Action-space construction and base PTDF.

Turns a :class:`GridModel` into the optimisation inputs: the disconnectable
branches, the station-local split actions with their reassignment distance,
and the PTDF of the pre-optimisation topology.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from pathlib import Path

import numpy as np

from topoqd.errors import ParseError, SingularSystem
from topoqd.graph import bridge_mask, is_connected
from topoqd.grid import GridModel, SubstationDetail

log = logging.getLogger(__name__)

DEFAULT_CAP = 2**23
_INFEASIBLE = 1 << 20
_MASK_CHUNK = 1 << 15


@dataclass(frozen=True)
class Action:
    id: int
    substation: str
    # group (0/1) of every station terminal, in station terminal order
    partition: tuple[int, ...]
    busbar_assignment: tuple[tuple[str, str], ...]
    open_couplers: tuple[int, ...]
    reassignment_distance: int

    def group1_elements(self, station: SubstationDetail) -> frozenset[str]:
        return frozenset(t.element for t, g in zip(station.terminals, self.partition) if g)

    @property
    def assignment(self) -> dict[str, str]:
        return dict(self.busbar_assignment)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "substation": self.substation,
            "partition": list(self.partition),
            "busbar_assignment": [list(p) for p in self.busbar_assignment],
            "open_couplers": list(self.open_couplers),
            "reassignment_distance": self.reassignment_distance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Action:
        return cls(
            id=int(d["id"]),
            substation=d["substation"],
            partition=tuple(d["partition"]),
            busbar_assignment=tuple((a, b) for a, b in d["busbar_assignment"]),
            open_couplers=tuple(d["open_couplers"]),
            reassignment_distance=int(d["reassignment_distance"]),
        )


@dataclass(frozen=True)
class ActionSet:
    actions: tuple[Action, ...]
    disconnectables: tuple[str, ...]
    ranges: dict[str, tuple[int, int]] = field(default_factory=dict)

    @cached_property
    def substations(self) -> tuple[str, ...]:
        return tuple(self.ranges)

    @cached_property
    def substation_of(self) -> np.ndarray:
        """Station position (into ``substations``) of every action."""
        pos = {s: i for i, s in enumerate(self.substations)}
        return np.array([pos[a.substation] for a in self.actions], dtype=np.int64)

    @cached_property
    def reassignment(self) -> np.ndarray:
        return np.array([a.reassignment_distance for a in self.actions], dtype=np.int64)

    def same_station(self, action_id: int) -> range:
        """s(a): all action ids acting on the station of ``action_id``."""
        return range(*self.ranges[self.actions[action_id].substation])

    def to_dict(self) -> dict:
        return {
            "actions": [a.to_dict() for a in self.actions],
            "disconnectables": list(self.disconnectables),
            "ranges": {k: list(v) for k, v in self.ranges.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> ActionSet:
        return cls(
            actions=tuple(Action.from_dict(a) for a in d["actions"]),
            disconnectables=tuple(d["disconnectables"]),
            ranges={k: (int(v[0]), int(v[1])) for k, v in d["ranges"].items()},
        )


@dataclass(frozen=True)
class PTDFMatrix:
    matrix: np.ndarray  # (N_e, N_n), MW per MW, slack column zero
    branch_ids: tuple[str, ...]
    node_ids: tuple[str, ...]
    slack: str

    def flows(self, p: np.ndarray) -> np.ndarray:
        return self.matrix @ p


# -- bridges / disconnectables ------------------------------------------------

def enumerate_disconnectables(grid: GridModel) -> tuple[str, ...]:
    """Branches that can be opened without islanding in N-0 or any listed contingency."""
    src, dst = grid.branch_ends
    base = grid.in_service_mask
    excluded = bridge_mask(grid.n_nodes, src, dst, base)
    bidx = grid.branch_index
    for o in grid.outages:
        active = base.copy()
        active[[bidx[e] for e in o.removed_branches]] = False
        excluded |= bridge_mask(grid.n_nodes, src, dst, active)
    return tuple(b.id for b, bad in zip(grid.branches, excluded) if b.in_service and not bad)


# -- station actions ------------------------------------------------------------

def _connected_subset(members: Sequence[int], couplers: np.ndarray) -> bool:
    members = list(members)
    if len(members) <= 1:
        return True
    inside = set(members)
    adj: dict[int, list[int]] = {m: [] for m in members}
    for a, b in couplers:
        if a in inside and b in inside:
            adj[a].append(b)
            adj[b].append(a)
    seen = {members[0]}
    stack = [members[0]]
    while stack:
        for n in adj[stack.pop()]:
            if n not in seen:
                seen.add(n)
                stack.append(n)
    return len(seen) == len(members)


def busbar_cuts(station: SubstationDetail) -> list[tuple[int, ...]]:
    """Ordered busbar bipartitions (side per busbar) with both sides coupler-connected."""
    pos = {b: i for i, b in enumerate(station.busbars)}
    couplers = np.array([(pos[a], pos[b]) for a, b in station.couplers], dtype=np.int64).reshape(-1, 2)
    n = len(station.busbars)
    cuts = []
    for sides in product((0, 1), repeat=n):
        if 0 not in sides or 1 not in sides:
            continue
        s0 = [i for i in range(n) if sides[i] == 0]
        s1 = [i for i in range(n) if sides[i] == 1]
        if _connected_subset(s0, couplers) and _connected_subset(s1, couplers):
            cuts.append(sides)
    return cuts


def _terminal_costs(station: SubstationDetail, cuts: list[tuple[int, ...]]):
    """Per cut and terminal: cost/busbar choice for group 0 and group 1."""
    n_t = len(station.terminals)
    cost = np.full((2, len(cuts), n_t), _INFEASIBLE, dtype=np.int64)
    choice = np.full((2, len(cuts), n_t), -1, dtype=np.int64)
    pos = {b: i for i, b in enumerate(station.busbars)}
    for c, sides in enumerate(cuts):
        for t, term in enumerate(station.terminals):
            d = pos[term.default]
            reach = sorted(pos[b] for b in term.reachable)
            for g in (0, 1):
                if sides[d] == g:
                    cost[g, c, t], choice[g, c, t] = 0, d
                else:
                    cands = [r for r in reach if sides[r] == g]
                    if cands:
                        cost[g, c, t], choice[g, c, t] = 1, cands[0]
    return cost, choice


def enumerate_station_actions(
    station: SubstationDetail,
    cap: int = DEFAULT_CAP,
    seed: int = 0,
) -> list[Action]:
    """All electrically distinct two-node splits of one station that can be realised.

    Stage one enumerates terminal bipartitions with the first terminal pinned to
    group 0 (down-sampled to ``cap`` when larger). Stage two searches every
    coupler-connected busbar bipartition for a terminal assignment and keeps
    the realisation with the fewest reassignments; bipartitions without any
    realisation are dropped. Returned ids are local (0..n-1).
    """
    n_t = len(station.terminals)
    if len(station.busbars) < 2 or n_t < 2:
        return []
    cuts = busbar_cuts(station)
    if not cuts:
        return []
    n_masks = (1 << (n_t - 1)) - 1
    if n_masks > cap:
        log.info("station %s: %d bipartitions, sampling %d", station.node, n_masks, cap)
        masks = np.array(sorted(random.Random(seed).sample(range(1, n_masks + 1), cap)), dtype=np.int64)
    else:
        masks = np.arange(1, n_masks + 1, dtype=np.int64)

    cost, choice = _terminal_costs(station, cuts)
    base = cost[0].sum(axis=1)  # (cuts,)
    delta = (cost[1] - cost[0]).T  # (terminals, cuts)
    shifts = np.arange(n_t - 1, dtype=np.int64)
    pos_coupler = [
        (station.busbars.index(a), station.busbars.index(b)) for a, b in station.couplers
    ]

    actions: list[Action] = []
    seen: set[frozenset[str]] = set()
    for start in range(0, len(masks), _MASK_CHUNK):
        chunk = masks[start:start + _MASK_CHUNK]
        bits = np.zeros((len(chunk), n_t), dtype=np.int64)
        bits[:, 1:] = (chunk[:, None] >> shifts) & 1
        total = bits @ delta + base  # (masks, cuts)
        best = np.argmin(total, axis=1)
        best_cost = total[np.arange(len(chunk)), best]
        for k in np.flatnonzero(best_cost < _INFEASIBLE):
            part = tuple(int(x) for x in bits[k])
            key = frozenset(t.element for t, g in zip(station.terminals, part) if g)
            if key in seen:
                continue
            seen.add(key)
            c = int(best[k])
            sides = cuts[c]
            assignment = tuple(
                (term.element, station.busbars[int(choice[g, c, t])])
                for t, (term, g) in enumerate(zip(station.terminals, part))
            )
            open_couplers = tuple(
                i for i, (a, b) in enumerate(pos_coupler) if sides[a] != sides[b]
            )
            actions.append(
                Action(
                    id=len(actions),
                    substation=station.node,
                    partition=part,
                    busbar_assignment=assignment,
                    open_couplers=open_couplers,
                    reassignment_distance=int(best_cost[k]),
                )
            )
    return actions


def split_graph(
    grid: GridModel, splits: dict[str, frozenset[str]]
) -> tuple[int, np.ndarray, np.ndarray]:
    """Branch endpoints after applying station splits.

    ``splits`` maps station node -> group-1 element ids; each split station
    gets a new node appended after the original ones.
    """
    src, dst = (a.copy() for a in grid.branch_ends)
    n = grid.n_nodes
    bidx = grid.branch_index
    for node, group1 in splits.items():
        ni = grid.node_index[node]
        for e in group1:
            k = bidx.get(e)
            if k is None:
                continue
            if src[k] == ni:
                src[k] = n
            elif dst[k] == ni:
                dst[k] = n
        n += 1
    return n, src, dst


def _islands(n: int, src: np.ndarray, dst: np.ndarray, grid: GridModel) -> bool:
    base = grid.in_service_mask
    if not is_connected(n, src, dst, base):
        return True
    bridges = bridge_mask(n, src, dst, base)
    bidx = grid.branch_index
    for o in grid.outages:
        ks = [bidx[e] for e in o.removed_branches if grid.branches[bidx[e]].in_service]
        if len(ks) == 1:
            if bridges[ks[0]]:
                return True
        elif ks:
            active = base.copy()
            active[ks] = False
            if not is_connected(n, src, dst, active):
                return True
    return False


def validate_action_islanding(grid: GridModel, action: Action) -> bool:
    """True (accept) if the split keeps the grid connected in N-0 and every contingency."""
    station = grid.substation_by_node[action.substation]
    n, src, dst = split_graph(grid, {action.substation: action.group1_elements(station)})
    return not _islands(n, src, dst, grid)


# -- PTDF -------------------------------------------------------------------------

def build_ptdf(grid: GridModel) -> PTDFMatrix:
    """Dense DC PTDF of the base topology (MW/MW, slack column zero)."""
    n, e = grid.n_nodes, grid.n_edges
    src, dst = grid.branch_ends
    active = grid.in_service_mask
    if not is_connected(n, src, dst, active):
        raise SingularSystem("grid is disconnected; susceptance matrix is singular")
    b = np.where(active, grid.susceptances, 0.0)
    inc = np.zeros((e, n))
    inc[np.arange(e), src] = 1.0
    inc[np.arange(e), dst] = -1.0
    keep = np.array([i for i in range(n) if i != grid.slack_index], dtype=np.int64)
    a_red = inc[:, keep]
    bbus = a_red.T @ (b[:, None] * a_red)
    try:
        x = np.linalg.inv(bbus)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    ptdf = np.zeros((e, n))
    ptdf[:, keep] = (b[:, None] * a_red) @ x
    return PTDFMatrix(
        matrix=ptdf,
        branch_ids=tuple(br.id for br in grid.branches),
        node_ids=tuple(nd.id for nd in grid.nodes),
        slack=grid.slack_node,
    )


# -- full import --------------------------------------------------------------------

@dataclass(frozen=True)
class ImportResult:
    action_set: ActionSet
    ptdf: PTDFMatrix
    grid_hash: str


def grid_hash(grid: GridModel, cap: int = DEFAULT_CAP, seed: int = 0) -> str:
    doc = json.dumps({"grid": grid.to_dict(), "cap": cap, "seed": seed}, sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()


def _station_actions(grid: GridModel, station: SubstationDetail, cap: int, seed: int) -> list[Action]:
    raw = enumerate_station_actions(station, cap=cap, seed=seed)
    return [a for a in raw if validate_action_islanding(grid, a)]


def build_action_set(
    grid: GridModel, cap: int = DEFAULT_CAP, seed: int = 0, max_workers: int = 1
) -> ActionSet:
    stations = sorted(grid.substations, key=lambda s: s.node)
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            per_station = list(pool.map(lambda s: _station_actions(grid, s, cap, seed), stations))
    else:
        per_station = [_station_actions(grid, s, cap, seed) for s in stations]
    actions: list[Action] = []
    ranges: dict[str, tuple[int, int]] = {}
    for station, found in zip(stations, per_station):
        if not found:
            log.info("station %s has no valid split", station.node)
            continue
        start = len(actions)
        for a in found:
            actions.append(
                Action(len(actions), a.substation, a.partition, a.busbar_assignment,
                       a.open_couplers, a.reassignment_distance)
            )
        ranges[station.node] = (start, len(actions))
    return ActionSet(tuple(actions), enumerate_disconnectables(grid), ranges)


def import_grid(
    grid: GridModel,
    cache_path: str | Path | None = None,
    cap: int = DEFAULT_CAP,
    seed: int = 0,
    max_workers: int = 1,
) -> ImportResult:
    """Build (or load from cache) the action set and base PTDF for ``grid``."""
    key = grid_hash(grid, cap, seed)
    action_set = None
    if cache_path is not None and Path(cache_path).exists():
        try:
            doc = json.loads(Path(cache_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{cache_path}: malformed action cache ({exc})") from exc
        if doc.get("grid_hash") == key:
            action_set = ActionSet.from_dict(doc["action_set"])
            log.info("loaded %d actions from cache %s", len(action_set.actions), cache_path)
    if action_set is None:
        action_set = build_action_set(grid, cap=cap, seed=seed, max_workers=max_workers)
        if cache_path is not None:
            Path(cache_path).write_text(
                json.dumps({"grid_hash": key, "action_set": action_set.to_dict()}),
                encoding="utf-8",
            )
    return ImportResult(action_set, build_ptdf(grid), key)
