"""Mutation and crossover on genomes.

Both operators keep the genome invariants by construction: actions stay on
distinct stations and disconnections on distinct branches.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from topoqd.importer import ActionSet
from topoqd.qd.genome import EMPTY, Genome

OPERATIONS = ("add", "remove", "change", "identity")


def _pick(rng: np.random.Generator, items: Sequence[int]) -> int:
    return items[int(rng.integers(len(items)))]


class _Slots:
    """Mutable view of one slot vector with its exclusion rule."""

    def __init__(self, slots: Sequence[int], universe: int, group_of=None, group_members=None):
        self.slots = list(slots)
        self.universe = universe
        self.group_of = group_of
        self.group_members = group_members

    def filled(self) -> list[int]:
        return [i for i, v in enumerate(self.slots) if v != EMPTY]

    def empty(self) -> list[int]:
        return [i for i, v in enumerate(self.slots) if v == EMPTY]

    def _blocked(self) -> set[int]:
        used = [v for v in self.slots if v != EMPTY]
        if self.group_of is None:
            return set(used)
        return {int(self.group_of[v]) for v in used}

    def _free(self, value: int, blocked: set[int]) -> bool:
        key = value if self.group_of is None else int(self.group_of[value])
        return key not in blocked

    def can_add(self) -> bool:
        if not self.empty():
            return False
        blocked = self._blocked()
        if self.group_of is None:
            return len(blocked) < self.universe
        return len(blocked) < len(self.group_members)

    def can_change(self) -> bool:
        return any(self._change_pool(i) for i in self.filled())

    def _change_pool(self, i: int) -> list[int]:
        current = self.slots[i]
        if self.group_of is not None:
            # resample within the station already held by this slot
            return [a for a in self.group_members[int(self.group_of[current])] if a != current]
        blocked = self._blocked()
        return [d for d in range(self.universe) if d not in blocked]

    def feasible(self) -> tuple[bool, bool, bool, bool]:
        return self.can_add(), bool(self.filled()), self.can_change(), True

    def apply(self, op: str, rng: np.random.Generator) -> None:
        if op == "add":
            slot = _pick(rng, self.empty())
            blocked = self._blocked()
            # rejection sampling is uniform over allowed values and cheap when few are blocked
            for _ in range(32):
                value = int(rng.integers(self.universe))
                if self._free(value, blocked):
                    self.slots[slot] = value
                    return
            if self.group_of is None:
                pool = [d for d in range(self.universe) if d not in blocked]
            else:
                pool = [a for g, members in self.group_members.items() if g not in blocked for a in members]
            self.slots[slot] = _pick(rng, pool)
        elif op == "remove":
            self.slots[_pick(rng, self.filled())] = EMPTY
        elif op == "change":
            slot = _pick(rng, [i for i in self.filled() if self._change_pool(i)])
            self.slots[slot] = _pick(rng, self._change_pool(slot))


def _draw_operation(rng: np.random.Generator, weights: Sequence[float], feasible: Sequence[bool]) -> str:
    """Weighted draw restricted to feasible operations (renormalized)."""
    w = np.array([p if ok else 0.0 for p, ok in zip(weights, feasible)], dtype=float)
    if w.sum() <= 0:
        return "identity"
    return OPERATIONS[int(rng.choice(len(w), p=w / w.sum()))]


def _station_groups(action_set: ActionSet) -> dict[int, list[int]]:
    substation_of = action_set.substation_of
    groups: dict[int, list[int]] = {}
    for a, s in enumerate(substation_of):
        groups.setdefault(int(s), []).append(a)
    return groups


def mutate(
    genome: Genome,
    action_set: ActionSet,
    rng: np.random.Generator,
    p_action: Sequence[float] = (0.2, 0.2, 0.5, 0.1),
    p_disconnection: Sequence[float] = (0.25, 0.25, 0.5, 0.0),
    mutation_mean: float = 2.0,
    trace: list | None = None,
    _groups: dict[int, list[int]] | None = None,
) -> Genome:
    """Return a mutated copy of ``genome``.

    A Poisson number (clamped to 1..N_a) of station mutations is followed by
    one disconnection mutation. An entirely empty input genome forces the
    disconnection step to Add. Infeasible operations are dropped and the
    remaining weights renormalized.

    If ``trace`` is a list, one ``(stage, operation, feasible)`` tuple per
    drawn operation is appended to it.
    """
    groups = _groups if _groups is not None else _station_groups(action_set)
    acts = _Slots(genome.actions, len(action_set.actions), action_set.substation_of, groups)
    discs = _Slots(genome.disconnections, len(action_set.disconnectables))
    n_slots = len(genome.actions)

    if n_slots:
        n_mut = int(np.clip(rng.poisson(mutation_mean), 1, n_slots))
        for _ in range(n_mut):
            feasible = acts.feasible()
            op = _draw_operation(rng, p_action, feasible)
            if trace is not None:
                trace.append(("action", op, feasible))
            acts.apply(op, rng)

    if discs.slots:
        feasible = discs.feasible()
        if genome.is_empty() and feasible[0]:
            op = "add"
            if trace is not None:
                trace.append(("disconnection_forced", op, feasible))
        else:
            op = _draw_operation(rng, p_disconnection, feasible)
            if trace is not None:
                trace.append(("disconnection", op, feasible))
        discs.apply(op, rng)

    return Genome(tuple(acts.slots), tuple(discs.slots))


def _crossover_slots(
    first: Sequence[int],
    second: Sequence[int],
    p_first: float,
    rng: np.random.Generator,
    group_of=None,
) -> tuple[int, ...]:
    pool1 = [v for v in first if v != EMPTY]
    pool2 = [v for v in second if v != EMPTY]
    out: list[int] = []
    used_groups: set[int] = set()

    def group(v: int) -> int:
        return v if group_of is None else int(group_of[v])

    for _ in range(len(first)):
        pool1 = [v for v in pool1 if v not in out and group(v) not in used_groups]
        pool2 = [v for v in pool2 if v not in out and group(v) not in used_groups]
        candidates = sorted(set(pool1) | set(pool2))
        if not candidates:
            break
        weights = np.array([
            (p_first / len(pool1) if v in pool1 else 0.0)
            + ((1.0 - p_first) / len(pool2) if v in pool2 else 0.0)
            for v in candidates
        ])
        if weights.sum() <= 0:
            break
        v = candidates[int(rng.choice(len(candidates), p=weights / weights.sum()))]
        out.append(v)
        used_groups.add(group(v))
    return tuple(out) + (EMPTY,) * (len(first) - len(out))


def crossover(
    first: Genome,
    second: Genome,
    action_set: ActionSet,
    rng: np.random.Generator,
    p_first: float = 0.75,
) -> Genome:
    """Offspring drawn slot by slot from the union of both parents' entries.

    Each draw comes from ``first`` with probability ``p_first``; entries that
    clash with an earlier draw (same station, same branch) leave the pool.
    Slots stay empty once the pool is exhausted.
    """
    return Genome(
        _crossover_slots(first.actions, second.actions, p_first, rng, action_set.substation_of),
        _crossover_slots(first.disconnections, second.disconnections, p_first, rng),
    )
