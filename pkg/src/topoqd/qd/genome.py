from __future__ import annotations

from dataclasses import dataclass

EMPTY = -1


@dataclass(frozen=True)
class Genome:
    """One candidate topology.

    ``actions`` holds N_a slots of action ids (into the ActionSet), and
    ``disconnections`` holds N_d slots of positions into the disconnectable
    branch list. ``EMPTY`` marks an unused slot.
    """

    actions: tuple[int, ...]
    disconnections: tuple[int, ...]

    @classmethod
    def empty(cls, n_actions: int, n_disconnections: int) -> Genome:
        return cls((EMPTY,) * n_actions, (EMPTY,) * n_disconnections)

    @property
    def action_ids(self) -> tuple[int, ...]:
        return tuple(a for a in self.actions if a != EMPTY)

    @property
    def disconnection_ids(self) -> tuple[int, ...]:
        return tuple(d for d in self.disconnections if d != EMPTY)

    @property
    def n_splits(self) -> int:
        return sum(a != EMPTY for a in self.actions)

    @property
    def n_disconnections(self) -> int:
        return sum(d != EMPTY for d in self.disconnections)

    def is_empty(self) -> bool:
        return self.n_splits == 0 and self.n_disconnections == 0

    def key(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """Slot-order independent identity of the topology."""
        return tuple(sorted(self.action_ids)), tuple(sorted(self.disconnection_ids))

    def to_dict(self) -> dict:
        return {"actions": list(self.actions), "disconnections": list(self.disconnections)}

    @classmethod
    def from_dict(cls, d: dict) -> Genome:
        return cls(tuple(int(a) for a in d["actions"]), tuple(int(x) for x in d["disconnections"]))


def is_valid(genome: Genome, substation_of, n_actions: int, n_disconnectables: int) -> bool:
    """Distinct stations among actions, distinct branches among disconnections, ids in range."""
    acts = genome.action_ids
    if any(not 0 <= a < n_actions for a in acts):
        return False
    if any(not 0 <= d < n_disconnectables for d in genome.disconnection_ids):
        return False
    stations = [int(substation_of[a]) for a in acts]
    if len(set(stations)) != len(stations):
        return False
    discs = genome.disconnection_ids
    return len(set(discs)) == len(discs)
