"""Descriptor-indexed archive of elite genomes."""

from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np

from topoqd.dc_engine import ScoreVector
from topoqd.qd.genome import Genome


def n_cells(ranges: tuple[int, int, int] = (2, 3, 45)) -> int:
    d_max, s_max, r_max = ranges
    return (d_max + 1) * (s_max + 1) * (r_max + 1)


def descriptor_to_cell(
    n_disconnections: int,
    n_splits: int,
    n_reassignments: int,
    ranges: tuple[int, int, int] = (2, 3, 45),
) -> int:
    """Mixed-radix cell index of a descriptor triple.

    Descriptors are clamped into ``ranges`` = (max disconnections, max splits,
    max reassignments); only the reassignment count is expected to overflow.
    """
    d_max, s_max, r_max = ranges
    d = min(max(n_disconnections, 0), d_max)
    s = min(max(n_splits, 0), s_max)
    r = min(max(n_reassignments, 0), r_max)
    return d + (d_max + 1) * (s + (s_max + 1) * r)


def cell_of(score: ScoreVector, ranges: tuple[int, int, int] = (2, 3, 45)) -> int:
    return descriptor_to_cell(score.n_disconnections, score.n_splits, score.n_reassignments, ranges)


@dataclass(frozen=True)
class Elite:
    genome: Genome
    score: ScoreVector


@dataclass(frozen=True)
class RepertoireSnapshot:
    """Immutable copy of the repertoire taken between epochs."""

    epoch: int
    evaluations: int
    best_fitness: float
    cells: tuple[tuple[int, tuple[Elite, ...]], ...]  # non-empty cells only, ascending index
    final: bool = False

    def elites(self) -> list[Elite]:
        return [e for _, entries in self.cells for e in entries]

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "evaluations": self.evaluations,
            "best_fitness": self.best_fitness,
            "final": self.final,
            "cells": [
                {"cell": c, "entries": [{"genome": e.genome.to_dict(), "score": e.score.to_dict()} for e in entries]}
                for c, entries in self.cells
            ],
        }


class Repertoire:
    """Cells of at most ``capacity`` elites, each sorted by fitness (best first)."""

    def __init__(self, ranges: tuple[int, int, int] = (2, 3, 45), capacity: int = 4):
        self.ranges = tuple(ranges)
        self.capacity = capacity
        self.cells: list[list[Elite]] = [[] for _ in range(n_cells(self.ranges))]
        self._keys: list[set] = [set() for _ in self.cells]
        self._members: list[Elite] | None = None

    def __len__(self) -> int:
        return sum(len(c) for c in self.cells)

    def insert(self, genome: Genome, score: ScoreVector) -> bool:
        """Sorted insert into the score's cell; returns whether the genome was kept."""
        if not np.isfinite(score.fitness):
            return False
        idx = cell_of(score, self.ranges)
        cell = self.cells[idx]
        key = genome.key()
        if key in self._keys[idx]:
            return False
        if len(cell) >= self.capacity and score.fitness <= cell[-1].score.fitness:
            return False
        # ties go after existing entries
        pos = bisect.bisect_right([-e.score.fitness for e in cell], -score.fitness)
        cell.insert(pos, Elite(genome, score))
        self._keys[idx].add(key)
        if len(cell) > self.capacity:
            dropped = cell.pop()
            self._keys[idx].discard(dropped.genome.key())
        self._members = None
        return True

    def members(self) -> list[Elite]:
        if self._members is None:
            self._members = [e for cell in self.cells for e in cell]
        return self._members

    def best(self) -> Elite | None:
        members = self.members()
        if not members:
            return None
        return max(members, key=lambda e: e.score.fitness)

    def cell_best(self) -> dict[int, float]:
        return {i: c[0].score.fitness for i, c in enumerate(self.cells) if c}

    def snapshot(self, epoch: int, evaluations: int, final: bool = False) -> RepertoireSnapshot:
        best = self.best()
        return RepertoireSnapshot(
            epoch=epoch,
            evaluations=evaluations,
            best_fitness=best.score.fitness if best else float("-inf"),
            cells=tuple((i, tuple(c)) for i, c in enumerate(self.cells) if c),
            final=final,
        )
