"""Batched MapElites loop."""

from __future__ import annotations

import logging
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from topoqd.config import OptimizerConfig
from topoqd.dc_engine import DCEngine, ScoreVector
from topoqd.errors import ConfigError
from topoqd.grid import GridModel
from topoqd.importer import ActionSet
from topoqd.qd.genome import Genome
from topoqd.qd.operators import _station_groups, crossover, mutate
from topoqd.qd.repertoire import Repertoire, RepertoireSnapshot

log = logging.getLogger(__name__)

SnapshotSink = Callable[[RepertoireSnapshot], None]


@dataclass
class OptimizationResult:
    repertoire: Repertoire
    seed_score: ScoreVector
    evaluations: int = 0
    epochs: int = 0
    snapshots: int = 0
    trace: list[tuple[int, float]] = field(default_factory=list)


def make_engine(grid: GridModel, action_set: ActionSet, config: OptimizerConfig) -> DCEngine:
    return DCEngine(
        grid, action_set, config.n_action_slots, config.n_disconnection_slots,
        weights=tuple(config.weights), fitness_variant=config.fitness_variant,
        island_penalty=config.island_penalty, worst_k=config.worst_k,
    )


def _check(action_set: ActionSet, config: OptimizerConfig) -> None:
    if config.batch_size <= 0:
        raise ConfigError("batch_size must be positive")
    usable_actions = config.n_action_slots > 0 and len(action_set.actions) > 0
    usable_discs = config.n_disconnection_slots > 0 and len(action_set.disconnectables) > 0
    if not usable_actions and not usable_discs:
        raise ConfigError("nothing to optimize: no station actions and no disconnectable branches")


def run(
    grid: GridModel,
    action_set: ActionSet,
    config: OptimizerConfig | None = None,
    sink: SnapshotSink | None = None,
    *,
    seed: int = 0,
    time_limit: float | None = None,
    stop: threading.Event | None = None,
    engine: DCEngine | None = None,
) -> OptimizationResult:
    """Evolve a repertoire until the evaluation, epoch or time budget runs out.

    A snapshot goes to ``sink`` after every epoch; the last one is flagged
    ``final``. With an evaluation budget and no time limit the run is fully
    determined by ``seed``.
    """
    config = config or OptimizerConfig()
    _check(action_set, config)
    engine = engine or make_engine(grid, action_set, config)
    b = config.batch_size
    deadline = None if time_limit is None else time.monotonic() + time_limit

    master_seq, *lane_seqs = np.random.SeedSequence(seed).spawn(b + 1)
    master = np.random.default_rng(master_seq)
    lanes = [np.random.default_rng(s) for s in lane_seqs]
    groups = _station_groups(action_set)

    rep = Repertoire(tuple(config.descriptor_ranges), config.cell_capacity)
    seed_genome = Genome.empty(config.n_action_slots, config.n_disconnection_slots)
    seed_score = engine.evaluate(seed_genome)
    rep.insert(seed_genome, seed_score)
    result = OptimizationResult(rep, seed_score, trace=[(0, seed_score.fitness)])
    best = seed_score.fitness

    def exhausted() -> bool:
        if config.max_evaluations is not None and result.evaluations >= config.max_evaluations:
            return True
        if deadline is not None and time.monotonic() >= deadline:
            return True
        return stop is not None and stop.is_set()

    def emit(final: bool) -> None:
        if result.trace[-1] != (result.evaluations, best):
            result.trace.append((result.evaluations, best))
        if sink is not None:
            sink(rep.snapshot(result.epochs, result.evaluations, final=final))
            result.snapshots += 1

    if config.max_epochs == 0 or exhausted():
        emit(final=True)
        return result

    while True:
        for _ in range(config.iters_per_epoch):
            if exhausted():
                break
            n = b
            if config.max_evaluations is not None:
                n = min(b, config.max_evaluations - result.evaluations)
            n_mutants = int(master.integers(0, b + 1))
            members = rep.members()
            offspring = []
            for lane in range(n):
                rng = lanes[lane]
                if lane < n_mutants:
                    parent = members[int(rng.integers(len(members)))].genome
                    child = mutate(
                        parent, action_set, rng, config.p_action, config.p_disconnection,
                        config.mutation_mean, _groups=groups,
                    )
                else:
                    p1 = members[int(rng.integers(len(members)))].genome
                    p2 = members[int(rng.integers(len(members)))].genome
                    child = crossover(p1, p2, action_set, rng, config.p_crossover_first)
                offspring.append(child)
            scores = engine.evaluate_batch(offspring, pad_to=b)
            for child, score in zip(offspring, scores):
                rep.insert(child, score)
                result.evaluations += 1
                if score.fitness > best:
                    best = score.fitness
                    result.trace.append((result.evaluations, best))
        result.epochs += 1
        done = exhausted() or (config.max_epochs is not None and result.epochs >= config.max_epochs)
        emit(final=done)
        log.debug("epoch %d: %d evaluations, best %.3f", result.epochs, result.evaluations, best)
        if done:
            return result
