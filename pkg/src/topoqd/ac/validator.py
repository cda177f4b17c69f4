"""AC validation of DC candidates.

Each snapshot is pruned with three cheap heuristics (similar to something
already validated, dominated by a simpler candidate, too little DC gain).
Survivors go through an AC prefilter on the DC worst contingencies and then a
full AC N-1 run. Every distinct candidate ends with exactly one record.
"""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from topoqd.ac.powerflow import ACCaseResult, ac_power_flow, apply_outage
from topoqd.config import ValidatorConfig
from topoqd.dc_engine import ScoreVector
from topoqd.grid import GridModel
from topoqd.importer import ActionSet
from topoqd.qd.genome import Genome
from topoqd.qd.repertoire import Elite, RepertoireSnapshot
from topoqd.topology import materialize

log = logging.getLogger(__name__)

NONCONVERGENCE = "nonconvergence"
OVERLOAD_NOT_IMPROVED = "overload_not_improved"
CRITICAL_COUNT_INCREASED = "critical_count_increased"
ELIMINATED_SIMILAR = "eliminated_similar"
ELIMINATED_DOMINATED = "eliminated_dominated"
ELIMINATED_BELOW_THRESHOLD = "eliminated_below_threshold"
REASONS = (
    NONCONVERGENCE, OVERLOAD_NOT_IMPROVED, CRITICAL_COUNT_INCREASED,
    ELIMINATED_SIMILAR, ELIMINATED_DOMINATED, ELIMINATED_BELOW_THRESHOLD,
)


@dataclass(frozen=True)
class ValidationRecord:
    genome: Genome
    dc: ScoreVector
    stage: str | None  # "worst_k", "full_n1", or None when eliminated
    accepted: bool
    reason: str | None = None
    ac_overload: float | None = None
    ac_critical: int | None = None
    n_nonconverged: int | None = None
    epoch: int = 0

    @property
    def verdict(self) -> str:
        return "accepted" if self.accepted else "rejected"

    def to_dict(self) -> dict:
        return {
            "type": "validation",
            "genome": self.genome.to_dict(),
            "dc": self.dc.to_dict(),
            "stage": self.stage,
            "verdict": self.verdict,
            "reason": self.reason,
            "ac_overload": self.ac_overload,
            "ac_critical": self.ac_critical,
            "n_nonconverged": self.n_nonconverged,
            "epoch": self.epoch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ValidationRecord:
        return cls(
            genome=Genome.from_dict(d["genome"]),
            dc=ScoreVector.from_dict(d["dc"]),
            stage=d["stage"],
            accepted=d["verdict"] == "accepted",
            reason=d["reason"],
            ac_overload=d["ac_overload"],
            ac_critical=d["ac_critical"],
            n_nonconverged=d["n_nonconverged"],
            epoch=d.get("epoch", 0),
        )


# -- AC metrics ---------------------------------------------------------------


def overload_metrics(results: Iterable[ACCaseResult], limits: np.ndarray) -> tuple[float, int]:
    """Overload energy and critical-branch count over the converged cases."""
    worst = np.zeros(len(limits))
    for r in results:
        if r.converged:
            worst = np.maximum(worst, r.flows)
    return float(np.maximum(worst - limits, 0.0).sum()), int((worst > limits).sum())


@dataclass
class ACAssessment:
    """AC solutions of one topology: base case plus the cases run so far."""

    grid: GridModel
    base: ACCaseResult
    cases: dict[str, ACCaseResult]

    @classmethod
    def start(cls, grid: GridModel, max_iter: int = 30, tol: float = 1e-6) -> ACAssessment:
        return cls(grid, ac_power_flow(grid, max_iter, tol), {})

    def run(self, case_ids: Iterable[str], max_iter: int = 30, tol: float = 1e-6) -> None:
        index = self.grid.outage_index
        for cid in case_ids:
            if cid not in self.cases:
                case = self.grid.outages[index[cid]]
                self.cases[cid] = ac_power_flow(apply_outage(self.grid, case), max_iter, tol)

    def metrics(self, case_ids: Iterable[str]) -> tuple[float, int, int]:
        """(overload energy, critical count, non-converged count) over ``case_ids``."""
        results = [self.cases[c] for c in case_ids]
        energy, critical = overload_metrics(results, self.grid.limits)
        return energy, critical, sum(not r.converged for r in results)


@dataclass(frozen=True)
class Baseline:
    """AC and DC metrics of the unmodified topology, computed once per run."""

    assessment: ACAssessment
    dc: ScoreVector
    overload: float
    critical: int
    n_nonconverged: int

    @classmethod
    def compute(cls, grid: GridModel, dc: ScoreVector, config: ValidatorConfig = ValidatorConfig()) -> Baseline:
        a = ACAssessment.start(grid, config.max_iter, config.tolerance)
        ids = [o.id for o in grid.outages]
        a.run(ids, config.max_iter, config.tolerance)
        overload, critical, nonconv = a.metrics(ids)
        return cls(a, dc, overload, critical, nonconv)

    def restricted_overload(self, case_ids: Sequence[str]) -> float:
        return self.assessment.metrics(case_ids)[0]

    def to_dict(self) -> dict:
        return {
            "type": "baseline",
            "ac_overload": self.overload,
            "ac_critical": self.critical,
            "ac_base_converged": self.assessment.base.converged,
            "ac_nonconverged": self.n_nonconverged,
            "dc_fitness": self.dc.fitness,
            "dc_overload": self.dc.overload_energy,
        }


def worst_k_check(
    grid: GridModel,
    worst_contingencies: Sequence[tuple[str, float]],
    baseline: Baseline,
    config: ValidatorConfig = ValidatorConfig(),
    assessment: ACAssessment | None = None,
) -> tuple[bool, str | None, ACAssessment]:
    """AC prefilter on the DC worst cases. Returns (passed, reason, solutions so far)."""
    a = assessment or ACAssessment.start(grid, config.max_iter, config.tolerance)
    if not a.base.converged:
        return False, NONCONVERGENCE, a
    ids = [cid for cid, _ in worst_contingencies]
    a.run(ids, config.max_iter, config.tolerance)
    energy, _, nonconv = a.metrics(ids)
    if nonconv > config.max_nonconverged_worst_k:
        return False, NONCONVERGENCE, a
    if energy >= baseline.restricted_overload(ids):
        return False, OVERLOAD_NOT_IMPROVED, a
    return True, None, a


def full_validation(
    grid: GridModel,
    baseline: Baseline,
    config: ValidatorConfig = ValidatorConfig(),
    assessment: ACAssessment | None = None,
) -> tuple[bool, str | None, float | None, int | None, int]:
    """Full AC N-1. Returns (accepted, reason, AC overload, critical count, non-converged count)."""
    a = assessment or ACAssessment.start(grid, config.max_iter, config.tolerance)
    ids = [o.id for o in grid.outages]
    if not a.base.converged:
        return False, NONCONVERGENCE, None, None, len(ids) + 1
    a.run(ids, config.max_iter, config.tolerance)
    energy, critical, nonconv = a.metrics(ids)
    if ids and nonconv / len(ids) > config.max_nonconverged_fraction:
        return False, NONCONVERGENCE, energy, critical, nonconv
    if not energy < baseline.overload:
        return False, OVERLOAD_NOT_IMPROVED, energy, critical, nonconv
    if critical > baseline.critical:
        return False, CRITICAL_COUNT_INCREASED, energy, critical, nonconv
    return True, None, energy, critical, nonconv


# -- elimination --------------------------------------------------------------


def genome_distance(a: Genome, b: Genome) -> int:
    """Symmetric difference of action ids plus that of disconnection ids."""
    (a_act, a_disc), (b_act, b_disc) = a.key(), b.key()
    return len(set(a_act) ^ set(b_act)) + len(set(a_disc) ^ set(b_disc))


def eliminate(
    candidates: Sequence[Elite],
    validated: Sequence[Genome],
    pre_fitness: float,
    config: ValidatorConfig = ValidatorConfig(),
) -> tuple[list[Elite], dict[tuple, str]]:
    """Split candidates into a validation queue and pruned ones.

    Returns the queue (best DC fitness first) and, for pruned candidates, the
    first heuristic that removed them keyed by genome key.
    """
    scale = abs(pre_fitness)
    eps = config.dominance_tolerance * scale
    min_gain = config.improvement_threshold * scale

    fitness = np.array([c.score.fitness for c in candidates], dtype=float)
    switching = np.array([c.score.switching_distance for c in candidates], dtype=np.int64)
    # best fitness among candidates with strictly lower switching distance
    best_below = np.full(len(candidates), -np.inf)
    if len(candidates):
        levels = np.unique(switching)
        level_best = np.array([fitness[switching == s].max() for s in levels])
        prefix = np.maximum.accumulate(level_best)
        pos = np.searchsorted(levels, switching)
        has_lower = pos > 0
        best_below[has_lower] = prefix[pos[has_lower] - 1]

    queue, pruned = [], {}
    for i, c in enumerate(candidates):
        if any(genome_distance(c.genome, v) <= config.similarity_distance for v in validated):
            pruned[c.genome.key()] = ELIMINATED_SIMILAR
        elif best_below[i] >= fitness[i] - eps:
            pruned[c.genome.key()] = ELIMINATED_DOMINATED
        elif fitness[i] - pre_fitness < min_gain:
            pruned[c.genome.key()] = ELIMINATED_BELOW_THRESHOLD
        else:
            queue.append(c)
    queue.sort(key=lambda c: (-c.score.fitness, c.genome.key()))
    return queue, pruned


# -- stateful consumer --------------------------------------------------------


class Validator:
    """Consumes snapshots and keeps the validation history.

    Records are appended to ``log_path`` (JSON lines) as they become final;
    eliminated candidates are only final after :meth:`finalize`, since a later
    refill may still validate them.
    """

    def __init__(
        self,
        grid: GridModel,
        action_set: ActionSet,
        pre_score: ScoreVector,
        config: ValidatorConfig = ValidatorConfig(),
        log_path: str | Path | None = None,
    ):
        self.grid = grid
        self.action_set = action_set
        self.config = config
        self.baseline = Baseline.compute(grid, pre_score, config)
        self.records: list[ValidationRecord] = []
        self._validated: dict[tuple, ValidationRecord] = {}
        self._pending: dict[tuple, tuple[Elite, str, int]] = {}
        self._rng = np.random.default_rng(config.seed)
        self.snapshots_processed = 0
        self._log = None
        if log_path is not None:
            self._log = open(log_path, "w")
            self._write(self.baseline.to_dict())

    def _write(self, obj: dict) -> None:
        if self._log is not None:
            self._log.write(json.dumps(obj) + "\n")
            self._log.flush()

    def write_extra(self, obj: dict) -> None:
        self._write(obj)

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
            self._log = None

    @property
    def accepted(self) -> list[ValidationRecord]:
        return [r for r in self.records if r.accepted]

    def validate(self, elite: Elite, epoch: int = 0) -> ValidationRecord:
        grid = materialize(self.grid, self.action_set, elite.genome)
        cfg = self.config
        passed, reason, a = worst_k_check(grid, elite.score.worst_contingencies, self.baseline, cfg)
        if not passed:
            energy, critical, nonconv = a.metrics(list(a.cases))
            record = ValidationRecord(
                elite.genome, elite.score, "worst_k", False, reason,
                energy if a.base.converged else None, critical if a.base.converged else None,
                nonconv + (not a.base.converged), epoch,
            )
        else:
            ok, reason, energy, critical, nonconv = full_validation(grid, self.baseline, cfg, a)
            record = ValidationRecord(
                elite.genome, elite.score, "full_n1", ok, reason, energy, critical, nonconv, epoch,
            )
        key = elite.genome.key()
        self._validated[key] = record
        self._pending.pop(key, None)
        self.records.append(record)
        self._write(record.to_dict())
        return record

    def process(self, snapshot: RepertoireSnapshot, deadline: float | None = None) -> list[ValidationRecord]:
        """Validate the promising part of one snapshot; stops early at ``deadline`` (monotonic)."""
        cfg = self.config
        candidates = [e for e in snapshot.elites() if not e.genome.is_empty()]
        validated = [r.genome for r in self._validated.values()]
        queue, pruned = eliminate(candidates, validated, self.baseline.dc.fitness, cfg)
        by_key = {c.genome.key(): c for c in candidates}
        for key, reason in pruned.items():
            if key in self._validated:
                continue
            first_epoch = self._pending[key][2] if key in self._pending else snapshot.epoch
            self._pending[key] = (by_key[key], reason, first_epoch)

        cap = cfg.max_validations_per_snapshot
        done: list[ValidationRecord] = []

        def budget_left() -> bool:
            if cap is not None and len(done) >= cap:
                return False
            return deadline is None or time.monotonic() < deadline

        for c in queue:
            if not budget_left():
                break
            if c.genome.key() in self._validated:
                continue
            done.append(self.validate(c, snapshot.epoch))

        # spare capacity goes to randomly chosen pruned candidates
        spare = [by_key[k] for k in pruned if k not in self._validated]
        n_refill = min(cfg.refill_per_snapshot, len(spare))
        if cap is not None:
            n_refill = min(n_refill, max(cap - len(done), 0))
        if n_refill:
            for i in sorted(self._rng.choice(len(spare), size=n_refill, replace=False)):
                if not budget_left():
                    break
                done.append(self.validate(spare[int(i)], snapshot.epoch))
        self.snapshots_processed += 1
        return done

    def finalize(self) -> list[ValidationRecord]:
        """Close out candidates that were pruned and never validated."""
        out = []
        for elite, reason, epoch in self._pending.values():
            record = ValidationRecord(elite.genome, elite.score, None, False, reason, epoch=epoch)
            self.records.append(record)
            self._write(record.to_dict())
            out.append(record)
        self._pending.clear()
        return out
