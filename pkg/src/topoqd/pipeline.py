"""Import, DC optimization and AC validation as one budgeted run.

The DC optimizer runs in a worker thread and hands repertoire snapshots to the
AC validator through a small bounded channel. All report files are pure
aggregations of the validation log, so ``report`` can rebuild them later.
"""

from __future__ import annotations

import collections
import csv
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from topoqd.ac.validator import REASONS, ValidationRecord, Validator
from topoqd.config import RunConfig
from topoqd.errors import ConfigError, StageError, TopoError
from topoqd.grid import GridModel, load_grid
from topoqd.importer import import_grid
from topoqd.qd.loop import make_engine, run
from topoqd.qd.repertoire import RepertoireSnapshot

log = logging.getLogger(__name__)

LOG_NAME = "validation.jsonl"
REPORT_FILES = (
    "heatmap_overload.csv", "accepted_counts.csv", "rejections.csv", "fitness_trace.csv", "run.json",
)
EMPTY_CELL = "-"


class SnapshotChannel:
    """Bounded single-producer single-consumer queue of snapshots.

    With ``policy="drop_oldest"`` a full queue discards its oldest non-final
    entry instead of blocking the producer.
    """

    def __init__(self, maxsize: int = 4, policy: str = "drop_oldest"):
        self.maxsize = maxsize
        self.policy = policy
        self.dropped = 0
        self.sent = 0
        self._items: collections.deque[RepertoireSnapshot] = collections.deque()
        self._cond = threading.Condition()
        self._closed = False

    def put(self, snapshot: RepertoireSnapshot) -> None:
        with self._cond:
            if self.policy == "block":
                while len(self._items) >= self.maxsize and not self._closed:
                    self._cond.wait(0.1)
            else:
                while len(self._items) >= self.maxsize:
                    victim = next((s for s in self._items if not s.final), None)
                    if victim is None:
                        break
                    self._items.remove(victim)
                    self.dropped += 1
            self._items.append(snapshot)
            self.sent += 1
            self._cond.notify_all()

    def get(self, timeout: float | None = None) -> RepertoireSnapshot | None:
        """Next snapshot, or None on timeout or when closed and drained."""
        with self._cond:
            if not self._items and not self._closed:
                self._cond.wait(timeout)
            if not self._items:
                return None
            item = self._items.popleft()
            self._cond.notify_all()
            return item

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def drained(self) -> bool:
        with self._cond:
            return self._closed and not self._items


# -- reports ------------------------------------------------------------------


@dataclass
class RunReport:
    """Aggregated run outcome. Grids are indexed [splits][disconnections]."""

    heatmap: list[list[float | None]]
    accepted_counts: list[list[int]]
    rejections: dict[str, float]
    trace: list[tuple[int, float]]
    pre_overload: float
    total_evaluations: int = 0
    n_records: int = 0
    n_accepted: int = 0
    summary: dict = field(default_factory=dict)

    @property
    def best_overload(self) -> float | None:
        values = [v for i, row in enumerate(self.heatmap) for j, v in enumerate(row)
                  if v is not None and (i, j) != (0, 0)]
        return min(values) if values else None

    def to_dict(self) -> dict:
        return {
            "heatmap": self.heatmap,
            "accepted_counts": self.accepted_counts,
            "rejections": self.rejections,
            "trace": [list(t) for t in self.trace],
            "pre_overload": self.pre_overload,
            "best_overload": self.best_overload,
            "total_evaluations": self.total_evaluations,
            "n_records": self.n_records,
            "n_accepted": self.n_accepted,
            "summary": self.summary,
        }


def read_log(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def aggregate(entries: list[dict]) -> RunReport:
    """Build the report from validation-log entries alone."""
    baseline = next((e for e in entries if e["type"] == "baseline"), None)
    if baseline is None:
        raise TopoError("validation log has no baseline entry")
    summary = next((e for e in entries if e["type"] == "summary"), {})
    n_s = summary.get("n_action_slots", 3) + 1
    n_d = summary.get("n_disconnection_slots", 2) + 1
    records = [ValidationRecord.from_dict(e) for e in entries if e["type"] == "validation"]

    heat: list[list[float | None]] = [[None] * n_d for _ in range(n_s)]
    counts = [[0] * n_d for _ in range(n_s)]
    heat[0][0] = baseline["ac_overload"]
    for r in records:
        if not r.accepted:
            continue
        s, d = min(r.dc.n_splits, n_s - 1), min(r.dc.n_disconnections, n_d - 1)
        counts[s][d] += 1
        if heat[s][d] is None or r.ac_overload < heat[s][d]:
            heat[s][d] = r.ac_overload

    tally = collections.Counter("accepted" if r.accepted else r.reason for r in records)
    total = len(records)
    rejections = {k: (100.0 * tally[k] / total if total else 0.0) for k in ("accepted", *REASONS)}
    trace = [(e["evaluations"], e["best_fitness"]) for e in entries if e["type"] == "trace"]
    return RunReport(
        heatmap=heat,
        accepted_counts=counts,
        rejections=rejections,
        trace=trace,
        pre_overload=baseline["ac_overload"],
        total_evaluations=summary.get("evaluations", trace[-1][0] if trace else 0),
        n_records=total,
        n_accepted=tally["accepted"],
        summary=summary,
    )


def _fmt(v: float | None) -> str:
    return EMPTY_CELL if v is None else f"{v:.3f}"


def _write_grid(path: Path, grid: list[list], fmt) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["splits/disconnections", *range(len(grid[0]))])
        for s, row in enumerate(grid):
            w.writerow([s, *(fmt(v) for v in row)])


def emit_reports(report: RunReport, outdir: str | Path, run_info: dict | None = None) -> list[Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    _write_grid(out / "heatmap_overload.csv", report.heatmap, _fmt)
    _write_grid(out / "accepted_counts.csv", report.accepted_counts, str)
    with open(out / "rejections.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["reason", "percent"])
        for reason, pct in report.rejections.items():
            w.writerow([reason, f"{pct:.2f}"])
    with open(out / "fitness_trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["evaluations", "best_fitness"])
        for n, f in report.trace:
            w.writerow([n, f"{f:.6f}"])
    info = dict(run_info or {})
    info.update({
        "pre_optimization_ac_overload": report.pre_overload,
        "best_accepted_ac_overload": report.best_overload,
        "total_evaluations": report.total_evaluations,
        "validated_candidates": report.n_records,
        "accepted": report.n_accepted,
    })
    (out / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [out / f for f in REPORT_FILES]


def report_from_log(log_path: str | Path, outdir: str | Path | None = None) -> RunReport:
    """Re-aggregate report files from an existing validation log."""
    log_path = Path(log_path)
    report = aggregate(read_log(log_path))
    outdir = Path(outdir) if outdir is not None else log_path.parent
    run_info = {}
    previous = outdir / "run.json"
    if previous.exists():
        run_info = json.loads(previous.read_text(encoding="utf-8"))
    emit_reports(report, outdir, run_info)
    return report


def exit_code(report: RunReport) -> int:
    return 0 if report.n_accepted > 0 or report.pre_overload == 0 else 1


# -- orchestration ------------------------------------------------------------


@dataclass
class PipelineResult:
    report: RunReport
    outdir: Path
    exit_code: int
    timings: dict[str, float]


def run_pipeline(
    config: RunConfig,
    grid: GridModel | None = None,
    stop: threading.Event | None = None,
) -> PipelineResult:
    """Run all stages within ``config.total_seconds`` and write the reports."""
    t0 = time.monotonic()
    outdir = config.resolved_report_dir()
    outdir.mkdir(parents=True, exist_ok=True)
    stop = stop or threading.Event()
    timings: dict[str, float] = {}

    try:
        if grid is None:
            if config.grid is None:
                raise ConfigError("no grid given")
            grid = load_grid(config.grid)
        imported = import_grid(
            grid, config.action_cache, cap=config.import_cap, seed=config.seed,
            max_workers=config.import_workers,
        )
        engine = make_engine(grid, imported.action_set, config.optimizer)
    except (TopoError, OSError) as exc:
        raise StageError("import", exc) from exc
    timings["import_seconds"] = time.monotonic() - t0

    dc_budget, ac_budget = config.stage_budgets(timings["import_seconds"])
    t_stage = time.monotonic()
    ac_deadline = t_stage + dc_budget + ac_budget

    try:
        validator = Validator(
            grid, imported.action_set, engine.pre_score, config.validator, outdir / LOG_NAME,
        )
    except Exception as exc:
        raise StageError("ac_validator", exc) from exc

    channel = SnapshotChannel(config.queue_size, config.queue_policy)
    dc_state: dict = {}

    def producer() -> None:
        try:
            dc_state["result"] = run(
                grid, imported.action_set, config.optimizer, channel.put,
                seed=config.seed, time_limit=dc_budget, stop=stop, engine=engine,
            )
        except Exception as exc:  # reported by the orchestrator
            dc_state["error"] = exc
        finally:
            dc_state["seconds"] = time.monotonic() - t_stage
            channel.close()

    worker = threading.Thread(target=producer, name="dc-optimizer", daemon=True)
    worker.start()
    try:
        while time.monotonic() < ac_deadline:
            snapshot = channel.get(timeout=0.05)
            if snapshot is None:
                if channel.drained:
                    break
                continue
            validator.process(snapshot, deadline=ac_deadline)
            if snapshot.final:
                break
    except Exception as exc:
        stop.set()
        worker.join()
        validator.close()
        raise StageError("ac_validator", exc) from exc
    stop.set()
    worker.join()
    if "error" in dc_state:
        validator.close()
        raise StageError("dc_optimizer", dc_state["error"])
    timings["ac_seconds"] = time.monotonic() - t_stage
    timings["dc_seconds"] = dc_state.get("seconds", 0.0)

    dc = dc_state["result"]
    validator.finalize()
    for n, f in dc.trace:
        validator.write_extra({"type": "trace", "evaluations": n, "best_fitness": f})
    validator.write_extra({
        "type": "summary",
        "evaluations": dc.evaluations,
        "epochs": dc.epochs,
        "n_action_slots": config.optimizer.n_action_slots,
        "n_disconnection_slots": config.optimizer.n_disconnection_slots,
    })
    validator.close()

    report = aggregate(read_log(outdir / LOG_NAME))
    code = exit_code(report)
    timings["total_seconds"] = time.monotonic() - t0
    echo = config.model_dump(mode="json", exclude={"report_dir"})
    run_info = {
        "config": echo,
        "grid_hash": imported.grid_hash,
        "n_actions": len(imported.action_set.actions),
        "n_disconnectables": len(imported.action_set.disconnectables),
        "epochs": dc.epochs,
        "exit_code": code,
        "dc_pre_fitness": engine.pre_score.fitness,
        # everything under "runtime" depends on wall-clock scheduling
        "runtime": {
            **{k: round(v, 3) for k, v in timings.items()},
            "budgets": {"dc_seconds": dc_budget, "ac_seconds": ac_budget,
                        "total_seconds": config.total_seconds},
            "snapshots_sent": channel.sent,
            "snapshots_dropped": channel.dropped,
            "snapshots_validated": validator.snapshots_processed,
            "evaluations_per_second": round(dc.evaluations / max(timings["dc_seconds"], 1e-9), 1),
            "report_dir": str(outdir),
        },
    }
    emit_reports(report, outdir, run_info)
    log.info("run finished: %d accepted, exit code %d", report.n_accepted, code)
    return PipelineResult(report, outdir, code, timings)
