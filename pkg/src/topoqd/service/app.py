"""HTTP front end for the pipeline.

Runs execute in background threads; state lives in this process only.
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field

from fastapi import FastAPI, HTTPException

from topoqd.errors import TopoError
from topoqd.grid import load_grid
from topoqd.importer import import_grid
from topoqd.pipeline import PipelineResult, RunReport, exit_code, report_from_log, run_pipeline
from topoqd.service.schemas import (
    ImportRequest,
    ImportResponse,
    ReportRequest,
    ReportResponse,
    RunRequest,
    RunStatus,
)


@dataclass
class _Run:
    thread: threading.Thread
    stop: threading.Event
    result: PipelineResult | None = None
    error: str | None = None
    done: threading.Event = field(default_factory=threading.Event)


def _report_response(report: RunReport) -> ReportResponse:
    d = report.to_dict()
    d.pop("summary")
    return ReportResponse(**d, exit_code=exit_code(report))


def create_app() -> FastAPI:
    app = FastAPI(title="topoqd", version="0.1.0")
    runs: dict[str, _Run] = {}
    app.state.runs = runs

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/import", response_model=ImportResponse)
    def do_import(req: ImportRequest) -> ImportResponse:
        try:
            res = import_grid(load_grid(req.grid), req.action_cache, cap=req.cap, seed=req.seed)
        except (TopoError, OSError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        acts = res.action_set
        return ImportResponse(
            grid_hash=res.grid_hash,
            n_actions=len(acts.actions),
            n_disconnectables=len(acts.disconnectables),
            actions_per_station={s: b - a for s, (a, b) in acts.ranges.items()},
            disconnectables=list(acts.disconnectables),
        )

    @app.post("/runs", response_model=RunStatus, status_code=202)
    def start_run(req: RunRequest) -> RunStatus:
        run_id = uuid.uuid4().hex[:12]
        stop = threading.Event()

        def target() -> None:
            entry = runs[run_id]
            try:
                entry.result = run_pipeline(req.config, stop=stop)
            except Exception as exc:
                entry.error = str(exc)
            finally:
                entry.done.set()

        runs[run_id] = _Run(threading.Thread(target=target, daemon=True), stop)
        runs[run_id].thread.start()
        return _status(run_id)

    def _get(run_id: str) -> _Run:
        if run_id not in runs:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        return runs[run_id]

    def _status(run_id: str) -> RunStatus:
        entry = _get(run_id)
        if not entry.done.is_set():
            return RunStatus(run_id=run_id, state="running")
        if entry.error is not None:
            return RunStatus(run_id=run_id, state="failed", error=entry.error)
        return RunStatus(
            run_id=run_id, state="finished", exit_code=entry.result.exit_code,
            report_dir=str(entry.result.outdir),
        )

    @app.get("/runs/{run_id}", response_model=RunStatus)
    def run_status(run_id: str) -> RunStatus:
        return _status(run_id)

    @app.post("/runs/{run_id}/stop", response_model=RunStatus)
    def stop_run(run_id: str) -> RunStatus:
        _get(run_id).stop.set()
        return _status(run_id)

    @app.get("/runs/{run_id}/report", response_model=ReportResponse)
    def run_report(run_id: str) -> ReportResponse:
        entry = _get(run_id)
        if not entry.done.is_set():
            raise HTTPException(status_code=409, detail="run still in progress")
        if entry.result is None:
            raise HTTPException(status_code=409, detail=entry.error or "run failed")
        return _report_response(entry.result.report)

    @app.post("/report", response_model=ReportResponse)
    def rebuild_report(req: ReportRequest) -> ReportResponse:
        try:
            report = report_from_log(req.log, req.out)
        except (TopoError, OSError, KeyError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return _report_response(report)

    return app


app = create_app()
