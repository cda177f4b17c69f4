from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field

from topoqd.config import RunConfig


class ImportRequest(BaseModel):
    grid: str = Field(description="path of the grid JSON file on the server")
    action_cache: str | None = None
    cap: int = Field(2**23, ge=1)
    seed: int = 0


class ImportResponse(BaseModel):
    grid_hash: str
    n_actions: int
    n_disconnectables: int
    actions_per_station: dict[str, int]
    disconnectables: list[str]


class RunRequest(BaseModel):
    config: RunConfig


class RunStatus(BaseModel):
    run_id: str
    state: Literal["running", "finished", "failed"]
    exit_code: int | None = None
    error: str | None = None
    report_dir: str | None = None


class ReportRequest(BaseModel):
    log: str = Field(description="path of a validation.jsonl file on the server")
    out: str | None = None


class ReportResponse(BaseModel):
    heatmap: list[list[float | None]]
    accepted_counts: list[list[int]]
    rejections: dict[str, float]
    trace: list[tuple[int, float]]
    pre_overload: float
    best_overload: float | None
    total_evaluations: int
    n_records: int
    n_accepted: int
    exit_code: int
