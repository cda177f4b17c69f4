"""Run configuration.

Configs are plain JSON files whose keys mirror the models below; every key is
optional. Example::

    {
      "total_seconds": 120,
      "seed": 7,
      "optimizer": {"batch_size": 64, "iters_per_epoch": 100},
      "validator": {"improvement_threshold": 0.05}
    }
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from topoqd.errors import ConfigError

REPORT_DIR_ENV = "TOPOQD_REPORT_DIR"


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class OptimizerConfig(_Frozen):
    n_action_slots: int = Field(3, ge=0)
    n_disconnection_slots: int = Field(2, ge=0)
    batch_size: int = 64
    iters_per_epoch: int = Field(500, ge=1)
    cell_capacity: int = Field(4, ge=1)
    mutation_mean: float = Field(2.0, ge=0)
    # add, remove, change, identity
    p_action: tuple[float, float, float, float] = (0.2, 0.2, 0.5, 0.1)
    p_disconnection: tuple[float, float, float, float] = (0.25, 0.25, 0.5, 0.0)
    p_crossover_first: float = Field(0.75, ge=0, le=1)
    # maximum disconnections, splits and reassignments mapped to distinct cells
    descriptor_ranges: tuple[int, int, int] = (2, 3, 45)
    fitness_variant: Literal[1, 2] = 1
    weights: tuple[float, float] = (200.0, 50.0)
    island_penalty: float = Field(10_000.0, ge=0)
    worst_k: int = Field(20, ge=0)
    max_evaluations: int | None = Field(None, ge=0)
    max_epochs: int | None = Field(None, ge=0)

    @model_validator(mode="after")
    def _check(self) -> OptimizerConfig:
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        for name in ("p_action", "p_disconnection"):
            p = getattr(self, name)
            if min(p) < 0 or sum(p) <= 0:
                raise ValueError(f"{name} must be non-negative with a positive sum")
        if min(self.descriptor_ranges) < 0:
            raise ValueError("descriptor_ranges must be non-negative")
        return self


class ValidatorConfig(_Frozen):
    similarity_distance: int = Field(1, ge=0)
    # fraction of |pre-optimization fitness|
    dominance_tolerance: float = Field(0.01, ge=0)
    improvement_threshold: float = Field(0.05, ge=0)
    max_nonconverged_worst_k: int = Field(2, ge=0)
    max_nonconverged_fraction: float = Field(0.05, ge=0, le=1)
    max_validations_per_snapshot: int | None = Field(25, ge=0)
    refill_per_snapshot: int = Field(2, ge=0)
    max_iter: int = Field(30, ge=1)
    tolerance: float = Field(1e-6, gt=0)
    seed: int = 0


class RunConfig(_Frozen):
    grid: str | None = None
    action_cache: str | None = None
    report_dir: str = "reports"
    seed: int = 0
    total_seconds: float = Field(900.0, gt=0)
    dc_seconds: float | None = Field(None, ge=0)
    ac_seconds: float | None = Field(None, ge=0)
    queue_size: int = Field(4, ge=1)
    queue_policy: Literal["drop_oldest", "block"] = "drop_oldest"
    import_cap: int = Field(2**23, ge=1)
    import_workers: int = Field(1, ge=1)
    optimizer: OptimizerConfig = OptimizerConfig()
    validator: ValidatorConfig = ValidatorConfig()

    @model_validator(mode="after")
    def _budgets(self) -> RunConfig:
        if self.dc_seconds is not None and self.ac_seconds is not None:
            if self.dc_seconds + self.ac_seconds > self.total_seconds * 1.0001:
                raise ValueError("dc_seconds + ac_seconds exceeds total_seconds")
        return self

    def stage_budgets(self, elapsed: float = 0.0) -> tuple[float, float]:
        """DC and AC stage lengths for the time left after ``elapsed`` seconds.

        Unset stages split the remainder 3:5 between DC and AC.
        """
        remaining = max(self.total_seconds - elapsed, 0.0)
        dc = self.dc_seconds if self.dc_seconds is not None else 0.375 * remaining
        ac = self.ac_seconds if self.ac_seconds is not None else remaining - dc
        return min(dc, remaining), max(min(ac, remaining - min(dc, remaining)), 0.0)

    def resolved_report_dir(self) -> Path:
        return Path(os.environ.get(REPORT_DIR_ENV) or self.report_dir)


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Read a JSON config and apply non-None top-level overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return parse_config(data)


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
