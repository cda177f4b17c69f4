"""Command line entry point.

Commands run in-process by default; with ``--server URL`` they are forwarded
to a running ``topoqd serve`` instance instead.
"""

from __future__ import annotations

import json
import logging
import sys
import time
from pathlib import Path

import click

from topoqd.config import REPORT_DIR_ENV, RunConfig, load_config
from topoqd.errors import TopoError

ERROR_EXIT = 2


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(ERROR_EXIT)


def _echo_json(obj) -> None:
    click.echo(json.dumps(obj, indent=2))


def _client(server: str):
    import httpx

    return httpx.Client(base_url=server, timeout=30.0)


def _server_call(server: str, method: str, path: str, payload: dict | None = None) -> dict:
    with _client(server) as client:
        resp = client.request(method, path, json=payload)
    if resp.status_code >= 400:
        raise TopoError(f"server returned {resp.status_code}: {resp.text}")
    return resp.json()


@click.group()
@click.option("-v", "--verbose", count=True, help="More log output (repeatable).")
def main(verbose: int) -> None:
    """Grid topology optimization: import, optimize, report."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@main.command("import")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Seed for down-sampling large stations.")
@click.option("--out", "cache", type=click.Path(dir_okay=False), help="Action cache file to write.")
@click.option("--server", default=None, help="Forward to a running service at this URL.")
def import_cmd(grid_path, config_path, seed, cache, server) -> None:
    """Enumerate station actions and disconnectable branches, and cache them."""
    try:
        cfg = load_config(config_path, seed=seed)
        cache = cache or cfg.action_cache
        if server:
            payload = {"grid": str(Path(grid_path).resolve()), "cap": cfg.import_cap, "seed": cfg.seed,
                       "action_cache": str(Path(cache).resolve()) if cache else None}
            _echo_json(_server_call(server, "POST", "/import", payload))
            return
        from topoqd.grid import load_grid
        from topoqd.importer import import_grid

        res = import_grid(load_grid(grid_path), cache, cap=cfg.import_cap, seed=cfg.seed,
                          max_workers=cfg.import_workers)
    except (TopoError, OSError) as exc:
        _fail(exc)
    acts = res.action_set
    _echo_json({
        "grid_hash": res.grid_hash,
        "n_actions": len(acts.actions),
        "actions_per_station": {s: b - a for s, (a, b) in acts.ranges.items()},
        "disconnectables": list(acts.disconnectables),
        "cache": cache,
    })


@main.command()
@click.option("--grid", "grid_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--budget-seconds", type=float, default=None, help="Total wall-clock budget.")
@click.option("--out", "out", type=click.Path(file_okay=False), default=None,
              help=f"Report directory (overridden by ${REPORT_DIR_ENV}).")
@click.option("--server", default=None, help="Run on a service at this URL and wait for it.")
def optimize(grid_path, config_path, seed, budget_seconds, out, server) -> None:
    """Run import, DC optimization and AC validation; write the reports.

    Exit code 0 when at least one topology was accepted or the grid had no
    overload to begin with, 1 otherwise, 2 on errors.
    """
    try:
        cfg = load_config(
            config_path, grid=grid_path, seed=seed, total_seconds=budget_seconds, report_dir=out,
        )
        if cfg.grid is None:
            raise TopoError("no grid: pass --grid or set it in the config")
        if server:
            sys.exit(_optimize_remote(server, cfg))
        from topoqd.pipeline import run_pipeline

        result = run_pipeline(cfg)
    except (TopoError, OSError) as exc:
        _fail(exc)
    rep = result.report
    _echo_json({
        "report_dir": str(result.outdir),
        "pre_overload": rep.pre_overload,
        "best_overload": rep.best_overload,
        "accepted": rep.n_accepted,
        "evaluations": rep.total_evaluations,
        "exit_code": result.exit_code,
    })
    sys.exit(result.exit_code)


def _optimize_remote(server: str, cfg: RunConfig) -> int:
    data = cfg.model_dump(mode="json")
    data["grid"] = str(Path(data["grid"]).resolve())
    data["report_dir"] = str(cfg.resolved_report_dir().resolve())
    status = _server_call(server, "POST", "/runs", {"config": data})
    run_id = status["run_id"]
    while status["state"] == "running":
        time.sleep(0.5)
        status = _server_call(server, "GET", f"/runs/{run_id}")
    if status["state"] == "failed":
        raise TopoError(status["error"])
    report = _server_call(server, "GET", f"/runs/{run_id}/report")
    _echo_json({"run_id": run_id, "report_dir": status["report_dir"], **report})
    return status["exit_code"]


@main.command()
@click.option("--out", "out", type=click.Path(file_okay=False), default=None,
              help=f"Report directory holding the validation log (overridden by ${REPORT_DIR_ENV}).")
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None,
              help="Validation log to read; defaults to <out>/validation.jsonl.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--server", default=None)
def report(out, log_path, config_path, server) -> None:
    """Rebuild the report files from a validation log."""
    from topoqd.pipeline import LOG_NAME, exit_code, report_from_log

    try:
        cfg = load_config(config_path, report_dir=out)
        outdir = cfg.resolved_report_dir()
        log_path = Path(log_path) if log_path else outdir / LOG_NAME
        if server:
            payload = {"log": str(log_path.resolve()), "out": str(outdir.resolve())}
            _echo_json(_server_call(server, "POST", "/report", payload))
            return
        rep = report_from_log(log_path, outdir)
    except (TopoError, OSError, KeyError, ValueError) as exc:
        _fail(exc)
    _echo_json({
        "report_dir": str(outdir),
        "pre_overload": rep.pre_overload,
        "best_overload": rep.best_overload,
        "accepted": rep.n_accepted,
        "rejections": rep.rejections,
        "exit_code": exit_code(rep),
    })


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
def serve(host: str, port: int) -> None:
    """Start the HTTP service."""
    import uvicorn

    uvicorn.run("topoqd.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
