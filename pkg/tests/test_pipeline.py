import json
import threading

import pytest

from topoqd.config import REPORT_DIR_ENV, RunConfig
from topoqd.errors import StageError
from topoqd.pipeline import (
    EMPTY_CELL,
    LOG_NAME,
    REPORT_FILES,
    SnapshotChannel,
    aggregate,
    exit_code,
    read_log,
    report_from_log,
    run_pipeline,
)
from topoqd.qd.repertoire import RepertoireSnapshot

from conftest import data_path


def snap(epoch, final=False):
    return RepertoireSnapshot(epoch, epoch * 10, 0.0, (), final)


def test_channel_drops_oldest_but_keeps_final():
    ch = SnapshotChannel(2, "drop_oldest")
    for e in range(5):
        ch.put(snap(e))
    assert ch.dropped == 3 and ch.sent == 5
    assert [ch.get(0).epoch for _ in range(2)] == [3, 4]
    ch.put(snap(5, final=True))
    ch.put(snap(6))
    ch.put(snap(7))
    got = [ch.get(0) for _ in range(2)]
    assert got[0].final and got[1].epoch == 7
    ch.close()
    assert ch.get(0) is None and ch.drained


def test_channel_block_policy_waits_for_consumer():
    ch = SnapshotChannel(1, "block")
    ch.put(snap(0))
    done = threading.Event()

    def producer():
        ch.put(snap(1))
        done.set()

    t = threading.Thread(target=producer)
    t.start()
    assert not done.wait(0.3)
    assert ch.get(1).epoch == 0
    assert done.wait(2)
    t.join()
    assert ch.get(1).epoch == 1 and ch.dropped == 0


def deterministic_config(tmp_path, **extra):
    base = {
        "grid": data_path("congestion14.json"),
        "report_dir": str(tmp_path),
        "total_seconds": 120,
        "queue_policy": "block",
        "optimizer": {"max_evaluations": 3000, "iters_per_epoch": 20},
    }
    base.update(extra)
    return RunConfig.model_validate(base)


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_pipeline(deterministic_config(out))


def test_run_writes_all_reports(finished_run):
    for name in (*REPORT_FILES, LOG_NAME):
        assert (finished_run.outdir / name).is_file()
    rep = finished_run.report
    assert finished_run.exit_code == 0 and rep.n_accepted >= 1
    assert rep.best_overload < rep.pre_overload
    assert sum(rep.rejections.values()) == pytest.approx(100.0)
    info = json.loads((finished_run.outdir / "run.json").read_text())
    assert info["total_evaluations"] == 3000 and "runtime" in info


def test_heatmap_is_the_min_over_accepted_records(finished_run):
    entries = read_log(finished_run.outdir / LOG_NAME)
    rep = aggregate(entries)
    cells = {}
    for e in entries:
        if e["type"] == "validation" and e["verdict"] == "accepted":
            key = (e["dc"]["n_splits"], e["dc"]["n_disconnections"])
            cells[key] = min(cells.get(key, float("inf")), e["ac_overload"])
    for s, row in enumerate(rep.heatmap):
        for d, v in enumerate(row):
            if (s, d) == (0, 0):
                assert v == entries[0]["ac_overload"]
            elif (s, d) in cells:
                assert v == cells[(s, d)]
            else:
                assert v is None and rep.accepted_counts[s][d] == 0
    assert sum(map(sum, rep.accepted_counts)) == rep.n_accepted


def test_report_reaggregation_is_identical(finished_run, tmp_path):
    before = {n: (finished_run.outdir / n).read_bytes() for n in REPORT_FILES}
    rep = report_from_log(finished_run.outdir / LOG_NAME)
    assert rep.to_dict() == finished_run.report.to_dict()
    for n in REPORT_FILES:
        assert (finished_run.outdir / n).read_bytes() == before[n]


def test_heatmap_csv_layout(finished_run):
    lines = (finished_run.outdir / "heatmap_overload.csv").read_text().splitlines()
    assert lines[0] == "splits/disconnections,0,1,2"
    assert len(lines) == 5
    first = lines[1].split(",")
    assert first[0] == "0" and float(first[1]) == pytest.approx(finished_run.report.pre_overload, abs=1e-3)


def test_same_seed_same_bytes(finished_run, tmp_path):
    again = run_pipeline(deterministic_config(tmp_path, report_dir=str(finished_run.outdir)))
    assert again.outdir == finished_run.outdir
    other = run_pipeline(deterministic_config(tmp_path))
    for name in REPORT_FILES[:-1]:
        assert (other.outdir / name).read_bytes() == (finished_run.outdir / name).read_bytes()
    a = json.loads((other.outdir / "run.json").read_text())
    b = json.loads((finished_run.outdir / "run.json").read_text())
    a.pop("runtime"), b.pop("runtime")
    assert a == b


def test_overload_free_grid(tmp_path):
    doc = json.loads(open(data_path("ieee14.json")).read())
    for b in doc["branches"]:
        b["limit_mw"] = 1000.0
    path = tmp_path / "grid.json"
    path.write_text(json.dumps(doc))
    res = run_pipeline(deterministic_config(tmp_path / "out", grid=str(path),
                                           optimizer={"max_evaluations": 200}))
    assert res.exit_code == 0 and res.report.n_accepted == 0
    lines = (res.outdir / "heatmap_overload.csv").read_text().splitlines()
    cells = [line.split(",")[1:] for line in lines[1:]]
    assert float(cells[0][0]) == 0.0
    assert all(c == EMPTY_CELL for i, row in enumerate(cells) for j, c in enumerate(row) if (i, j) != (0, 0))


def test_env_var_overrides_report_dir(tmp_path, monkeypatch):
    target = tmp_path / "from_env"
    monkeypatch.setenv(REPORT_DIR_ENV, str(target))
    cfg = deterministic_config(tmp_path / "ignored", optimizer={"max_evaluations": 100})
    assert cfg.resolved_report_dir() == target
    res = run_pipeline(cfg)
    assert res.outdir == target and (target / "run.json").is_file()
    assert not (tmp_path / "ignored").exists()


def test_missing_grid_is_an_import_stage_error(tmp_path):
    with pytest.raises(StageError) as info:
        run_pipeline(deterministic_config(tmp_path, grid=str(tmp_path / "nope.json")))
    assert info.value.stage == "import"


def test_exit_code_without_acceptances(finished_run):
    rep = aggregate([e for e in read_log(finished_run.outdir / LOG_NAME)
                     if e["type"] != "validation" or not e["verdict"] == "accepted"])
    assert rep.n_accepted == 0 and exit_code(rep) == 1
