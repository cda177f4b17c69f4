import json

from click.testing import CliRunner

from topoqd.cli import main
from topoqd.config import REPORT_DIR_ENV

from conftest import data_path


def write_config(path, **extra):
    cfg = {"queue_policy": "block", "optimizer": {"max_evaluations": 1500, "iters_per_epoch": 20}}
    cfg.update(extra)
    path.write_text(json.dumps(cfg))
    return str(path)


def test_import_writes_cache(tmp_path):
    cache = tmp_path / "actions.json"
    res = CliRunner().invoke(main, ["import", "--grid", data_path("congestion14.json"), "--out", str(cache)])
    assert res.exit_code == 0, res.output
    body = json.loads(res.output)
    assert body["n_actions"] > 0 and cache.is_file()


def test_optimize_then_report(tmp_path):
    out = tmp_path / "reports"
    cfg = write_config(tmp_path / "cfg.json")
    runner = CliRunner()
    res = runner.invoke(main, ["optimize", "--grid", data_path("congestion14.json"), "--config", cfg,
                               "--seed", "3", "--budget-seconds", "60", "--out", str(out)])
    assert res.exit_code == 0, res.output
    summary = json.loads(res.output)
    assert summary["accepted"] >= 1 and summary["evaluations"] == 1500
    heat = (out / "heatmap_overload.csv").read_bytes()
    (out / "heatmap_overload.csv").unlink()

    res = runner.invoke(main, ["report", "--out", str(out)])
    assert res.exit_code == 0, res.output
    assert (out / "heatmap_overload.csv").read_bytes() == heat
    assert json.loads(res.output)["rejections"]["accepted"] > 0


def test_env_var_report_dir(tmp_path):
    target = tmp_path / "env"
    cfg = write_config(tmp_path / "cfg.json", optimizer={"max_evaluations": 200})
    res = CliRunner(env={REPORT_DIR_ENV: str(target)}).invoke(
        main, ["optimize", "--grid", data_path("congestion14.json"), "--config", cfg, "--out", str(tmp_path / "x")])
    assert res.exit_code in (0, 1), res.output
    assert (target / "run.json").is_file() and not (tmp_path / "x").exists()


def test_bad_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optimizer": {"cell_capacity": -1}}))
    res = CliRunner().invoke(main, ["optimize", "--grid", data_path("congestion14.json"), "--config", str(bad)])
    assert res.exit_code == 2 and "error" in res.output


def test_report_without_log_exits_2(tmp_path):
    res = CliRunner().invoke(main, ["report", "--out", str(tmp_path)])
    assert res.exit_code == 2
