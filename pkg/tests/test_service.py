import time

import pytest
from fastapi.testclient import TestClient

from topoqd.service.app import create_app

from conftest import data_path


@pytest.fixture
def client():
    return TestClient(create_app())


def test_health(client):
    assert client.get("/health").json() == {"status": "ok"}


def test_import_endpoint(client, tmp_path):
    cache = tmp_path / "actions.json"
    resp = client.post("/import", json={"grid": data_path("congestion14.json"), "action_cache": str(cache)})
    assert resp.status_code == 200
    body = resp.json()
    assert body["n_actions"] == sum(body["actions_per_station"].values())
    assert "L5-6" in body["disconnectables"] and cache.is_file()


def test_import_of_missing_grid_is_422(client, tmp_path):
    assert client.post("/import", json={"grid": str(tmp_path / "x.json")}).status_code == 422


def test_run_lifecycle_and_report(client, tmp_path):
    config = {
        "grid": data_path("congestion14.json"),
        "report_dir": str(tmp_path),
        "queue_policy": "block",
        "optimizer": {"max_evaluations": 1500, "iters_per_epoch": 20},
    }
    resp = client.post("/runs", json={"config": config})
    assert resp.status_code == 202
    run_id = resp.json()["run_id"]
    deadline = time.monotonic() + 60
    status = resp.json()
    while status["state"] == "running" and time.monotonic() < deadline:
        time.sleep(0.2)
        status = client.get(f"/runs/{run_id}").json()
    assert status["state"] == "finished" and status["exit_code"] == 0
    report = client.get(f"/runs/{run_id}/report").json()
    assert report["n_accepted"] >= 1 and report["total_evaluations"] == 1500

    rebuilt = client.post("/report", json={"log": str(tmp_path / "validation.jsonl")}).json()
    assert rebuilt == report


def test_invalid_config_rejected(client):
    resp = client.post("/runs", json={"config": {"optimizer": {"batch_size": 0}}})
    assert resp.status_code == 422
    resp = client.post("/runs", json={"config": {"unknown_field": 1}})
    assert resp.status_code == 422


def test_unknown_run_is_404(client):
    assert client.get("/runs/nope").status_code == 404
    assert client.post("/runs/nope/stop").status_code == 404
