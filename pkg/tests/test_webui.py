import json
import os
from pathlib import Path

import pytest

from transduce.runner import make_backend, run_workflow
from transduce.workflow import compile_workflow_file
from webui.server.app import app

DEMO = str(Path(__file__).resolve().parents[1] / "demo" / "discovery" / "workflow.json")
KEY = {"X-API-Key": "test-key"}


@pytest.fixture
def client(runs_dir):
    app.config.update(TESTING=True, API_KEY="test-key")
    with app.test_client() as c:
        yield c
    app.config.pop("API_KEY", None)


@pytest.fixture
def demo_run(runs_dir):
    compiled = compile_workflow_file(DEMO)
    outcome = run_workflow(compiled, make_backend("mock", compiled), backend_name="mock")
    return os.path.basename(outcome.run_dir)


def test_api_needs_key(client, demo_run):
    assert client.get("/api/runs").status_code == 401
    assert client.get("/api/runs", headers={"X-API-Key": "wrong"}).status_code == 401
    assert client.get("/api/runs", headers=KEY).status_code == 200


def test_docs_are_public(client):
    r = client.get("/api/docs")
    assert r.status_code == 200
    assert b"openapi" in r.data


def test_latest_summary(client, demo_run):
    body = client.get("/api/latest_run_summary", headers=KEY).get_json()
    assert body["run_dir"] == demo_run
    assert body["data"]["status"] == "success"


def test_latest_summary_without_runs(client):
    assert client.get("/api/latest_run_summary", headers=KEY).status_code == 404


def test_outputs_trace_and_lineage(client, demo_run):
    outputs = client.get(f"/api/runs/{demo_run}/outputs", headers=KEY).get_json()
    assert outputs["partial"] is False
    assert outputs["type"] == "Answer"

    records = client.get(f"/api/runs/{demo_run}/trace", headers=KEY).get_json()
    assert len(records) == 11
    assert client.get(f"/api/runs/{demo_run}/trace?status=error", headers=KEY).get_json() == []

    lin = client.get(f"/api/runs/{demo_run}/lineage/3", headers=KEY).get_json()
    assert lin["chain"] == [3, 2, 1]
    assert lin["evidence"]["evidence"] == ["finding"]
    assert lin["source"] == "Observation"

    assert client.get(f"/api/runs/{demo_run}/lineage/999", headers=KEY).status_code == 404
    assert client.get("/api/runs/no-such-run/outputs", headers=KEY).status_code == 404


def test_save_run_and_list(client, demo_run):
    assert client.get("/api/runs", headers=KEY).get_json() == []
    r = client.post("/api/save_run", headers=KEY, data=json.dumps({"run_dir": demo_run, "notes": "baseline"}))
    assert r.get_json() == {"status": "saved", "run_dir": demo_run, "notes": "baseline"}
    (saved,) = client.get("/api/runs", headers=KEY).get_json()
    assert saved["dir"] == demo_run
    assert saved["workflow"] == "discovery"
    summary = client.get(f"/api/runs/{demo_run}/summary", headers=KEY).get_json()
    assert summary["notes"] == "baseline" and summary["saved"] is True

    assert client.post("/api/save_run", headers=KEY, data="{}").status_code == 400


def test_download(client, demo_run):
    r = client.get(f"/api/download?dir={demo_run}&filename=outputs.json", headers=KEY)
    assert r.status_code == 200
    assert json.loads(r.data)["workflow"] == "discovery"
    assert r.headers["Cache-Control"].startswith("no-store")

    assert client.get(f"/api/download?dir={demo_run}&filename=../../secret", headers=KEY).status_code == 400
    assert client.get("/api/download?filename=trace.jsonl", headers=KEY).status_code == 200
    assert client.get("/api/download?dir=missing&filename=outputs.json", headers=KEY).status_code == 404
