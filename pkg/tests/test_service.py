from __future__ import annotations

import threading
import time

import pytest
from fastapi.testclient import TestClient

from expertloop.service import RunManager, create_app
from expertloop.streamgen import RuleDomainSpec, make_rule_discovery_task
from expertloop.stream import write_stream


@pytest.fixture()
def task_files(tmp_path):
    spec = RuleDomainSpec(n=12, n_rules=2, seed=31)
    instances, table, phases = make_rule_discovery_task(spec)
    write_stream(tmp_path / "stream.jsonl", instances)
    table.write(tmp_path / "truth.jsonl", tmp_path / "pack.json")
    return {
        "stream_path": str(tmp_path / "stream.jsonl"),
        "truth_path": str(tmp_path / "truth.jsonl"),
        "oracle_pack_path": str(tmp_path / "pack.json"),
        "phases": [p.to_dict() for p in phases],
    }


@pytest.fixture()
def client(tmp_path):
    manager = RunManager(base_dir=tmp_path / "runs")
    app = create_app(manager)
    return TestClient(app)


def scripted_config(task_files, **kw):
    config = {
        "budget": 10,
        "cost_mode": "uniform",
        "oracle": "scripted",
        "llm": "mock",
        "policy": "guided",
        "stream_path": task_files["stream_path"],
        "truth_path": task_files["truth_path"],
        "oracle_pack_path": task_files["oracle_pack_path"],
    }
    config.update(kw)
    return config


class TestRunLifecycle:
    def test_create_advance_metrics(self, client, task_files):
        created = client.post("/runs", json=scripted_config(task_files)).json()
        run_id = created["run_id"]
        assert created["status"] == "idle"
        out = client.post(f"/runs/{run_id}/advance", params={"steps": 10}).json()
        assert out["processed"] == 10
        metrics = client.get(f"/runs/{run_id}/metrics").json()
        assert metrics["metrics"]["overall"]["n"] == 10
        assert "accuracy" in metrics["metrics"]["overall"]
        final = client.post(f"/runs/{run_id}/advance", params={"steps": 99}).json()
        assert final["status"] == "finished"
        assert final["processed"] == 12

    def test_invalid_config_400(self, client, task_files):
        bad = scripted_config(task_files, budget=-1)
        response = client.post("/runs", json=bad)
        assert response.status_code == 400

    def test_unknown_run_404(self, client):
        assert client.get("/runs/run-9999").status_code == 404

    def test_events_endpoint_from_seq(self, client, task_files):
        run_id = client.post("/runs", json=scripted_config(task_files)).json()["run_id"]
        client.post(f"/runs/{run_id}/advance", params={"steps": 3})
        all_events = client.get(f"/runs/{run_id}/events").json()["events"]
        tail = client.get(f"/runs/{run_id}/events", params={"from": 5}).json()["events"]
        assert all_events[0]["seq"] == 1
        assert all_events[0]["kind"] == "run_control"
        assert tail[0]["seq"] == 5
        beyond = client.get(f"/runs/{run_id}/events", params={"from": 10_000}).json()["events"]
        assert beyond == []

    def test_two_runs_have_isolated_logs(self, client, task_files, tmp_path):
        a = client.post("/runs", json=scripted_config(task_files)).json()["run_id"]
        b = client.post("/runs", json=scripted_config(task_files)).json()["run_id"]
        client.post(f"/runs/{a}/advance", params={"steps": 2})
        client.post(f"/runs/{b}/advance", params={"steps": 5})
        ea = client.get(f"/runs/{a}/events").json()["events"]
        eb = client.get(f"/runs/{b}/events").json()["events"]
        assert {e["payload"].get("run_id") for e in ea if e["kind"] == "run_control"} == {a}
        assert {e["payload"].get("run_id") for e in eb if e["kind"] == "run_control"} == {b}
        assert len(ea) != len(eb)

    def test_budget_endpoint_tracks_ledger(self, client, task_files):
        run_id = client.post("/runs", json=scripted_config(task_files)).json()["run_id"]
        client.post(f"/runs/{run_id}/advance", params={"steps": 12})
        budget = client.get(f"/runs/{run_id}/budget").json()
        assert budget["total"] == 10
        assert budget["spent"] == len(budget["entries"]) >= 1
        assert budget["remaining"] == budget["total"] - budget["spent"]


class TestKrEndpoints:
    def test_items_filter_by_status_and_text(self, client, task_files):
        run_id = client.post("/runs", json=scripted_config(task_files)).json()["run_id"]
        client.post(f"/runs/{run_id}/advance", params={"steps": 12})
        items = client.get(f"/kr/{run_id}/items").json()["items"]
        assert items
        valid = client.get(f"/kr/{run_id}/items", params={"status": "Valid"}).json()["items"]
        assert all(item["status"] == "Valid" for item in valid)
        r0 = client.get(f"/kr/{run_id}/items", params={"q": "marker R0"}).json()["items"]
        assert all("R0" in item["content"]["text"] for item in r0)
        superseded = client.get(f"/kr/{run_id}/items", params={"status": "Superseded"}).json()["items"]
        assert superseded == []

    def test_item_detail_and_404(self, client, task_files):
        run_id = client.post("/runs", json=scripted_config(task_files)).json()["run_id"]
        client.post(f"/runs/{run_id}/advance", params={"steps": 12})
        items = client.get(f"/kr/{run_id}/items").json()["items"]
        kid = items[0]["kid"]
        detail = client.get(f"/kr/{run_id}/items/{kid}").json()
        assert detail["item"]["kid"] == kid
        assert client.get(f"/kr/{run_id}/items/ghost").status_code == 404


class TestHumanOracleFlow:
    def human_config(self, task_files):
        config = scripted_config(task_files, oracle="human", policy="random", random_rate=1.0)
        config.pop("truth_path")
        config.pop("oracle_pack_path")
        config["human_timeout_s"] = 10.0
        return config

    def test_pending_answer_unblocks_and_charges(self, client, task_files):
        run_id = client.post("/runs", json=self.human_config(task_files)).json()["run_id"]
        client.post(f"/runs/{run_id}/advance", params={"steps": 1, "wait": "false"})
        pending = []
        for _ in range(200):
            pending = client.get(f"/runs/{run_id}/queries/pending").json()["pending"]
            if pending:
                break
            time.sleep(0.01)
        assert pending, "expected a pending human query"
        entry = pending[0]
        qid = entry["query"]["qid"]
        assert entry["query"]["kind"] == "AskLabel"
        assert entry["status"] == "pending"
        answer = client.post(f"/queries/{qid}/answer", json={"text": "True label: Match.", "label": "Match"})
        assert answer.status_code == 200
        for _ in range(200):
            snap = client.get(f"/runs/{run_id}").json()
            if snap["status"] in ("idle", "finished") and snap["processed"] >= 1:
                break
            time.sleep(0.01)
        assert snap["processed"] == 1
        budget = client.get(f"/runs/{run_id}/budget").json()
        assert budget["spent"] == 1

    def test_double_answer_conflict(self, client, task_files):
        run_id = client.post("/runs", json=self.human_config(task_files)).json()["run_id"]
        client.post(f"/runs/{run_id}/advance", params={"steps": 1, "wait": "false"})
        qid = None
        for _ in range(200):
            pending = client.get(f"/runs/{run_id}/queries/pending").json()["pending"]
            if pending:
                qid = pending[0]["query"]["qid"]
                break
            time.sleep(0.01)
        assert qid
        first = client.post(f"/queries/{qid}/answer", json={"text": "True label: Match.", "label": "Match"})
        second = client.post(f"/queries/{qid}/answer", json={"text": "me too", "label": "Match"})
        assert first.status_code == 200
        assert second.status_code == 409

    def test_answer_unknown_query_404(self, client):
        assert client.post("/queries/q-none/answer", json={"text": "x"}).status_code == 404


class TestAuth:
    def test_token_enforced(self, tmp_path, task_files):
        manager = RunManager(base_dir=tmp_path / "runs")
        app = create_app(manager, auth_token="sekrit")
        client = TestClient(app)
        assert client.get("/healthz").status_code == 200
        denied = client.post("/runs", json=scripted_config(task_files))
        assert denied.status_code == 401
        ok = client.post("/runs", json=scripted_config(task_files), headers={"X-Auth-Token": "sekrit"})
        assert ok.status_code == 200
