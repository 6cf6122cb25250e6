"""HTTP service: run lifecycle, the human-expert queue, repository inspection.

Each run owns its state, its append-only log file, and (for human-oracle
runs) a pending-query queue. Advancing a run is serialized per run by a
mutex, so all mutations flow through one writer; reads return snapshot
copies. Expert answers land via compare-and-set on the pending query and
wake the blocked step.
"""

from __future__ import annotations

import threading
from pathlib import Path
from typing import Optional

from fastapi import Body, Depends, FastAPI, Header, HTTPException, Query as QueryParam
from fastapi.middleware.cors import CORSMiddleware

from .config import AssembledRun, RunConfig, build_run, load_config
from .errors import AnswerConflict, ConfigInvalid, ExpertLoopError
from .harness import step
from .metrics import render_metrics_table


class RunHandle:
    def __init__(self, run_id: str, assembled: AssembledRun):
        self.run_id = run_id
        self.assembled = assembled
        self.state = assembled.state
        self.status = "idle"  # idle | running | waiting_human | finished | error
        self.error: Optional[str] = None
        self.position = 0  # next stream index
        self.advance_lock = threading.Lock()
        self.state.emit(
            "run_control",
            {
                "action": "start",
                "run_id": run_id,
                "budget": self.state.ledger.total,
                "seed": self.state.seed,
                "policy": getattr(assembled.policy, "name", type(assembled.policy).__name__),
                "phases": [p.to_dict() for p in self.state.phases],
                "labels": list(self.state.label_space.labels),
                "metrics_mode": self.state.metrics_mode,
            },
        )

    @property
    def total(self) -> int:
        return len(self.assembled.stream)

    def pending_queries(self) -> list[dict]:
        queue = self.assembled.human_queue
        if queue is None:
            return []
        return [entry.to_dict() for entry in queue.list_pending()]

    def snapshot(self) -> dict:
        return {
            "run_id": self.run_id,
            "status": self.status,
            "processed": self.state.processed,
            "total": self.total,
            "budget": {
                "total": self.state.ledger.total,
                "spent": self.state.ledger.spent,
                "remaining": self.state.ledger.total - self.state.ledger.spent,
            },
            "pending_queries": len(self.pending_queries()),
            "error": self.error,
        }

    def advance(self, steps: int) -> dict:
        """Run up to ``steps`` further instances (serialized per run)."""
        with self.advance_lock:
            if self.status in ("finished", "error"):
                return self.snapshot()
            self.status = "running"
            oracle = _StatusOracle(self.assembled.oracle, self)
            try:
                for _ in range(steps):
                    if self.position >= self.total:
                        break
                    x = self.assembled.stream[self.position]
                    step(self.state, x, oracle, self.assembled.policy, self.assembled.llm)
                    self.position += 1
            except ExpertLoopError as exc:
                self.status = "error"
                self.error = str(exc)
                self.state.emit("run_control", {"action": "error", "detail": str(exc)})
                return self.snapshot()
            if self.position >= self.total:
                self.status = "finished"
                metrics = self.state.build_metrics()
                self.state.emit(
                    "run_control",
                    {
                        "action": "finish",
                        "metrics": metrics.to_dict(),
                        "handling_cost_s": self.state.handling_cost_s,
                    },
                )
            else:
                self.status = "idle"
            return self.snapshot()


class _StatusOracle:
    """Flips the run status to waiting_human around a blocking expert answer."""

    def __init__(self, inner, handle: RunHandle):
        self.inner = inner
        self.handle = handle

    def answer(self, x, query, now):
        blocking = self.handle.assembled.human_queue is not None
        if blocking:
            self.handle.status = "waiting_human"
        try:
            return self.inner.answer(x, query, now)
        finally:
            if blocking:
                self.handle.status = "running"


class RunManager:
    def __init__(self, base_dir: str | Path = "runs"):
        self.base_dir = Path(base_dir)
        self.base_dir.mkdir(parents=True, exist_ok=True)
        self._runs: dict[str, RunHandle] = {}
        self._lock = threading.Lock()
        self._counter = 0

    def create(self, config: RunConfig) -> RunHandle:
        with self._lock:
            self._counter += 1
            run_id = f"run-{self._counter:04d}"
        log_path = str(self.base_dir / f"{run_id}.log")
        import dataclasses

        config = dataclasses.replace(config, log_path=log_path, run_id=run_id)
        assembled = build_run(config, run_id=run_id)
        handle = RunHandle(run_id, assembled)
        with self._lock:
            self._runs[run_id] = handle
        return handle

    def get(self, run_id: str) -> RunHandle:
        try:
            return self._runs[run_id]
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}") from None

    def find_query(self, qid: str) -> tuple[RunHandle, object]:
        for handle in list(self._runs.values()):
            queue = handle.assembled.human_queue
            if queue is not None:
                entry = queue.get(qid)
                if entry is not None:
                    return handle, queue
        raise HTTPException(status_code=404, detail=f"unknown query {qid}")


def create_app(manager: RunManager, auth_token: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="expertloop service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    def check_auth(x_auth_token: Optional[str] = Header(default=None)):
        if auth_token and x_auth_token != auth_token:
            raise HTTPException(status_code=401, detail="bad or missing X-Auth-Token")

    guarded = [Depends(check_auth)]

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    @app.post("/runs", dependencies=guarded)
    def create_run(raw: dict = Body(...)):
        try:
            config = load_config(overrides=raw)
            handle = manager.create(config)
        except ConfigInvalid as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return handle.snapshot()

    @app.post("/runs/{run_id}/advance", dependencies=guarded)
    def advance(run_id: str, steps: int = QueryParam(default=1, ge=1), wait: bool = QueryParam(default=True)):
        handle = manager.get(run_id)
        if wait:
            return handle.advance(steps)
        thread = threading.Thread(target=handle.advance, args=(steps,), daemon=True)
        thread.start()
        return handle.snapshot()

    @app.get("/runs/{run_id}", dependencies=guarded)
    def get_run(run_id: str):
        return manager.get(run_id).snapshot()

    @app.get("/runs/{run_id}/metrics", dependencies=guarded)
    def get_metrics(run_id: str):
        handle = manager.get(run_id)
        metrics = handle.state.build_metrics()
        return {"run_id": run_id, "metrics": metrics.to_dict(), "table": render_metrics_table(metrics, run_id)}

    @app.get("/runs/{run_id}/events", dependencies=guarded)
    def get_events(run_id: str, from_seq: int = QueryParam(default=1, alias="from", ge=1)):
        handle = manager.get(run_id)
        records = handle.state.log.read_from(from_seq)
        return {
            "run_id": run_id,
            "events": [
                {"seq": r.seq, "ts": r.ts, "kind": r.kind, "payload": r.payload} for r in records
            ],
        }

    @app.get("/runs/{run_id}/queries/pending", dependencies=guarded)
    def pending(run_id: str):
        handle = manager.get(run_id)
        return {"run_id": run_id, "pending": handle.pending_queries()}

    @app.get("/runs/{run_id}/budget", dependencies=guarded)
    def budget(run_id: str):
        handle = manager.get(run_id)
        ledger = handle.state.ledger
        return {
            "run_id": run_id,
            "total": ledger.total,
            "spent": ledger.spent,
            "remaining": ledger.total - ledger.spent,
            "entries": [
                {"qid": qid, "kind": kind.value, "cost": cost, "ts": ts}
                for qid, kind, cost, ts in ledger.entries
            ],
        }

    @app.post("/queries/{qid}/answer", dependencies=guarded)
    def answer(qid: str, body: dict = Body(...)):
        text = str(body.get("text", ""))
        label = body.get("label")
        handle, queue = manager.find_query(qid)
        try:
            queue.submit_answer(qid, text, label, now=handle.state.now)
        except AnswerConflict as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown query {qid}") from None
        return {"qid": qid, "status": "answered"}

    @app.get("/kr/{run_id}/items", dependencies=guarded)
    def kr_items(run_id: str, status: Optional[str] = None, q: Optional[str] = None):
        handle = manager.get(run_id)
        items = [item.to_dict() for item in handle.state.kr.items()]
        if status:
            items = [item for item in items if item["status"] == status]
        if q:
            lowered = q.lower()
            items = [item for item in items if lowered in item["content"]["text"].lower()]
        return {"run_id": run_id, "items": items}

    @app.get("/kr/{run_id}/items/{kid}", dependencies=guarded)
    def kr_item(run_id: str, kid: str):
        handle = manager.get(run_id)
        if kid not in handle.state.kr:
            raise HTTPException(status_code=404, detail=f"unknown item {kid}")
        item = handle.state.kr.get(kid)
        lineage = []
        cursor = item
        seen = set()
        while cursor.meta.superseded_by and cursor.meta.superseded_by not in seen:
            seen.add(cursor.kid)
            nxt = cursor.meta.superseded_by
            if nxt not in handle.state.kr:
                break
            cursor = handle.state.kr.get(nxt)
            lineage.append(cursor.to_dict())
        return {"run_id": run_id, "item": item.to_dict(), "superseded_by_chain": lineage}

    return app


def serve(config_path: Optional[str], host: str, port: int, token: Optional[str], runs_dir: str) -> None:
    import json
    import os

    import uvicorn

    auth_token = token or os.environ.get("EXPERTLOOP_TOKEN")
    if config_path and not auth_token:
        try:
            auth_token = json.loads(Path(config_path).read_text(encoding="utf-8")).get("token")
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot read service config {config_path}: {exc}") from exc
    manager = RunManager(base_dir=runs_dir)
    app = create_app(manager, auth_token=auth_token)
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    except SystemExit as exc:  # uvicorn wraps bind failures
        from .errors import BindFailure

        raise BindFailure(f"could not serve on {host}:{port}") from exc
