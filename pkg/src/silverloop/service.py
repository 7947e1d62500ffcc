"""HTTP facade for the annotation workflow.

Serves labeling and blinded adjudication queues, persists answers through
the append-only stores, exposes metrics, and triggers fine-tune rounds in a
background worker. All state mutation is serialized through one lock; no
response acknowledges an annotation before it is durable on disk.

Queue state is never stored separately: unanswered = queue items minus the
answers already in the store, so a restart reconstructs it exactly.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from typing import Optional

from fastapi import FastAPI, HTTPException, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .active import (
    AdjudicationRecord,
    AdjudicationStore,
    AnnotationRecord,
    AnnotationStore,
    DuplicateAnnotationError,
    RoundConfig,
    VERDICTS,
    now_timestamp,
    run_round,
)
from .core import (
    MentionClass,
    Task,
    read_corpus,
    read_labels,
    valid_classes,
)
from .evaluate import gold_accuracy, parity

DEFAULT_PORT = 8675
DATA_DIR_ENV = "SILVERLOOP_DATA"

LABEL_QUEUE_FILE = "queue_label.jsonl"
ADJUDICATION_QUEUE_FILE = "queue_adjudicate.jsonl"
UNBLINDING_FILE = "unblinding.json"
ANNOTATIONS_FILE = "annotations.jsonl"
ADJUDICATIONS_FILE = "adjudications.jsonl"


@dataclass(frozen=True)
class LabelQueueItem:
    item_id: str
    dedup_key: str
    report_id: str
    sentence_index: int
    text: str
    task: Task
    source: str  # heldout | active_round

    def to_public_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "dedup_key": self.dedup_key,
            "text": self.text,
            "task": self.task.value,
            "mode": "label",
            "choices": [c.key for c in valid_classes(self.task)],
        }


@dataclass(frozen=True)
class AdjudicateQueueItem:
    item_id: str
    dedup_key: str
    text: str
    task: Task
    label_a: MentionClass
    label_b: MentionClass

    def to_public_dict(self) -> dict:
        # blinded: label provenance never leaves the server
        return {
            "item_id": self.item_id,
            "dedup_key": self.dedup_key,
            "text": self.text,
            "task": self.task.value,
            "mode": "adjudicate",
            "label_a": self.label_a.key,
            "label_b": self.label_b.key,
            "choices": list(VERDICTS),
        }


def load_label_queue(path: str) -> list[LabelQueueItem]:
    items = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            row = json.loads(line)
            items.append(LabelQueueItem(
                item_id=row["item_id"],
                dedup_key=row["dedup_key"],
                report_id=row["report_id"],
                sentence_index=int(row["sentence_index"]),
                text=row["text"],
                task=Task(row["task"]),
                source=row["source"],
            ))
    return items


def load_adjudication_queue(path: str) -> list[AdjudicateQueueItem]:
    items = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            row = json.loads(line)
            items.append(AdjudicateQueueItem(
                item_id=row["item_id"],
                dedup_key=row["dedup_key"],
                text=row["text"],
                task=Task(row["task"]),
                label_a=MentionClass.from_key(row["label_a"]),
                label_b=MentionClass.from_key(row["label_b"]),
            ))
    return items


@dataclass
class ServiceConfig:
    data_dir: str
    corpus_path: Optional[str] = None
    teacher_labels_path: Optional[str] = None
    student_labels_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    rules_path: Optional[str] = None
    ui_dir: Optional[str] = None
    round_config: RoundConfig = field(default_factory=RoundConfig)


class _RoundState:
    def __init__(self) -> None:
        self.round_id: Optional[str] = None
        self.status: Optional[str] = None  # running | done | failed
        self.error: Optional[str] = None
        self.comparison: Optional[dict] = None
        self.checkpoint_path: Optional[str] = None
        self.counter = 0


class AnnotationServer:
    """All mutable state behind the HTTP endpoints."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        for name in ("corpus_path", "teacher_labels_path", "student_labels_path", "checkpoint_path", "rules_path"):
            path = getattr(config, name)
            if path is not None and not os.path.exists(path):
                raise FileNotFoundError(f"{name.replace('_', ' ')} does not exist: {path}")
        if config.rules_path:
            from .rules import load_rules

            load_rules(config.rules_path)  # fail fast on an invalid rule file
        os.makedirs(config.data_dir, exist_ok=True)
        self.lock = threading.Lock()
        self.store = AnnotationStore(os.path.join(config.data_dir, ANNOTATIONS_FILE))
        self.adjudications = AdjudicationStore(os.path.join(config.data_dir, ADJUDICATIONS_FILE))

        label_queue_path = os.path.join(config.data_dir, LABEL_QUEUE_FILE)
        self.label_queue = load_label_queue(label_queue_path) if os.path.exists(label_queue_path) else []
        adj_queue_path = os.path.join(config.data_dir, ADJUDICATION_QUEUE_FILE)
        self.adjudicate_queue = load_adjudication_queue(adj_queue_path) if os.path.exists(adj_queue_path) else []
        self._label_items = {item.item_id: item for item in self.label_queue}
        self._adjudicate_items = {item.item_id: item for item in self.adjudicate_queue}

        self.round_state = _RoundState()
        self._parity_cache: Optional[dict] = None

    # -- queue ------------------------------------------------------------

    def next_item(self, task: Optional[Task], mode: str, annotator: str) -> Optional[dict]:
        if mode == "label":
            for item in self.label_queue:
                if task is not None and item.task is not task:
                    continue
                if not self.store.answered(item.dedup_key, item.task, annotator, item.source):
                    return item.to_public_dict()
            return None
        for item in self.adjudicate_queue:
            if task is not None and item.task is not task:
                continue
            if not self.adjudications.answered(item.item_id, annotator, item.task):
                return item.to_public_dict()
        return None

    # -- answers ----------------------------------------------------------

    def record_label(self, item_id: str, label_key: str, annotator: str) -> None:
        item = self._label_items.get(item_id)
        if item is None:
            raise HTTPException(status_code=404, detail=f"unknown item {item_id!r}")
        try:
            label = MentionClass.from_key(label_key)
        except ValueError:
            raise HTTPException(status_code=422, detail=f"unknown label {label_key!r}") from None
        if label not in valid_classes(item.task):
            raise HTTPException(status_code=422, detail=f"{label_key} is not valid for {item.task.value}")
        record = AnnotationRecord(
            dedup_key=item.dedup_key,
            report_id=item.report_id,
            sentence_index=item.sentence_index,
            task=item.task,
            label=label,
            annotator_id=annotator,
            source=item.source,
            timestamp=now_timestamp(),
        )
        with self.lock:
            try:
                self.store.record(record)
            except DuplicateAnnotationError as exc:
                raise HTTPException(status_code=409, detail=str(exc)) from exc

    def record_verdict(self, item_id: str, verdict: str, annotator: str) -> None:
        item = self._adjudicate_items.get(item_id)
        if item is None:
            raise HTTPException(status_code=404, detail=f"unknown item {item_id!r}")
        if verdict not in VERDICTS:
            raise HTTPException(status_code=422, detail=f"unknown verdict {verdict!r}")
        record = AdjudicationRecord(
            dedup_key=item.dedup_key,
            task=item.task,
            verdict=verdict,
            annotator_id=annotator,
            blinding_id=item.item_id,
            timestamp=now_timestamp(),
        )
        with self.lock:
            try:
                self.adjudications.record(record)
            except DuplicateAnnotationError as exc:
                raise HTTPException(status_code=409, detail=str(exc)) from exc

    # -- metrics ----------------------------------------------------------

    def queue_depths(self) -> dict:
        depths: dict[str, dict[str, dict[str, int]]] = {"label": {}, "adjudicate": {}}
        labeled = {(r.dedup_key, r.task, r.source) for r in self.store.records()}
        adjudicated = {r.blinding_id for r in self.adjudications.records()}
        for item in self.label_queue:
            bucket = depths["label"].setdefault(item.task.value, {"answered": 0, "remaining": 0})
            answered = (item.dedup_key, item.task, item.source) in labeled
            bucket["answered" if answered else "remaining"] += 1
        for item in self.adjudicate_queue:
            bucket = depths["adjudicate"].setdefault(item.task.value, {"answered": 0, "remaining": 0})
            bucket["answered" if item.item_id in adjudicated else "remaining"] += 1
        return depths

    def metrics(self) -> dict:
        out: dict = {
            "queue": self.queue_depths(),
            "annotations": len(self.store),
            "adjudications": len(self.adjudications),
        }
        if self.round_state.round_id is not None:
            out["round"] = self._round_payload()
        parity_report = self._parity()
        if parity_report is not None:
            out["parity"] = parity_report
        gold = self._gold_accuracy()
        if gold is not None:
            out["gold_accuracy"] = gold
        return out

    def _parity(self) -> Optional[dict]:
        cfg = self.config
        if not (cfg.teacher_labels_path and cfg.student_labels_path):
            return None
        if self._parity_cache is None:
            report = parity(read_labels(cfg.teacher_labels_path), read_labels(cfg.student_labels_path))
            self._parity_cache = report.to_json_dict()
        return self._parity_cache

    def _gold_accuracy(self) -> Optional[dict]:
        if not self.config.student_labels_path or len(self.store) == 0:
            return None
        predictions = read_labels(self.config.student_labels_path)
        gold = [
            ((r.report_id, r.sentence_index), r.task, r.label)
            for r in self.store.records()
            if (r.report_id, r.sentence_index) in predictions
        ]
        if not gold:
            return None
        return gold_accuracy(gold, predictions).to_json_dict()

    # -- rounds -----------------------------------------------------------

    def _round_payload(self) -> dict:
        state = self.round_state
        payload: dict = {"round_id": state.round_id, "status": state.status}
        if state.error:
            payload["error"] = state.error
        if state.comparison is not None:
            payload["comparison"] = state.comparison
        if state.checkpoint_path:
            payload["checkpoint_path"] = state.checkpoint_path
        return payload

    def start_round(self) -> dict:
        cfg = self.config
        if not (cfg.corpus_path and cfg.teacher_labels_path and cfg.checkpoint_path):
            raise HTTPException(
                status_code=400,
                detail="server not configured for rounds (need corpus, teacher labels, checkpoint)",
            )
        with self.lock:
            if self.round_state.status == "running":
                raise HTTPException(status_code=409, detail="a round is already running")
            self.round_state.counter += 1
            round_id = f"round-{self.round_state.counter}"
            self.round_state.round_id = round_id
            self.round_state.status = "running"
            self.round_state.error = None
            self.round_state.comparison = None
        worker = threading.Thread(target=self._run_round, name=round_id, daemon=True)
        worker.start()
        return {"round_id": round_id, "status": "running"}

    def _run_round(self) -> None:
        from .surrogate import load_checkpoint, save_checkpoint

        cfg = self.config
        try:
            sentences = {(r.report_id, r.sentence_index): r for r in read_corpus(cfg.corpus_path)}
            teacher = read_labels(cfg.teacher_labels_path)
            model = load_checkpoint(cfg.checkpoint_path)
            result = run_round(sentences, teacher, model, self.store, cfg.round_config)
            out_path = os.path.join(cfg.data_dir, f"checkpoint_{self.round_state.round_id}.json")
            save_checkpoint(out_path, result.model)
            with self.lock:
                self.round_state.status = "done"
                self.round_state.comparison = result.comparison
                self.round_state.checkpoint_path = out_path
        except Exception as exc:  # surfaced via the poll endpoint
            with self.lock:
                self.round_state.status = "failed"
                self.round_state.error = str(exc)

    def round_status(self, round_id: str) -> dict:
        if self.round_state.round_id != round_id:
            raise HTTPException(status_code=404, detail=f"unknown round {round_id!r}")
        return self._round_payload()


class AnnotationIn(BaseModel):
    item_id: str
    label: str
    annotator: str


class AdjudicationIn(BaseModel):
    item_id: str
    verdict: str
    annotator: str


def create_app(config: ServiceConfig) -> FastAPI:
    server = AnnotationServer(config)
    app = FastAPI(title="silverloop annotation service")
    app.state.server = server

    @app.get("/api/v1/queue/next")
    def queue_next(mode: str, annotator: str, task: Optional[str] = None):
        if mode not in ("label", "adjudicate"):
            raise HTTPException(status_code=400, detail=f"unknown mode {mode!r}")
        task_filter: Optional[Task] = None
        if task is not None:
            try:
                task_filter = Task(task)
            except ValueError:
                raise HTTPException(status_code=400, detail=f"unknown task {task!r}") from None
        item = server.next_item(task_filter, mode, annotator)
        if item is None:
            return Response(status_code=204)
        return item

    @app.post("/api/v1/annotations")
    def post_annotation(body: AnnotationIn):
        server.record_label(body.item_id, body.label, body.annotator)
        return {"status": "ok", "item_id": body.item_id}

    @app.post("/api/v1/adjudications")
    def post_adjudication(body: AdjudicationIn):
        server.record_verdict(body.item_id, body.verdict, body.annotator)
        return {"status": "ok", "item_id": body.item_id}

    @app.get("/api/v1/metrics")
    def get_metrics():
        return server.metrics()

    @app.post("/api/v1/rounds")
    def post_round():
        return server.start_round()

    @app.get("/api/v1/rounds/{round_id}")
    def get_round(round_id: str):
        return server.round_status(round_id)

    if config.ui_dir and os.path.isdir(config.ui_dir):
        app.mount("/", StaticFiles(directory=config.ui_dir, html=True), name="ui")

    return app


def write_label_queue(path: str, rows: list[dict]) -> None:
    """Persist label-queue items (as produced by the heldout/select CLIs)."""
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")))
            handle.write("\n")


def serve(config: ServiceConfig, port: int = DEFAULT_PORT, host: str = "127.0.0.1") -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=host, port=port, log_level="warning")
