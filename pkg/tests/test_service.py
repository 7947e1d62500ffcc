import json
import time

import pytest
from fastapi.testclient import TestClient

from silverloop.core import MentionClass, Task
from silverloop.service import (
    ServiceConfig,
    create_app,
    write_label_queue,
)


def label_queue_rows(n=4, task="edema", source="heldout"):
    return [
        {
            "item_id": f"ho-{i:05d}",
            "dedup_key": f"sentence {i}",
            "report_id": f"r{i}",
            "sentence_index": 0,
            "text": f"Sentence {i}.",
            "task": task,
            "source": source,
        }
        for i in range(n)
    ]


def adjudication_queue_rows(n=2):
    return [
        {
            "item_id": f"adj-edema-{i:04d}",
            "dedup_key": f"disputed {i}",
            "report_id": f"d{i}",
            "sentence_index": 0,
            "text": f"Disputed sentence {i}.",
            "task": "edema",
            "label_a": "positive",
            "label_b": "negative",
        }
        for i in range(n)
    ]


@pytest.fixture()
def client(tmp_path):
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    write_label_queue(str(data_dir / "queue_label.jsonl"), label_queue_rows())
    write_label_queue(str(data_dir / "queue_adjudicate.jsonl"), adjudication_queue_rows())
    app = create_app(ServiceConfig(data_dir=str(data_dir)))
    with TestClient(app) as test_client:
        yield test_client


class TestQueueNext:
    def test_returns_first_unanswered_item(self, client):
        response = client.get("/api/v1/queue/next", params={"mode": "label", "annotator": "a1", "task": "edema"})
        assert response.status_code == 200
        item = response.json()
        assert item["item_id"] == "ho-00000"
        assert item["mode"] == "label"
        assert item["choices"] == ["no_mention", "negative", "uncertain", "positive"]

    def test_idempotent_until_answered(self, client):
        first = client.get("/api/v1/queue/next", params={"mode": "label", "annotator": "a1"}).json()
        second = client.get("/api/v1/queue/next", params={"mode": "label", "annotator": "a1"}).json()
        assert first == second
        client.post("/api/v1/annotations", json={"item_id": first["item_id"], "label": "negative", "annotator": "a1"})
        third = client.get("/api/v1/queue/next", params={"mode": "label", "annotator": "a1"}).json()
        assert third["item_id"] != first["item_id"]

    def test_empty_queue_gives_204(self, client):
        for _ in range(4):
            item = client.get("/api/v1/queue/next", params={"mode": "label", "annotator": "a1"}).json()
            client.post("/api/v1/annotations", json={"item_id": item["item_id"], "label": "negative", "annotator": "a1"})
        response = client.get("/api/v1/queue/next", params={"mode": "label", "annotator": "a1"})
        assert response.status_code == 204

    def test_unknown_task_or_mode_rejected(self, client):
        assert client.get("/api/v1/queue/next", params={"mode": "label", "annotator": "a", "task": "zebra"}).status_code == 400
        assert client.get("/api/v1/queue/next", params={"mode": "guess", "annotator": "a"}).status_code == 400

    def test_adjudicate_items_are_blinded(self, client):
        item = client.get("/api/v1/queue/next", params={"mode": "adjudicate", "annotator": "a1"}).json()
        assert set(item) == {"item_id", "dedup_key", "text", "task", "mode", "label_a", "label_b", "choices"}
        assert item["choices"] == ["prefer_a", "prefer_b", "both_wrong", "unsure"]
        assert "reference" not in json.dumps(item)

    def test_per_annotator_progress(self, client):
        item = client.get("/api/v1/queue/next", params={"mode": "label", "annotator": "a1"}).json()
        client.post("/api/v1/annotations", json={"item_id": item["item_id"], "label": "negative", "annotator": "a1"})
        other = client.get("/api/v1/queue/next", params={"mode": "label", "annotator": "a2"}).json()
        assert other["item_id"] == item["item_id"]


class TestPostAnnotation:
    def test_valid_post_persists(self, client, tmp_path):
        client.post("/api/v1/annotations", json={"item_id": "ho-00001", "label": "positive", "annotator": "a1"})
        store_path = tmp_path / "data" / "annotations.jsonl"
        rows = [json.loads(l) for l in store_path.read_text().splitlines()]
        assert rows[-1]["dedup_key"] == "sentence 1"
        assert rows[-1]["label"] == "positive"

    def test_unknown_item_404(self, client):
        response = client.post("/api/v1/annotations", json={"item_id": "nope", "label": "positive", "annotator": "a1"})
        assert response.status_code == 404

    def test_duplicate_409(self, client):
        body = {"item_id": "ho-00002", "label": "uncertain", "annotator": "a1"}
        assert client.post("/api/v1/annotations", json=body).status_code == 200
        assert client.post("/api/v1/annotations", json=body).status_code == 409

    def test_invalid_label_422(self, tmp_path):
        data_dir = tmp_path / "data2"
        data_dir.mkdir()
        write_label_queue(str(data_dir / "queue_label.jsonl"), label_queue_rows(1, task="no_finding"))
        with TestClient(create_app(ServiceConfig(data_dir=str(data_dir)))) as client:
            response = client.post(
                "/api/v1/annotations",
                json={"item_id": "ho-00000", "label": "uncertain", "annotator": "a1"},
            )
            assert response.status_code == 422


class TestAdjudications:
    def test_verdict_persisted_verbatim(self, client, tmp_path):
        response = client.post(
            "/api/v1/adjudications",
            json={"item_id": "adj-edema-0000", "verdict": "both_wrong", "annotator": "a1"},
        )
        assert response.status_code == 200
        rows = [json.loads(l) for l in (tmp_path / "data" / "adjudications.jsonl").read_text().splitlines()]
        assert rows[0]["verdict"] == "both_wrong"
        assert rows[0]["blinding_id"] == "adj-edema-0000"

    def test_unknown_verdict_422(self, client):
        response = client.post(
            "/api/v1/adjudications",
            json={"item_id": "adj-edema-0000", "verdict": "love_both", "annotator": "a1"},
        )
        assert response.status_code == 422

    def test_duplicate_verdict_409(self, client):
        body = {"item_id": "adj-edema-0001", "verdict": "unsure", "annotator": "a1"}
        assert client.post("/api/v1/adjudications", json=body).status_code == 200
        assert client.post("/api/v1/adjudications", json=body).status_code == 409


class TestMetrics:
    def test_before_any_annotation_only_depths(self, client):
        metrics = client.get("/api/v1/metrics").json()
        assert metrics["annotations"] == 0
        assert metrics["queue"]["label"]["edema"] == {"answered": 0, "remaining": 4}
        assert "gold_accuracy" not in metrics
        assert "parity" not in metrics

    def test_counts_update_after_answers(self, client):
        for i in range(2):
            client.post("/api/v1/annotations", json={"item_id": f"ho-{i:05d}", "label": "negative", "annotator": "a1"})
        metrics = client.get("/api/v1/metrics").json()
        assert metrics["annotations"] == 2
        assert metrics["queue"]["label"]["edema"] == {"answered": 2, "remaining": 2}


class TestStartupValidation:
    def test_missing_configured_path_fails_fast(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="checkpoint"):
            create_app(ServiceConfig(data_dir=str(tmp_path / "d"), checkpoint_path=str(tmp_path / "nope.json")))

    def test_invalid_rules_file_fails_fast(self, tmp_path):
        bad = tmp_path / "rules.json"
        bad.write_text("{}")
        with pytest.raises(Exception, match="malformed"):
            create_app(ServiceConfig(data_dir=str(tmp_path / "d"), rules_path=str(bad)))


class TestCrashSafety:
    def test_restart_reconstructs_queue_state(self, tmp_path):
        data_dir = tmp_path / "data"
        data_dir.mkdir()
        write_label_queue(str(data_dir / "queue_label.jsonl"), label_queue_rows(3))
        config = ServiceConfig(data_dir=str(data_dir))
        with TestClient(create_app(config)) as client:
            item = client.get("/api/v1/queue/next", params={"mode": "label", "annotator": "a1"}).json()
            client.post("/api/v1/annotations", json={"item_id": item["item_id"], "label": "negative", "annotator": "a1"})
        # new process over the same data dir
        with TestClient(create_app(ServiceConfig(data_dir=str(data_dir)))) as reborn:
            next_item = reborn.get("/api/v1/queue/next", params={"mode": "label", "annotator": "a1"}).json()
            assert next_item["item_id"] == "ho-00001"
            metrics = reborn.get("/api/v1/metrics").json()
            assert metrics["queue"]["label"]["edema"] == {"answered": 1, "remaining": 2}


class TestRounds:
    def _world(self, tmp_path):
        import os
        from silverloop import corpus as corpus_mod, rules as rules_mod, surrogate
        from silverloop.core import write_corpus, write_labels

        data_dir = tmp_path / "data"
        data_dir.mkdir()
        ruleset = rules_mod.load_rules(os.path.join(os.path.dirname(__file__), "..", "rules", "fixture.json"))
        classifier = rules_mod.SentenceClassifier(ruleset)
        config = corpus_mod.GeneratorConfig(n_reports=150, sentences_per_report=(2, 4), seed=20)
        records = []
        labels = []
        for record, _ in corpus_mod.generate(config):
            records.append(record)
            labels.append((record.report_id, record.sentence_index, classifier.label(record.text)))
        write_corpus(str(tmp_path / "corpus.jsonl"), records)
        write_labels(str(tmp_path / "teacher.jsonl"), labels)
        dataset = [(r.text, lv) for r, (_, _, lv) in zip(records, labels)]
        model, _ = surrogate.train(dataset, surrogate.TrainConfig(epochs=1, seed=1), model_dims=(2**12, 16, 24))
        surrogate.save_checkpoint(str(tmp_path / "ckpt.json"), model)

        # annotations: a few heldout + a few active_round, disjoint by dedup key
        from silverloop.active import AnnotationRecord, AnnotationStore
        store = AnnotationStore(str(data_dir / "annotations.jsonl"))
        seen = set()
        heldout, active = [], []
        for record, (_, _, lv) in zip(records, labels):
            if record.dedup_key in seen:
                continue
            seen.add(record.dedup_key)
            (heldout if len(heldout) <= len(active) else active).append((record, lv))
        for source, bucket in (("heldout", heldout[:8]), ("active_round", active[:8])):
            for record, lv in bucket:
                store.record(AnnotationRecord(
                    dedup_key=record.dedup_key, report_id=record.report_id,
                    sentence_index=record.sentence_index, task=Task.EDEMA,
                    label=lv[Task.EDEMA], annotator_id="oracle", source=source,
                ))
        return ServiceConfig(
            data_dir=str(data_dir),
            corpus_path=str(tmp_path / "corpus.jsonl"),
            teacher_labels_path=str(tmp_path / "teacher.jsonl"),
            checkpoint_path=str(tmp_path / "ckpt.json"),
        )

    def test_round_runs_to_completion(self, tmp_path):
        config = self._world(tmp_path)
        with TestClient(create_app(config)) as client:
            response = client.post("/api/v1/rounds")
            assert response.status_code == 200
            round_id = response.json()["round_id"]
            for _ in range(200):
                status = client.get(f"/api/v1/rounds/{round_id}").json()
                if status["status"] != "running":
                    break
                time.sleep(0.05)
            assert status["status"] == "done", status
            assert "comparison" in status
            metrics = client.get("/api/v1/metrics").json()
            assert metrics["round"]["round_id"] == round_id

    def test_second_concurrent_round_409(self, tmp_path, monkeypatch):
        import threading
        import silverloop.service as service_mod

        release = threading.Event()

        def stalled_round(*args, **kwargs):
            release.wait(timeout=10)
            raise RuntimeError("stalled for test")

        monkeypatch.setattr(service_mod, "run_round", stalled_round)
        config = self._world(tmp_path)
        with TestClient(create_app(config)) as client:
            first = client.post("/api/v1/rounds")
            assert first.status_code == 200
            assert client.post("/api/v1/rounds").status_code == 409
            release.set()
            round_id = first.json()["round_id"]
            for _ in range(200):
                status = client.get(f"/api/v1/rounds/{round_id}").json()
                if status["status"] != "running":
                    break
                time.sleep(0.05)
            assert status["status"] == "failed"
            assert "stalled" in status["error"]

    def test_unconfigured_round_400(self, tmp_path):
        data_dir = tmp_path / "bare"
        data_dir.mkdir()
        with TestClient(create_app(ServiceConfig(data_dir=str(data_dir)))) as client:
            assert client.post("/api/v1/rounds").status_code == 400

    def test_unknown_round_404(self, tmp_path):
        data_dir = tmp_path / "bare"
        data_dir.mkdir()
        with TestClient(create_app(ServiceConfig(data_dir=str(data_dir)))) as client:
            assert client.get("/api/v1/rounds/round-9").status_code == 404
