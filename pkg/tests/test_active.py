import math
import os
import random

import pytest
from hypothesis import given, settings, strategies as st

from silverloop.core import LabelVector, MentionClass, SentenceRecord, Task, TASKS, valid_classes
from silverloop.active import (
    AnnotationRecord,
    AnnotationStore,
    AdjudicationRecord,
    AdjudicationStore,
    DuplicateAnnotationError,
    RoundConfig,
    annotations_to_dataset,
    build_heldout,
    entropy,
    margin,
    read_probs,
    record_annotation,
    run_round,
    select_uncertain,
)
from silverloop.surrogate import TrainConfig


class TestEntropy:
    def test_uniform_is_ln4(self):
        assert entropy([0.25, 0.25, 0.25, 0.25]) == pytest.approx(math.log(4), abs=1e-12)

    def test_point_mass_is_zero(self):
        assert entropy([1, 0, 0, 0]) == 0.0

    def test_skewed_value(self):
        assert entropy([0.7, 0.1, 0.1, 0.1]) == pytest.approx(0.940447, abs=1e-6)

    def test_non_normalized_rejected(self):
        with pytest.raises(ValueError, match="sum"):
            entropy([0.5, 0.4])

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            entropy([1.2, -0.2])

    @given(st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=2, max_size=6))
    @settings(max_examples=200, deadline=None)
    def test_bounds(self, weights):
        total = sum(weights)
        probs = [w / total for w in weights]
        value = entropy(probs)
        assert -1e-12 <= value <= math.log(len(probs)) + 1e-9
        uniform = [1 / len(probs)] * len(probs)
        assert entropy(uniform) >= value - 1e-9

    def test_margin_measure(self):
        assert margin([0.9, 0.1, 0.0, 0.0]) == pytest.approx(0.2)
        assert margin([0.5, 0.5, 0.0, 0.0]) == pytest.approx(1.0)


def uniformish(n, bump=0.0, at=0):
    probs = [1.0 / n] * n
    probs[at] += bump
    rest = (1.0 - probs[at]) / (n - 1)
    return [probs[at]] + [rest] * (n - 1) if at == 0 else probs


def make_probs(rows):
    """rows: list of (report_id, sentence_index, {task: probs})."""
    out = []
    for report_id, sentence_index, by_task in rows:
        full = {}
        for task in TASKS:
            n = len(valid_classes(task))
            full[task] = by_task.get(task, [1.0] + [0.0] * (n - 1))
        out.append(((report_id, sentence_index), full))
    return out


def make_sentences(texts):
    return {
        (f"r{i}", 0): SentenceRecord(report_id=f"r{i}", sentence_index=0, text=text)
        for i, text in enumerate(texts)
    }


class TestSelectUncertain:
    def test_k_zero_selects_nothing(self):
        sentences = make_sentences(["a.", "b."])
        probs = make_probs([("r0", 0, {}), ("r1", 0, {})])
        assert select_uncertain(probs, sentences, k_per_task=0) == []

    def test_ranked_by_entropy_descending(self):
        sentences = make_sentences(["alpha.", "beta.", "gamma."])
        spreads = {
            "r0": [0.35, 0.30, 0.20, 0.15],   # entropy ~1.31
            "r1": [0.97, 0.01, 0.01, 0.01],   # ~0.17
            "r2": [0.55, 0.25, 0.10, 0.10],   # ~1.16
        }
        probs = make_probs([(rid, 0, {Task.EDEMA: p}) for rid, p in spreads.items()])
        selection = select_uncertain(probs, sentences, k_per_task=2)
        edema_items = [s for s in selection if Task.EDEMA in s.tasks]
        assert [s.report_id for s in edema_items] == ["r0", "r2"]

    def test_duplicates_collapse_to_first_occurrence(self):
        sentences = {
            ("r0", 0): SentenceRecord(report_id="r0", sentence_index=0, text="same text."),
            ("r1", 0): SentenceRecord(report_id="r1", sentence_index=0, text="Same  text."),
            ("r2", 0): SentenceRecord(report_id="r2", sentence_index=0, text="different."),
        }
        spread = [0.4, 0.3, 0.2, 0.1]
        probs = make_probs([(rid, 0, {Task.EDEMA: spread}) for rid in ("r0", "r1", "r2")])
        selection = select_uncertain(probs, sentences, k_per_task=3)
        keys = [s.dedup_key for s in selection]
        assert sorted(keys) == ["different", "same text"]

    def test_excluded_keys_dropped(self):
        sentences = make_sentences(["held out.", "free."])
        spread = [0.4, 0.3, 0.2, 0.1]
        probs = make_probs([("r0", 0, {Task.EDEMA: spread}), ("r1", 0, {Task.EDEMA: spread})])
        selection = select_uncertain(probs, sentences, k_per_task=5, exclude={"held out"})
        assert [s.dedup_key for s in selection] == ["free"]

    def test_multi_task_requests_recorded_once(self):
        sentences = make_sentences(["ambiguous everywhere."])
        spread = [0.4, 0.3, 0.2, 0.1]
        probs = make_probs([("r0", 0, {Task.EDEMA: spread, Task.PNEUMONIA: spread})])
        selection = select_uncertain(probs, sentences, k_per_task=1)
        assert len(selection) == 1
        assert Task.EDEMA in selection[0].tasks and Task.PNEUMONIA in selection[0].tasks

    def test_selection_is_deterministic(self):
        sentences = make_sentences([f"sentence {i}." for i in range(30)])
        rng = random.Random(8)
        probs = []
        for i in range(30):
            spread = [rng.random() for _ in range(4)]
            total = sum(spread)
            probs.append((f"r{i}", 0, {Task.EDEMA: [x / total for x in spread]}))
        rows = make_probs(probs)
        first = select_uncertain(rows, sentences, k_per_task=10)
        second = select_uncertain(rows, sentences, k_per_task=10)
        assert [s.dedup_key for s in first] == [s.dedup_key for s in second]

    def test_probs_file_round_trip(self, tmp_path):
        from silverloop.surrogate import new_model, predict_corpus

        records = [SentenceRecord(report_id="r0", sentence_index=0, text="no edema.")]
        model = new_model(n_buckets=2**10, embedding_dim=8, hidden_dim=8, seed=1)
        predict_corpus(records, model, str(tmp_path / "l.jsonl"), str(tmp_path / "p.jsonl"))
        rows = read_probs(str(tmp_path / "p.jsonl"))
        assert rows[0][0] == ("r0", 0)
        assert abs(sum(rows[0][1][Task.EDEMA]) - 1) < 1e-9


def teacher_world(n_reports=400, seed=0):
    """Corpus + teacher labels keyed for the heldout/round helpers."""
    import os as _os
    from silverloop import corpus as corpus_mod, rules as rules_mod

    ruleset = rules_mod.load_rules(_os.path.join(_os.path.dirname(__file__), "..", "rules", "fixture.json"))
    classifier = rules_mod.SentenceClassifier(ruleset)
    config = corpus_mod.GeneratorConfig(n_reports=n_reports, sentences_per_report=(2, 5), seed=seed)
    sentences = {}
    labels = {}
    for record, _ in corpus_mod.generate(config):
        key = (record.report_id, record.sentence_index)
        sentences[key] = record
        labels[key] = classifier.label(record.text)
    return sentences, labels


class TestBuildHeldout:
    def test_full_pools_give_540_items(self):
        sentences, labels = teacher_world(n_reports=3000, seed=10)
        items, shortfalls = build_heldout(labels, sentences, per_cell=10, seed=1)
        assert len(items) == 540
        assert not shortfalls
        per_task = {}
        for item in items:
            per_task[item.task] = per_task.get(item.task, 0) + 1
        assert per_task[Task.NO_FINDING] == 20
        assert all(per_task[t] == 40 for t in TASKS if t is not Task.NO_FINDING)

    def test_items_match_their_cell(self):
        sentences, labels = teacher_world(n_reports=3000, seed=10)
        items, _ = build_heldout(labels, sentences, per_cell=10, seed=1)
        for item in items:
            assert labels[(item.report_id, item.sentence_index)][item.task] is item.teacher_label

    def test_unique_keys_within_cell(self):
        sentences, labels = teacher_world(n_reports=3000, seed=10)
        items, _ = build_heldout(labels, sentences, per_cell=10, seed=1)
        cells = {}
        for item in items:
            cells.setdefault((item.task, item.teacher_label), []).append(item.dedup_key)
        for keys in cells.values():
            assert len(keys) == len(set(keys))

    def test_shortfall_reported_with_cell_identity(self):
        sentences, labels = teacher_world(n_reports=40, seed=11)
        items, shortfalls = build_heldout(labels, sentences, per_cell=10, seed=2)
        assert shortfalls  # tiny corpus cannot fill every cell
        for shortfall in shortfalls:
            assert shortfall.available < shortfall.wanted
            in_cell = [i for i in items if i.task is shortfall.task and i.teacher_label is shortfall.label]
            assert len(in_cell) == shortfall.available

    def test_seeded_determinism(self):
        sentences, labels = teacher_world(n_reports=800, seed=12)
        a = build_heldout(labels, sentences, per_cell=5, seed=3)
        b = build_heldout(labels, sentences, per_cell=5, seed=3)
        assert a == b


class TestAnnotationStore:
    def _record(self, key="k1", task=Task.EDEMA, label=MentionClass.POSITIVE,
                annotator="ann1", source="heldout"):
        return AnnotationRecord(
            dedup_key=key, report_id="r0", sentence_index=0, task=task,
            label=label, annotator_id=annotator, source=source, timestamp=1.5,
        )

    def test_append_grows_store(self, tmp_path):
        store = AnnotationStore(str(tmp_path / "store.jsonl"))
        record_annotation(store, self._record())
        assert len(store) == 1

    def test_exact_duplicate_rejected_and_store_unchanged(self, tmp_path):
        store = AnnotationStore(str(tmp_path / "store.jsonl"))
        store.record(self._record())
        with pytest.raises(DuplicateAnnotationError):
            store.record(self._record())
        assert len(store) == 1

    def test_same_pair_different_annotator_allowed(self, tmp_path):
        store = AnnotationStore(str(tmp_path / "store.jsonl"))
        store.record(self._record(annotator="a"))
        store.record(self._record(annotator="b"))
        assert len(store) == 2

    def test_invalid_label_rejected_at_construction(self):
        with pytest.raises(ValueError):
            self._record(task=Task.NO_FINDING, label=MentionClass.UNCERTAIN)

    def test_unknown_source_rejected(self):
        with pytest.raises(ValueError, match="source"):
            self._record(source="mystery")

    def test_replay_reconstructs_identical_state(self, tmp_path):
        path = str(tmp_path / "store.jsonl")
        store = AnnotationStore(path)
        store.record(self._record(key="k1"))
        store.record(self._record(key="k2", label=MentionClass.NEGATIVE))
        replayed = AnnotationStore(path)
        assert replayed.records() == store.records()
        with pytest.raises(DuplicateAnnotationError):
            replayed.record(self._record(key="k1"))

    def test_filtering_by_source_and_annotator(self, tmp_path):
        store = AnnotationStore(str(tmp_path / "store.jsonl"))
        store.record(self._record(key="k1", source="heldout"))
        store.record(self._record(key="k2", source="active_round"))
        assert len(store.records(source="heldout")) == 1
        assert len(store.records(annotator_id="nobody")) == 0


class TestAdjudicationStore:
    def test_verdict_vocabulary_enforced(self):
        with pytest.raises(ValueError, match="verdict"):
            AdjudicationRecord(dedup_key="k", task=Task.EDEMA, verdict="meh",
                               annotator_id="a", blinding_id="b1")

    def test_round_trip_preserves_blinding_only(self, tmp_path):
        path = str(tmp_path / "adj.jsonl")
        store = AdjudicationStore(path)
        store.record(AdjudicationRecord(dedup_key="k", task=Task.EDEMA, verdict="both_wrong",
                                        annotator_id="a", blinding_id="adj-edema-0001"))
        replayed = AdjudicationStore(path)
        assert replayed.records()[0].verdict == "both_wrong"
        assert not hasattr(replayed.records()[0], "label_source")


class TestRunRound:
    def _annotate(self, store, sentences, labels, keys, source, task=Task.EDEMA):
        for key in keys:
            record = sentences[key]
            if store.answered(record.dedup_key, task, "oracle", source):
                continue
            store.record(AnnotationRecord(
                dedup_key=record.dedup_key, report_id=record.report_id,
                sentence_index=record.sentence_index, task=task,
                label=labels[key][task], annotator_id="oracle", source=source,
            ))

    def test_requires_round_annotations(self, tmp_path):
        sentences, labels = teacher_world(n_reports=60, seed=14)
        store = AnnotationStore(str(tmp_path / "s.jsonl"))
        from silverloop.surrogate import new_model
        model = new_model(n_buckets=2**10, embedding_dim=8, hidden_dim=8, seed=0)
        with pytest.raises(ValueError, match="active_round"):
            run_round(sentences, labels, model, store)

    def test_requires_heldout_annotations(self, tmp_path):
        sentences, labels = teacher_world(n_reports=60, seed=14)
        store = AnnotationStore(str(tmp_path / "s.jsonl"))
        keys = list(sentences)[:3]
        self._annotate(store, sentences, labels, keys, "active_round")
        from silverloop.surrogate import new_model
        model = new_model(n_buckets=2**10, embedding_dim=8, hidden_dim=8, seed=0)
        with pytest.raises(ValueError, match="heldout"):
            run_round(sentences, labels, model, store)

    def test_planted_overlap_aborts(self, tmp_path):
        sentences, labels = teacher_world(n_reports=60, seed=14)
        store = AnnotationStore(str(tmp_path / "s.jsonl"))
        keys = list(sentences)
        self._annotate(store, sentences, labels, keys[:3], "active_round")
        self._annotate(store, sentences, labels, keys[3:6], "heldout")
        # plant one overlap: a heldout key also annotated for training
        overlap_key = keys[3]
        record = sentences[overlap_key]
        store.record(AnnotationRecord(
            dedup_key=record.dedup_key, report_id=record.report_id,
            sentence_index=record.sentence_index, task=Task.PNEUMONIA,
            label=labels[overlap_key][Task.PNEUMONIA], annotator_id="oracle", source="active_round",
        ))
        from silverloop.surrogate import new_model
        model = new_model(n_buckets=2**10, embedding_dim=8, hidden_dim=8, seed=0)
        with pytest.raises(ValueError, match="overlap"):
            run_round(sentences, labels, model, store)

    def test_annotations_matching_teacher_keep_accuracy_stable(self, tmp_path):
        from silverloop.surrogate import train

        sentences, labels = teacher_world(n_reports=500, seed=15)
        dataset = [(r.text, labels[k]) for k, r in sentences.items()]
        model, _ = train(dataset, TrainConfig(epochs=3, seed=1), model_dims=(2**14, 24, 32))

        keys = list(sentences)
        heldout_keys = [k for k in keys[:80] if sentences[k].dedup_key not in
                        {sentences[k2].dedup_key for k2 in keys[80:200]}]
        store = AnnotationStore(str(tmp_path / "s.jsonl"))
        self._annotate(store, sentences, labels, heldout_keys, "heldout")
        round_keys = [k for k in keys[80:200]
                      if sentences[k].dedup_key not in {sentences[h].dedup_key for h in heldout_keys}]
        self._annotate(store, sentences, labels, round_keys, "active_round")

        result = run_round(sentences, labels, model, store,
                           RoundConfig(train=TrainConfig(epochs=1, seed=2)))
        macros = result.comparison["macro"]
        assert macros["teacher"] == 1.0  # annotations came from the teacher itself
        assert abs(macros["student_post"] - macros["student_raw"]) < 0.005 + 1e-9

    def test_dataset_groups_annotations_per_sentence(self):
        sentences, labels = teacher_world(n_reports=20, seed=16)
        key = next(iter(sentences))
        record = sentences[key]
        annotations = [
            AnnotationRecord(dedup_key=record.dedup_key, report_id=record.report_id,
                             sentence_index=record.sentence_index, task=Task.EDEMA,
                             label=MentionClass.NEGATIVE, annotator_id="a", source="active_round"),
            AnnotationRecord(dedup_key=record.dedup_key, report_id=record.report_id,
                             sentence_index=record.sentence_index, task=Task.PNEUMONIA,
                             label=MentionClass.POSITIVE, annotator_id="a", source="active_round"),
        ]
        dataset = annotations_to_dataset(annotations, sentences)
        assert len(dataset) == 1
        text, partial = dataset[0]
        assert text == record.text
        assert partial[Task.EDEMA] is MentionClass.NEGATIVE
        assert partial[Task.PNEUMONIA] is MentionClass.POSITIVE

    def test_unknown_sentence_rejected(self):
        with pytest.raises(KeyError):
            annotations_to_dataset(
                [AnnotationRecord(dedup_key="k", report_id="missing", sentence_index=0,
                                  task=Task.EDEMA, label=MentionClass.POSITIVE,
                                  annotator_id="a", source="active_round")],
                {},
            )


class TestIterateRounds:
    def test_two_rounds_accumulate_disjoint_annotations(self, tmp_path):
        from silverloop.active import iterate_rounds
        from silverloop.surrogate import train

        sentences, labels = teacher_world(n_reports=400, seed=18)
        dataset = [(r.text, labels[k]) for k, r in sentences.items()]
        model, _ = train(dataset, TrainConfig(epochs=2, seed=1), model_dims=(2**13, 16, 24))

        store = AnnotationStore(str(tmp_path / "s.jsonl"))
        items, _ = build_heldout(labels, sentences, per_cell=2, seed=4)
        for item in items:
            if store.answered(item.dedup_key, item.task, "oracle", "heldout"):
                continue
            store.record(AnnotationRecord(
                dedup_key=item.dedup_key, report_id=item.report_id,
                sentence_index=item.sentence_index, task=item.task,
                label=labels[(item.report_id, item.sentence_index)][item.task],
                annotator_id="oracle", source="heldout",
            ))
        heldout_keys = {item.dedup_key for item in items}
        pool = [k for k in sentences if sentences[k].dedup_key not in heldout_keys][:300]

        results = iterate_rounds(
            sentences, labels, model, store, oracle_labels=labels, selection_keys=pool,
            rounds=2, k_per_task=5,
            config=RoundConfig(train=TrainConfig(epochs=1, seed=2)),
        )
        assert len(results) == 2
        assert results[0].n_annotations > 0
        # later rounds never re-annotate earlier selections
        records = store.records(source="active_round")
        keys = [(r.dedup_key, r.task) for r in records]
        assert len(keys) == len(set(keys))
        # held-out keys never selected
        assert all(r.dedup_key not in heldout_keys for r in records)

    def test_zero_rounds_rejected(self, tmp_path):
        from silverloop.active import iterate_rounds

        sentences, labels = teacher_world(n_reports=20, seed=19)
        store = AnnotationStore(str(tmp_path / "s.jsonl"))
        from silverloop.surrogate import new_model
        model = new_model(n_buckets=2**10, embedding_dim=8, hidden_dim=8, seed=0)
        with pytest.raises(ValueError, match="rounds"):
            iterate_rounds(sentences, labels, model, store, labels, list(sentences), rounds=0)
