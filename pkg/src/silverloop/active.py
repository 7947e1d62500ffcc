"""Uncertainty-driven annotation loop: tiered held-out construction,
per-task entropy sampling, annotation persistence, and the one-epoch
fine-tune round.

The annotation store is append-only JSONL; replaying the log reconstructs
identical state. Held-out sentences are excluded from all training
selections by dedup key, and the round orchestrator aborts if that
disjointness is violated.
"""

from __future__ import annotations

import json
import math
import os
import random
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .core import (
    LabelVector,
    MentionClass,
    PartialLabelVector,
    SentenceKey,
    SentenceRecord,
    Task,
    TASKS,
    dump_json_line,
    is_valid_label,
    valid_classes,
)
from .evaluate import GoldPair, gold_accuracy_comparison
from .surrogate import EpochLog, Model, TrainConfig, fine_tune, predict_labels


def entropy(probs: Sequence[float]) -> float:
    """Shannon entropy in nats, with 0 * ln 0 = 0. Input must be a
    distribution (non-negative, summing to 1 within 1e-6)."""
    total = 0.0
    acc = 0.0
    for p in probs:
        if p < 0:
            raise ValueError(f"negative probability {p}")
        total += p
        if p > 0:
            acc -= p * math.log(p)
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {total}, not 1")
    return acc


def margin(probs: Sequence[float]) -> float:
    """1 - (p1 - p2): the alternative uncertainty measure, larger = less sure."""
    top_two = sorted(probs, reverse=True)[:2]
    if len(top_two) < 2:
        return 0.0
    return 1.0 - (top_two[0] - top_two[1])


# ---------------------------------------------------------------------------
# Probabilities file
# ---------------------------------------------------------------------------


def read_probs(path: str) -> list[tuple[SentenceKey, dict[Task, list[float]]]]:
    rows = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            row = json.loads(line)
            key = (str(row["report_id"]), int(row["sentence_index"]))
            rows.append((key, {Task(t): list(map(float, p)) for t, p in row["probs"].items()}))
    return rows


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------


@dataclass
class SelectionItem:
    dedup_key: str
    report_id: str
    sentence_index: int
    text: str
    tasks: list[Task]
    scores: dict[Task, float]

    def to_json_dict(self) -> dict:
        return {
            "dedup_key": self.dedup_key,
            "report_id": self.report_id,
            "sentence_index": self.sentence_index,
            "text": self.text,
            "tasks": [t.value for t in self.tasks],
            "scores": {t.value: s for t, s in self.scores.items()},
        }


def select_uncertain(
    probs: Sequence[tuple[SentenceKey, dict[Task, list[float]]]],
    sentences: Mapping[SentenceKey, SentenceRecord],
    k_per_task: int = 100,
    exclude: set[str] | None = None,
    measure: str = "entropy",
) -> list[SelectionItem]:
    """Per task, the k most uncertain sentences, deduplicated by dedup key.

    Ranking is by descending uncertainty with ties broken by dedup key then
    (report_id, sentence_index). Excluded keys are dropped; a key selected
    by several tasks appears once with every requesting task recorded.
    """
    if k_per_task < 0:
        raise ValueError("k_per_task must be >= 0")
    score = {"entropy": entropy, "margin": margin}[measure]
    exclude = exclude or set()

    scored = []
    for key, task_probs in probs:
        record = sentences[key]
        if record.dedup_key in exclude:
            continue
        scored.append((record, {task: score(p) for task, p in task_probs.items()}))

    selected: dict[str, SelectionItem] = {}
    for task in TASKS:
        ranking = sorted(
            scored,
            key=lambda item: (-item[1][task], item[0].dedup_key, item[0].report_id, item[0].sentence_index),
        )
        taken = 0
        seen: set[str] = set()
        for record, scores in ranking:
            if taken >= k_per_task:
                break
            if record.dedup_key in seen:
                continue
            seen.add(record.dedup_key)
            taken += 1
            item = selected.get(record.dedup_key)
            if item is None:
                selected[record.dedup_key] = SelectionItem(
                    dedup_key=record.dedup_key,
                    report_id=record.report_id,
                    sentence_index=record.sentence_index,
                    text=record.text,
                    tasks=[task],
                    scores={task: scores[task]},
                )
            else:
                item.tasks.append(task)
                item.scores[task] = scores[task]
    return list(selected.values())


# ---------------------------------------------------------------------------
# Tiered held-out construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeldoutItem:
    dedup_key: str
    report_id: str
    sentence_index: int
    text: str
    task: Task
    teacher_label: MentionClass

    def to_json_dict(self) -> dict:
        return {
            "dedup_key": self.dedup_key,
            "report_id": self.report_id,
            "sentence_index": self.sentence_index,
            "text": self.text,
            "task": self.task.value,
            "teacher_label": self.teacher_label.key,
        }


@dataclass(frozen=True)
class CellShortfall:
    task: Task
    label: MentionClass
    wanted: int
    available: int


def build_heldout(
    labels: Mapping[SentenceKey, LabelVector],
    sentences: Mapping[SentenceKey, SentenceRecord],
    per_cell: int = 10,
    seed: int = 0,
) -> tuple[list[HeldoutItem], list[CellShortfall]]:
    """Sample per_cell unique sentences for every (task, teacher label) cell.

    With 4-class tasks plus the 2-class no_finding and full pools this is
    54 cells, 540 annotation items: 40 per task, 20 for no_finding. Cells
    with thin pools take everything available and report the shortfall.
    """
    # one representative sentence per dedup key, first corpus occurrence
    representatives: dict[str, SentenceRecord] = {}
    rep_labels: dict[str, LabelVector] = {}
    for key, record in sentences.items():
        if record.dedup_key not in representatives and key in labels:
            representatives[record.dedup_key] = record
            rep_labels[record.dedup_key] = labels[key]

    pools: dict[tuple[Task, MentionClass], list[str]] = {
        (task, label): [] for task in TASKS for label in valid_classes(task)
    }
    for dedup_key in sorted(representatives):
        vector = rep_labels[dedup_key]
        for task in TASKS:
            pools[(task, vector[task])].append(dedup_key)

    rng = random.Random(seed)
    items: list[HeldoutItem] = []
    shortfalls: list[CellShortfall] = []
    for task in TASKS:
        for label in valid_classes(task):
            pool = pools[(task, label)]
            if len(pool) < per_cell:
                shortfalls.append(CellShortfall(task=task, label=label, wanted=per_cell, available=len(pool)))
                chosen = list(pool)
            else:
                chosen = rng.sample(pool, per_cell)
            for dedup_key in chosen:
                record = representatives[dedup_key]
                items.append(HeldoutItem(
                    dedup_key=dedup_key,
                    report_id=record.report_id,
                    sentence_index=record.sentence_index,
                    text=record.text,
                    task=task,
                    teacher_label=label,
                ))
    return items, shortfalls


# ---------------------------------------------------------------------------
# Annotation persistence
# ---------------------------------------------------------------------------

ANNOTATION_SOURCES = ("heldout", "active_round", "adjudication")
VERDICTS = ("prefer_a", "prefer_b", "both_wrong", "unsure")


@dataclass(frozen=True)
class AnnotationRecord:
    dedup_key: str
    report_id: str
    sentence_index: int
    task: Task
    label: MentionClass
    annotator_id: str
    source: str
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if self.source not in ANNOTATION_SOURCES:
            raise ValueError(f"unknown annotation source {self.source!r}")
        if not is_valid_label(self.task, self.label):
            raise ValueError(f"{self.label.key} is not a valid label for {self.task.value}")

    def to_json_dict(self) -> dict:
        return {
            "dedup_key": self.dedup_key,
            "report_id": self.report_id,
            "sentence_index": self.sentence_index,
            "task": self.task.value,
            "label": self.label.key,
            "annotator_id": self.annotator_id,
            "source": self.source,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json_dict(cls, row: dict) -> "AnnotationRecord":
        return cls(
            dedup_key=row["dedup_key"],
            report_id=row["report_id"],
            sentence_index=int(row["sentence_index"]),
            task=Task(row["task"]),
            label=MentionClass.from_key(row["label"]),
            annotator_id=row["annotator_id"],
            source=row["source"],
            timestamp=float(row.get("timestamp", 0.0)),
        )


class DuplicateAnnotationError(ValueError):
    pass


class AnnotationStore:
    """Append-only JSONL store of annotation records.

    A (dedup_key, task, annotator_id, source) quadruple may appear at most
    once. Appends are flushed and fsynced before they are acknowledged;
    reopening the file replays the log into identical state.
    """

    def __init__(self, path: str):
        self.path = path
        self._records: list[AnnotationRecord] = []
        self._seen: set[tuple[str, str, str, str]] = set()
        if os.path.exists(path):
            with open(path, encoding="utf-8") as handle:
                for line in handle:
                    if line.strip():
                        self._load(AnnotationRecord.from_json_dict(json.loads(line)))

    def _key(self, record: AnnotationRecord) -> tuple[str, str, str, str]:
        return (record.dedup_key, record.task.value, record.annotator_id, record.source)

    def _load(self, record: AnnotationRecord) -> None:
        key = self._key(record)
        if key in self._seen:
            raise DuplicateAnnotationError(f"duplicate annotation {key} while replaying {self.path}")
        self._seen.add(key)
        self._records.append(record)

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: tuple[str, str, str, str]) -> bool:
        return key in self._seen

    def record(self, record: AnnotationRecord) -> None:
        """Durably append one record; raises on duplicates before writing."""
        key = self._key(record)
        if key in self._seen:
            raise DuplicateAnnotationError(f"duplicate annotation {key}")
        with open(self.path, "a", encoding="utf-8") as handle:
            handle.write(dump_json_line(record.to_json_dict()))
            handle.write("\n")
            handle.flush()
            os.fsync(handle.fileno())
        self._seen.add(key)
        self._records.append(record)

    def records(self, source: str | None = None, annotator_id: str | None = None) -> list[AnnotationRecord]:
        out = self._records
        if source is not None:
            out = [r for r in out if r.source == source]
        if annotator_id is not None:
            out = [r for r in out if r.annotator_id == annotator_id]
        return list(out)

    def answered(self, dedup_key: str, task: Task, annotator_id: str, source: str) -> bool:
        return (dedup_key, task.value, annotator_id, source) in self._seen


@dataclass(frozen=True)
class AdjudicationRecord:
    dedup_key: str
    task: Task
    verdict: str
    annotator_id: str
    blinding_id: str
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}; expected one of {VERDICTS}")

    def to_json_dict(self) -> dict:
        return {
            "dedup_key": self.dedup_key,
            "task": self.task.value,
            "verdict": self.verdict,
            "annotator_id": self.annotator_id,
            "blinding_id": self.blinding_id,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json_dict(cls, row: dict) -> "AdjudicationRecord":
        return cls(
            dedup_key=row["dedup_key"],
            task=Task(row["task"]),
            verdict=row["verdict"],
            annotator_id=row["annotator_id"],
            blinding_id=row["blinding_id"],
            timestamp=float(row.get("timestamp", 0.0)),
        )


class AdjudicationStore:
    """Append-only JSONL store of blinded verdicts; blinding is preserved
    (records carry only the blinding id, never label provenance)."""

    def __init__(self, path: str):
        self.path = path
        self._records: list[AdjudicationRecord] = []
        self._seen: set[tuple[str, str, str]] = set()
        if os.path.exists(path):
            with open(path, encoding="utf-8") as handle:
                for line in handle:
                    if line.strip():
                        record = AdjudicationRecord.from_json_dict(json.loads(line))
                        self._seen.add(self._key(record))
                        self._records.append(record)

    def _key(self, record: AdjudicationRecord) -> tuple[str, str, str]:
        return (record.blinding_id, record.annotator_id, record.task.value)

    def __len__(self) -> int:
        return len(self._records)

    def record(self, record: AdjudicationRecord) -> None:
        key = self._key(record)
        if key in self._seen:
            raise DuplicateAnnotationError(f"duplicate adjudication {key}")
        with open(self.path, "a", encoding="utf-8") as handle:
            handle.write(dump_json_line(record.to_json_dict()))
            handle.write("\n")
            handle.flush()
            os.fsync(handle.fileno())
        self._seen.add(key)
        self._records.append(record)

    def records(self) -> list[AdjudicationRecord]:
        return list(self._records)

    def answered(self, blinding_id: str, annotator_id: str, task: Task) -> bool:
        return (blinding_id, annotator_id, task.value) in self._seen


def record_annotation(store: AnnotationStore, record: AnnotationRecord) -> None:
    """Validate and durably append one annotation."""
    store.record(record)


# ---------------------------------------------------------------------------
# The fine-tune round
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoundConfig:
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=1))
    mix_teacher: float = 0.0  # fraction of annotation count drawn from teacher labels
    seed: int = 0


@dataclass
class RoundResult:
    model: Model
    comparison: dict
    fine_tune_logs: list[EpochLog]
    n_annotations: int
    n_sentences: int


def annotations_to_dataset(
    annotations: Sequence[AnnotationRecord],
    sentences: Mapping[SentenceKey, SentenceRecord],
) -> list[tuple[str, PartialLabelVector]]:
    """Group per-task annotations into partial label vectors per sentence.

    For conflicting labels on the same (sentence, task) the latest record
    wins; one round normally has a single annotator, where this cannot
    happen.
    """
    grouped: dict[str, tuple[str, dict[Task, MentionClass]]] = {}
    for record in annotations:
        key = (record.report_id, record.sentence_index)
        if key not in sentences:
            raise KeyError(f"annotation references unknown sentence {key}")
        text = sentences[key].text
        entry = grouped.setdefault(record.dedup_key, (text, {}))
        entry[1][record.task] = record.label
    return [(text, PartialLabelVector(labels)) for text, labels in grouped.values()]


def compare_on_heldout(
    sentences: Mapping[SentenceKey, SentenceRecord],
    teacher_labels: Mapping[SentenceKey, LabelVector],
    models: Mapping[str, Model],
    heldout_annotations: Sequence[AnnotationRecord],
) -> dict:
    """Gold-accuracy comparison of the teacher and any number of models on
    the held-out annotations, teacher as baseline."""
    gold: list[GoldPair] = [
        ((r.report_id, r.sentence_index), r.task, r.label) for r in heldout_annotations
    ]
    keys = {(r.report_id, r.sentence_index) for r in heldout_annotations}
    systems: dict[str, Mapping[SentenceKey, LabelVector]] = {
        "teacher": {k: teacher_labels[k] for k in keys}
    }
    for name, model in models.items():
        systems[name] = _predict_map(model, sentences, keys)
    return gold_accuracy_comparison(gold, systems, baseline="teacher")


def run_round(
    sentences: Mapping[SentenceKey, SentenceRecord],
    teacher_labels: Mapping[SentenceKey, LabelVector],
    model: Model,
    store: AnnotationStore,
    config: RoundConfig | None = None,
    annotations: Sequence[AnnotationRecord] | None = None,
) -> RoundResult:
    """Fine-tune on active-round annotations and report before/after gold
    accuracy on the held-out set.

    Preconditions enforced: the store holds both active_round and heldout
    annotations, and their dedup keys are disjoint. ``annotations`` narrows
    the fine-tuning set (defaults to every active_round record).
    """
    config = config or RoundConfig()
    round_annotations = list(annotations) if annotations is not None else store.records(source="active_round")
    if not round_annotations:
        raise ValueError("store has no active_round annotations")
    heldout_annotations = store.records(source="heldout")
    if not heldout_annotations:
        raise ValueError("store has no heldout annotations")

    train_keys = {r.dedup_key for r in store.records(source="active_round")}
    heldout_keys = {r.dedup_key for r in heldout_annotations}
    overlap = train_keys & heldout_keys
    if overlap:
        raise ValueError(f"training selections overlap the held-out set: {sorted(overlap)[:5]}")

    dataset: list[tuple[str, PartialLabelVector | LabelVector]] = list(
        annotations_to_dataset(round_annotations, sentences)
    )
    if config.mix_teacher > 0:
        n_extra = int(config.mix_teacher * len(dataset))
        pool = [k for k in teacher_labels if sentences[k].dedup_key not in heldout_keys]
        rng = random.Random(config.seed)
        for key in rng.sample(pool, min(n_extra, len(pool))):
            dataset.append((sentences[key].text, teacher_labels[key]))

    tuned, logs = fine_tune(model, dataset, replace(config.train))
    comparison = compare_on_heldout(
        sentences, teacher_labels, {"student_raw": model, "student_post": tuned}, heldout_annotations
    )
    return RoundResult(
        model=tuned,
        comparison=comparison,
        fine_tune_logs=logs,
        n_annotations=len(round_annotations),
        n_sentences=len(dataset),
    )


def iterate_rounds(
    sentences: Mapping[SentenceKey, SentenceRecord],
    teacher_labels: Mapping[SentenceKey, LabelVector],
    model: Model,
    store: AnnotationStore,
    oracle_labels: Mapping[SentenceKey, LabelVector],
    selection_keys: Sequence[SentenceKey],
    rounds: int,
    k_per_task: int = 100,
    config: RoundConfig | None = None,
    annotator_id: str = "oracle",
) -> list[RoundResult]:
    """Repeat select-uncertain -> annotate -> fine-tune for several rounds.

    The annotator is a labels file (the oracle), which is what synthetic
    experiments use. Each round scores the selection pool with the current
    model, annotates the newly selected sentences for their requesting
    tasks, and fine-tunes on them.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    heldout_keys = {r.dedup_key for r in store.records(source="heldout")}
    results: list[RoundResult] = []
    current = model
    for round_index in range(rounds):
        probs = []
        for key in selection_keys:
            task_probs = forward_probs(current, sentences[key].text)
            probs.append((key, task_probs))
        exclude = heldout_keys | {r.dedup_key for r in store.records(source="active_round")}
        selection = select_uncertain(probs, sentences, k_per_task=k_per_task, exclude=exclude)
        if not selection:
            break
        new_annotations = []
        for item in selection:
            key = (item.report_id, item.sentence_index)
            for task in item.tasks:
                record = AnnotationRecord(
                    dedup_key=item.dedup_key, report_id=item.report_id,
                    sentence_index=item.sentence_index, task=task,
                    label=oracle_labels[key][task], annotator_id=annotator_id,
                    source="active_round", timestamp=now_timestamp(),
                )
                store.record(record)
                new_annotations.append(record)
        result = run_round(sentences, teacher_labels, current, store, config, annotations=new_annotations)
        results.append(result)
        current = result.model
    return results


def forward_probs(model: Model, text: str) -> dict[Task, list[float]]:
    from .surrogate import forward

    return {task: [float(x) for x in p] for task, p in forward(text, model).items()}


def _predict_map(
    model: Model,
    sentences: Mapping[SentenceKey, SentenceRecord],
    keys: Iterable[SentenceKey],
) -> dict[SentenceKey, LabelVector]:
    cache: dict[str, LabelVector] = {}
    out: dict[SentenceKey, LabelVector] = {}
    for key in keys:
        text = sentences[key].text
        if text not in cache:
            cache[text] = LabelVector(predict_labels(text, model))
        out[key] = cache[text]
    return out


def now_timestamp() -> float:
    return time.time()
