"""Parity and quality measurement between label sources.

All metrics are exact integer counting; floating point enters only at the
final division, so reports are bit-reproducible. Reports serialize to JSON
and render as plain-text tables.
"""

from __future__ import annotations

import random
import tempfile
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .core import (
    CLASSES,
    LabelVector,
    MentionClass,
    SentenceKey,
    SentenceRecord,
    Task,
    TASKS,
)

LabelMap = Mapping[SentenceKey, LabelVector]


class AlignmentError(ValueError):
    """Reference and prediction files cover different sentences."""


def _aligned_keys(reference: LabelMap, prediction: LabelMap) -> list[SentenceKey]:
    for key in reference:
        if key not in prediction:
            raise AlignmentError(f"sentence {key} present in reference but not prediction")
    for key in prediction:
        if key not in reference:
            raise AlignmentError(f"sentence {key} present in prediction but not reference")
    return list(reference)


# ---------------------------------------------------------------------------
# Parity
# ---------------------------------------------------------------------------


@dataclass
class ParityReport:
    """Match statistics between a reference and a prediction labels file.

    confusion[task] is a 4x4 count matrix (rows = reference class, columns =
    predicted class, ordinal order). overall_match is pair-weighted;
    task_macro_match averages tasks equally.
    """

    overall_match: float
    task_macro_match: float
    per_task_failure: dict[Task, float]
    confusion: dict[Task, list[list[int]]]
    n_sentences: int
    n_pairs: int

    def to_json_dict(self) -> dict:
        return {
            "overall_match": self.overall_match,
            "task_macro_match": self.task_macro_match,
            "per_task_failure": {t.value: f for t, f in self.per_task_failure.items()},
            "confusion": {t.value: rows for t, rows in self.confusion.items()},
            "n_sentences": self.n_sentences,
            "n_pairs": self.n_pairs,
        }


def parity(
    reference: LabelMap,
    prediction: LabelMap,
    restrict_to: set[str] | None = None,
    dedup_keys: Mapping[SentenceKey, str] | None = None,
) -> ParityReport:
    """Exact agreement counting over aligned (sentence, task) pairs.

    restrict_to keeps only sentences whose dedup key is in the set (the
    unseen-sentence test filter); it requires a dedup_keys lookup.
    """
    keys = _aligned_keys(reference, prediction)
    if restrict_to is not None:
        if dedup_keys is None:
            raise ValueError("restrict_to requires a dedup_keys lookup")
        keys = [k for k in keys if dedup_keys[k] in restrict_to]

    confusion = {t: [[0] * len(CLASSES) for _ in CLASSES] for t in TASKS}
    for key in keys:
        ref = reference[key]
        pred = prediction[key]
        for task in TASKS:
            confusion[task][ref[task]][pred[task]] += 1

    n_sentences = len(keys)
    n_pairs = n_sentences * len(TASKS)
    matched = 0
    per_task_failure: dict[Task, float] = {}
    for task in TASKS:
        trace = sum(confusion[task][c][c] for c in range(len(CLASSES)))
        matched += trace
        per_task_failure[task] = 1.0 - trace / n_sentences if n_sentences else 0.0
    return ParityReport(
        overall_match=matched / n_pairs if n_pairs else 1.0,
        task_macro_match=1.0 - sum(per_task_failure.values()) / len(TASKS),
        per_task_failure=per_task_failure,
        confusion=confusion,
        n_sentences=n_sentences,
        n_pairs=n_pairs,
    )


def confusion_row_normalized(matrix: Sequence[Sequence[int]]) -> list[list[float]]:
    """Row-normalized view; all-zero rows stay zero."""
    out = []
    for row in matrix:
        total = sum(row)
        out.append([v / total if total else 0.0 for v in row])
    return out


def confusion_log_scale(matrix: Sequence[Sequence[int]]) -> list[list[float]]:
    """log10(1 + count), the usual rendering for heavily diagonal matrices."""
    import math

    return [[math.log10(1 + v) for v in row] for row in matrix]


def majority_baseline(reference: LabelMap) -> dict[Task, float]:
    """Failure rate of always predicting each task's most frequent class.

    Frequency ties break to the lowest class ordinal.
    """
    if not reference:
        raise ValueError("empty reference labels")
    counts = {t: [0] * len(CLASSES) for t in TASKS}
    for labels in reference.values():
        for task in TASKS:
            counts[task][labels[task]] += 1
    n = len(reference)
    out: dict[Task, float] = {}
    for task in TASKS:
        majority = max(CLASSES, key=lambda c: (counts[task][c], -c))
        out[task] = 1.0 - counts[task][majority] / n
    return out


# ---------------------------------------------------------------------------
# F1
# ---------------------------------------------------------------------------


def _f1(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


_F1_KINDS: dict[str, Callable[[MentionClass], bool]] = {
    "mention": lambda c: c is not MentionClass.NO_MENTION,
    "negation": lambda c: c is MentionClass.NEGATIVE,
    "uncertainty": lambda c: c is MentionClass.UNCERTAIN,
}


@dataclass
class F1Report:
    """Mention / negation / uncertainty F1, per task and micro-averaged.

    Mention treats any of {negative, uncertain, positive} as the positive
    class; negation and uncertainty are one-vs-rest on their class.
    """

    per_task: dict[str, dict[Task, float]]
    micro: dict[str, float]

    def to_json_dict(self) -> dict:
        return {
            "per_task": {kind: {t.value: v for t, v in scores.items()} for kind, scores in self.per_task.items()},
            "micro": dict(self.micro),
        }


def f1(reference: LabelMap, prediction: LabelMap) -> F1Report:
    keys = _aligned_keys(reference, prediction)
    per_task: dict[str, dict[Task, float]] = {}
    micro: dict[str, float] = {}
    for kind, is_positive in _F1_KINDS.items():
        scores: dict[Task, float] = {}
        pooled_tp = pooled_fp = pooled_fn = 0
        for task in TASKS:
            tp = fp = fn = 0
            for key in keys:
                ref_pos = is_positive(reference[key][task])
                pred_pos = is_positive(prediction[key][task])
                tp += ref_pos and pred_pos
                fp += pred_pos and not ref_pos
                fn += ref_pos and not pred_pos
            scores[task] = _f1(tp, fp, fn)
            pooled_tp += tp
            pooled_fp += fp
            pooled_fn += fn
        per_task[kind] = scores
        micro[kind] = _f1(pooled_tp, pooled_fp, pooled_fn)
    return F1Report(per_task=per_task, micro=micro)


# ---------------------------------------------------------------------------
# Gold accuracy and agreement
# ---------------------------------------------------------------------------

GoldPair = tuple[SentenceKey, Task, MentionClass]


@dataclass
class GoldAccuracyReport:
    per_task: dict[Task, float]
    per_task_n: dict[Task, int]
    macro: float
    n_pairs: int

    def to_json_dict(self) -> dict:
        return {
            "per_task": {t.value: v for t, v in self.per_task.items()},
            "per_task_n": {t.value: v for t, v in self.per_task_n.items()},
            "macro": self.macro,
            "n_pairs": self.n_pairs,
        }


def gold_accuracy(gold: Iterable[GoldPair], prediction: LabelMap) -> GoldAccuracyReport:
    """Accuracy on exactly the annotated (sentence, task) pairs."""
    correct = {t: 0 for t in TASKS}
    totals = {t: 0 for t in TASKS}
    n = 0
    for key, task, label in gold:
        if key not in prediction:
            raise KeyError(f"no prediction for annotated sentence {key}")
        totals[task] += 1
        correct[task] += prediction[key][task] is label
        n += 1
    if n == 0:
        raise ValueError("no gold annotations")
    per_task = {t: correct[t] / totals[t] for t in TASKS if totals[t]}
    return GoldAccuracyReport(
        per_task=per_task,
        per_task_n={t: totals[t] for t in TASKS if totals[t]},
        macro=sum(per_task.values()) / len(per_task),
        n_pairs=n,
    )


def gold_accuracy_comparison(
    gold: Sequence[GoldPair],
    systems: Mapping[str, LabelMap],
    baseline: str,
) -> dict:
    """Per-task accuracy for several systems plus deltas against a baseline.

    The baseline column is the analog of the rule labeler in an
    accuracy-difference chart.
    """
    if baseline not in systems:
        raise ValueError(f"baseline {baseline!r} not among systems {sorted(systems)}")
    reports = {name: gold_accuracy(gold, labels) for name, labels in systems.items()}
    rows = []
    for task in TASKS:
        if task not in reports[baseline].per_task:
            continue
        row: dict = {"task": task.value, "n": reports[baseline].per_task_n[task]}
        for name, report in reports.items():
            row[name] = report.per_task[task]
            if name != baseline:
                row[f"{name}_minus_{baseline}"] = report.per_task[task] - reports[baseline].per_task[task]
        rows.append(row)
    summary: dict = {"rows": rows, "macro": {name: r.macro for name, r in reports.items()}, "baseline": baseline}
    return summary


@dataclass
class AgreementReport:
    rate: float
    n_shared: int


def agreement(
    annotator_a: Iterable[tuple[str, Task, MentionClass]],
    annotator_b: Iterable[tuple[str, Task, MentionClass]],
) -> AgreementReport:
    """Fraction of shared (dedup_key, task) pairs with equal labels."""
    a_map = {(key, task): label for key, task, label in annotator_a}
    b_map = {(key, task): label for key, task, label in annotator_b}
    shared = set(a_map) & set(b_map)
    if not shared:
        raise ValueError("annotators share no (sentence, task) pairs")
    matched = sum(a_map[pair] is b_map[pair] for pair in shared)
    return AgreementReport(rate=matched / len(shared), n_shared=len(shared))


# ---------------------------------------------------------------------------
# Throughput comparison
# ---------------------------------------------------------------------------


@dataclass
class BenchReport:
    teacher_seconds: float
    teacher_sps: float
    student_seconds: float
    student_sps: float
    speed_ratio: float  # student sentences/sec over teacher sentences/sec
    n_sentences: int

    def to_json_dict(self) -> dict:
        return self.__dict__.copy()


def bench(records: Sequence[SentenceRecord], rules, model, parallelism: int = 1) -> BenchReport:
    """Wall-clock both systems on identical input and report the ratio.

    The measured ratio is hardware- and model-specific; no particular
    speedup is promised.
    """
    from .rules import classify_corpus
    from .surrogate import predict_corpus

    if not records:
        raise ValueError("empty corpus")
    with tempfile.TemporaryDirectory() as tmp:
        teacher_stats = classify_corpus(records, rules, f"{tmp}/teacher.jsonl", parallelism=parallelism)
        student_stats = predict_corpus(records, model, f"{tmp}/student.jsonl")
    return BenchReport(
        teacher_seconds=teacher_stats.seconds,
        teacher_sps=teacher_stats.sentences_per_second,
        student_seconds=student_stats.seconds,
        student_sps=student_stats.sentences_per_second,
        speed_ratio=student_stats.sentences_per_second / teacher_stats.sentences_per_second,
        n_sentences=len(records),
    )


# ---------------------------------------------------------------------------
# Blinded discrepancy sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdjudicationItem:
    """One blinded discrepancy. label_a/label_b are in randomized order; the
    unblinding map is kept separately."""

    item_id: str
    dedup_key: str
    report_id: str
    sentence_index: int
    text: str
    task: Task
    label_a: MentionClass
    label_b: MentionClass

    def to_json_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "dedup_key": self.dedup_key,
            "report_id": self.report_id,
            "sentence_index": self.sentence_index,
            "text": self.text,
            "task": self.task.value,
            "label_a": self.label_a.key,
            "label_b": self.label_b.key,
        }


def discrepancy_sample(
    reference: LabelMap,
    prediction: LabelMap,
    sentences: Mapping[SentenceKey, SentenceRecord],
    per_task_cap: int = 46,
    seed: int = 0,
) -> tuple[list[AdjudicationItem], dict[str, dict[str, str]]]:
    """Per task, uniformly sample up to per_task_cap discrepant sentences.

    Returns (queue items, unblinding map item_id -> {"a": source, "b": source}).
    Tasks with no discrepancies contribute nothing.
    """
    keys = _aligned_keys(reference, prediction)
    rng = random.Random(seed)
    items: list[AdjudicationItem] = []
    unblinding: dict[str, dict[str, str]] = {}
    for task in TASKS:
        discrepant = [k for k in keys if reference[k][task] is not prediction[k][task]]
        chosen = discrepant if len(discrepant) <= per_task_cap else rng.sample(discrepant, per_task_cap)
        for i, key in enumerate(chosen):
            record = sentences[key]
            item_id = f"adj-{task.value}-{i:04d}"
            reference_first = rng.random() < 0.5
            label_a, label_b = (
                (reference[key][task], prediction[key][task])
                if reference_first
                else (prediction[key][task], reference[key][task])
            )
            items.append(AdjudicationItem(
                item_id=item_id,
                dedup_key=record.dedup_key,
                report_id=record.report_id,
                sentence_index=record.sentence_index,
                text=record.text,
                task=task,
                label_a=label_a,
                label_b=label_b,
            ))
            unblinding[item_id] = (
                {"a": "reference", "b": "prediction"}
                if reference_first
                else {"a": "prediction", "b": "reference"}
            )
    return items, unblinding


def adjudication_summary(
    verdicts: Iterable[tuple[str, Task, str]],
    unblinding: Mapping[str, Mapping[str, str]],
) -> dict:
    """Unblind (blinding_id, task, verdict) records into per-task fractions.

    prefer_a/prefer_b verdicts are mapped back through the unblinding table
    to the reference or prediction side; both_wrong and unsure pass through.
    """
    per_task: dict[Task, dict[str, int]] = {}
    for blinding_id, task, verdict in verdicts:
        bucket = per_task.setdefault(
            task, {"n": 0, "prefer_reference": 0, "prefer_prediction": 0, "both_wrong": 0, "unsure": 0}
        )
        bucket["n"] += 1
        if verdict in ("prefer_a", "prefer_b"):
            side = unblinding[blinding_id]["a" if verdict == "prefer_a" else "b"]
            bucket[f"prefer_{side}"] += 1
        else:
            bucket[verdict] += 1
    totals = {"n": 0, "prefer_reference": 0, "prefer_prediction": 0, "both_wrong": 0, "unsure": 0}
    for bucket in per_task.values():
        for key in totals:
            totals[key] += bucket[key]
    return {
        "per_task": {task.value: bucket for task, bucket in per_task.items()},
        "overall": totals,
    }


# ---------------------------------------------------------------------------
# Table rendering
# ---------------------------------------------------------------------------


def render_failure_table(report: ParityReport, majority: Mapping[Task, float] | None = None) -> str:
    """Per-task failure-to-match table, optionally with the majority baseline."""
    header = f"{'task':<28}" + (f"{'majority %':>12}" if majority else "") + f"{'failure %':>12}"
    lines = [header]
    for task in TASKS:
        row = f"{task.value:<28}"
        if majority:
            row += f"{100 * majority[task]:>12.2f}"
        row += f"{100 * report.per_task_failure[task]:>12.2f}"
        lines.append(row)
    lines.append(f"overall match: {100 * report.overall_match:.2f}%  "
                 f"(task macro {100 * report.task_macro_match:.2f}%, "
                 f"{report.n_sentences} sentences)")
    return "\n".join(lines)


def render_adjudication_summary(summary: dict) -> str:
    header = f"{'task':<28}{'n':>5}{'reference %':>13}{'prediction %':>14}{'both wrong %':>14}{'unsure':>8}"
    lines = [header]
    rows = list(summary["per_task"].items()) + [("overall", summary["overall"])]
    for name, bucket in rows:
        n = bucket["n"]
        if not n:
            continue
        lines.append(
            f"{name:<28}{n:>5}"
            f"{100 * bucket['prefer_reference'] / n:>12.0f}%"
            f"{100 * bucket['prefer_prediction'] / n:>13.0f}%"
            f"{100 * bucket['both_wrong'] / n:>13.0f}%"
            f"{bucket['unsure']:>8}"
        )
    return "\n".join(lines)


def render_gold_comparison(comparison: dict) -> str:
    names = list(comparison["macro"])
    header = f"{'task':<28}{'n':>5}" + "".join(f"{name:>14}" for name in names)
    lines = [header]
    for row in comparison["rows"]:
        line = f"{row['task']:<28}{row['n']:>5}"
        for name in names:
            line += f"{100 * row[name]:>13.1f}%"
        lines.append(line)
    macro = "".join(f"{100 * comparison['macro'][name]:>13.1f}%" for name in names)
    lines.append(f"{'macro average':<28}{'':>5}{macro}")
    return "\n".join(lines)
