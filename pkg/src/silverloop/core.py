"""Shared domain vocabulary: tasks, mention classes, sentences, label vectors.

Everything in this module is an immutable value type, safe to share freely
between concurrent workers. Rule matching, model math, and tokenization all
live elsewhere.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Iterable, Iterator, Mapping


class Task(str, Enum):
    """The 14 labeling tasks, in canonical (report table) row order."""

    NO_FINDING = "no_finding"
    ENLARGED_CARDIOMEDIASTINUM = "enlarged_cardiomediastinum"
    CARDIOMEGALY = "cardiomegaly"
    LUNG_LESION = "lung_lesion"
    AIRSPACE_OPACITY = "airspace_opacity"
    EDEMA = "edema"
    CONSOLIDATION = "consolidation"
    PNEUMONIA = "pneumonia"
    ATELECTASIS = "atelectasis"
    PNEUMOTHORAX = "pneumothorax"
    PLEURAL_EFFUSION = "pleural_effusion"
    PLEURAL_OTHER = "pleural_other"
    FRACTURE = "fracture"
    SUPPORT_DEVICES = "support_devices"


TASKS: tuple[Task, ...] = tuple(Task)
TASK_INDEX: dict[Task, int] = {t: i for i, t in enumerate(TASKS)}


class MentionClass(IntEnum):
    """Per-task sentence classification.

    Ordinal order doubles as the merge precedence (positive > uncertain >
    negative > no_mention) and as the pinned argmax tie-break order.
    """

    NO_MENTION = 0
    NEGATIVE = 1
    UNCERTAIN = 2
    POSITIVE = 3

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def from_key(cls, key: str) -> "MentionClass":
        try:
            return cls[key.upper()]
        except KeyError:
            raise ValueError(f"unknown mention class {key!r}") from None


CLASSES: tuple[MentionClass, ...] = tuple(MentionClass)

# no_finding is a two-class task: it summarizes the other 13 and never takes
# no_mention or uncertain.
NO_FINDING_CLASSES: tuple[MentionClass, ...] = (
    MentionClass.NEGATIVE,
    MentionClass.POSITIVE,
)


def valid_classes(task: Task) -> tuple[MentionClass, ...]:
    """The mention classes a task is allowed to take."""
    if task is Task.NO_FINDING:
        return NO_FINDING_CLASSES
    return CLASSES


def is_valid_label(task: Task, label: MentionClass) -> bool:
    return label in valid_classes(task)


_WHITESPACE_RE = re.compile(r"\s+")


def normalize_sentence(text: str) -> str:
    """Deduplication key for a sentence: casefold, collapse whitespace,
    strip terminal punctuation.

    Only terminal ``.!?;`` runs are stripped; internal punctuation can carry
    meaning ("s/p", hyphens) and is kept. Idempotent by construction.
    """
    key = _WHITESPACE_RE.sub(" ", text.casefold()).strip()
    return key.rstrip(".!?;").rstrip()


@dataclass(frozen=True)
class SentenceRecord:
    """One sentence of one report. (report_id, sentence_index) is unique
    within a corpus; dedup_key is derived from text."""

    report_id: str
    sentence_index: int
    text: str
    dedup_key: str = ""

    def __post_init__(self) -> None:
        if self.sentence_index < 0:
            raise ValueError("sentence_index must be non-negative")
        object.__setattr__(self, "dedup_key", normalize_sentence(self.text))


class LabelVector:
    """A total assignment of one MentionClass per task.

    Immutable; validated at construction (all 14 tasks present, no_finding
    restricted to positive/negative).
    """

    __slots__ = ("_classes",)

    def __init__(self, labels: Mapping[Task, MentionClass]):
        if len(labels) != len(TASKS) or set(labels) != set(TASKS):
            missing = sorted(t.value for t in set(TASKS) - set(labels))
            raise ValueError(f"label vector must cover all 14 tasks; missing {missing}")
        for task, label in labels.items():
            if not is_valid_label(task, label):
                raise ValueError(f"{label.key} is not a valid label for {task.value}")
        object.__setattr__(self, "_classes", tuple(labels[t] for t in TASKS))

    def __getitem__(self, task: Task) -> MentionClass:
        return self._classes[TASK_INDEX[task]]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LabelVector) and self._classes == other._classes

    def __hash__(self) -> int:
        return hash(self._classes)

    def __repr__(self) -> str:
        parts = ", ".join(f"{t.value}={c.key}" for t, c in self.items() if c is not MentionClass.NO_MENTION)
        return f"LabelVector({parts or 'all no_mention'})"

    def __setattr__(self, name: str, value: object) -> None:
        raise AttributeError("LabelVector is immutable")

    def items(self) -> Iterator[tuple[Task, MentionClass]]:
        return zip(TASKS, self._classes)

    def as_tuple(self) -> tuple[MentionClass, ...]:
        return self._classes

    def to_json_dict(self) -> dict[str, str]:
        return {t.value: c.key for t, c in self.items()}

    @classmethod
    def from_json_dict(cls, data: Mapping[str, str]) -> "LabelVector":
        return cls({Task(k): MentionClass.from_key(v) for k, v in data.items()})


class PartialLabelVector:
    """Labels for any subset of tasks. Persisted records carry at least one
    entry; empty instances are allowed only transiently while building."""

    __slots__ = ("_labels",)

    def __init__(self, labels: Mapping[Task, MentionClass]):
        for task, label in labels.items():
            if not is_valid_label(task, label):
                raise ValueError(f"{label.key} is not a valid label for {task.value}")
        object.__setattr__(self, "_labels", dict(labels))

    def __len__(self) -> int:
        return len(self._labels)

    def __contains__(self, task: Task) -> bool:
        return task in self._labels

    def __getitem__(self, task: Task) -> MentionClass:
        return self._labels[task]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, PartialLabelVector) and self._labels == other._labels

    def __repr__(self) -> str:
        parts = ", ".join(f"{t.value}={c.key}" for t, c in self.items())
        return f"PartialLabelVector({parts})"

    def __setattr__(self, name: str, value: object) -> None:
        raise AttributeError("PartialLabelVector is immutable")

    def items(self) -> Iterator[tuple[Task, MentionClass]]:
        for task in TASKS:
            if task in self._labels:
                yield task, self._labels[task]

    def tasks(self) -> list[Task]:
        return [t for t in TASKS if t in self._labels]

    def to_json_dict(self) -> dict[str, str]:
        return {t.value: c.key for t, c in self.items()}

    @classmethod
    def from_json_dict(cls, data: Mapping[str, str]) -> "PartialLabelVector":
        return cls({Task(k): MentionClass.from_key(v) for k, v in data.items()})


# ---------------------------------------------------------------------------
# JSONL file formats
#
# Corpus file:  {"report_id": str, "sentence_index": int, "text": str}
# Labels file:  {"report_id": str, "sentence_index": int, "labels": {task: class}}
# ---------------------------------------------------------------------------


class CorpusFormatError(ValueError):
    """A corpus or labels file failed to parse; carries the line number."""

    def __init__(self, path: str, line_number: int, message: str):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = path
        self.line_number = line_number


def dump_json_line(obj: object) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def iter_corpus(path: str) -> Iterator[SentenceRecord]:
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                yield SentenceRecord(
                    report_id=str(row["report_id"]),
                    sentence_index=int(row["sentence_index"]),
                    text=str(row["text"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(path, lineno, f"bad corpus record: {exc}") from exc


def read_corpus(path: str) -> list[SentenceRecord]:
    return list(iter_corpus(path))


def write_corpus(path: str, records: Iterable[SentenceRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as handle:
        for rec in records:
            handle.write(dump_json_line(
                {"report_id": rec.report_id, "sentence_index": rec.sentence_index, "text": rec.text}
            ))
            handle.write("\n")
            n += 1
    return n


SentenceKey = tuple[str, int]


def read_labels(path: str) -> dict[SentenceKey, LabelVector]:
    """Load a labels file keyed by (report_id, sentence_index), input order."""
    out: dict[SentenceKey, LabelVector] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                key = (str(row["report_id"]), int(row["sentence_index"]))
                out[key] = LabelVector.from_json_dict(row["labels"])
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(path, lineno, f"bad labels record: {exc}") from exc
    return out


def labels_line(report_id: str, sentence_index: int, labels: LabelVector) -> str:
    return dump_json_line(
        {"report_id": report_id, "sentence_index": sentence_index, "labels": labels.to_json_dict()}
    )


def write_labels(path: str, rows: Iterable[tuple[str, int, LabelVector]]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as handle:
        for report_id, sentence_index, labels in rows:
            handle.write(labels_line(report_id, sentence_index, labels))
            handle.write("\n")
            n += 1
    return n
