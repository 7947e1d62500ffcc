"""Rule-based multi-task sentence labeler (the "teacher").

A deterministic lexicon-and-cue engine. Matching semantics, pinned so rule
authors can predict every span:

* Tokenization: punctuation characters ``. , ; : ! ? ( ) [ ]`` are isolated
  into their own tokens, then the text is lowercased and split on whitespace.
  Hyphens, slashes and apostrophes stay inside tokens.
* Mention phrases match as token sequences, leftmost-longest, non-overlapping
  per task (matches for different tasks may overlap).
* A cue is in scope of a mention when fewer than ``window`` tokens separate
  the two spans (punctuation tokens count toward the distance) and no clause
  boundary token (``. ; : ! ?``) lies strictly between them. Negation
  pre-cues must end at or before the mention start; post-cues must start at
  or after the mention end; uncertainty cues work on either side.
* Per mention: any uncertainty cue in scope wins over negation; any negation
  cue in scope wins over the positive default.
* Per task, multiple mentions merge with precedence
  positive > uncertain > negative.
* no_finding is never matched: it is positive iff every other task resolves
  to no_mention or negative for the sentence, else negative.
"""

from __future__ import annotations

import json
import multiprocessing
import re
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from .core import (
    CorpusFormatError,
    LabelVector,
    MentionClass,
    SentenceRecord,
    Task,
    TASKS,
    TASK_INDEX,
    labels_line,
)

_PUNCT_RE = re.compile(r"([.,;:!?()\[\]])")
CLAUSE_BOUNDARY_TOKENS = frozenset({".", ";", ":", "!", "?"})


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens with punctuation isolated into its own tokens."""
    return _PUNCT_RE.sub(r" \1 ", text.lower()).split()


class RuleValidationError(ValueError):
    """A rule file parsed but violates the schema invariants."""


@dataclass(frozen=True)
class RuleSet:
    """Mention lexicons plus shared cue tables.

    All phrases are stored and matched as token tuples. ``window`` is the
    cue scope radius in tokens.
    """

    mention_phrases: dict[Task, tuple[str, ...]]
    negation_pre_cues: tuple[str, ...]
    negation_post_cues: tuple[str, ...]
    uncertainty_cues: tuple[str, ...]
    window: int
    version: str = "0"

    def __post_init__(self) -> None:
        if self.window < 1:
            raise RuleValidationError(f"window must be >= 1, got {self.window}")
        for task in TASKS:
            phrases = self.mention_phrases.get(task, ())
            if task is Task.NO_FINDING:
                if phrases:
                    raise RuleValidationError("no_finding is derived and must not carry mention phrases")
                continue
            if not phrases:
                raise RuleValidationError(f"task {task.value} has an empty mention lexicon")
        all_phrases = [p for phrases in self.mention_phrases.values() for p in phrases]
        for phrase in (*all_phrases, *self.negation_pre_cues, *self.negation_post_cues, *self.uncertainty_cues):
            if not phrase or not phrase.strip():
                raise RuleValidationError("phrases must be non-empty")
            if phrase != phrase.lower():
                raise RuleValidationError(f"phrases must be lowercase: {phrase!r}")

    def to_json_dict(self) -> dict:
        return {
            "version": self.version,
            "window": self.window,
            "negation_pre_cues": list(self.negation_pre_cues),
            "negation_post_cues": list(self.negation_post_cues),
            "uncertainty_cues": list(self.uncertainty_cues),
            "mention_phrases": {t.value: list(ps) for t, ps in self.mention_phrases.items() if ps},
        }

    def without_phrases(self, removed: Iterable[str]) -> "RuleSet":
        """A copy with the given mention phrases deleted (still validated)."""
        removed_set = {p.lower() for p in removed}
        pruned = {
            task: tuple(p for p in phrases if p not in removed_set)
            for task, phrases in self.mention_phrases.items()
        }
        return RuleSet(
            mention_phrases=pruned,
            negation_pre_cues=self.negation_pre_cues,
            negation_post_cues=self.negation_post_cues,
            uncertainty_cues=self.uncertainty_cues,
            window=self.window,
            version=self.version + "+pruned",
        )


def rules_from_json_dict(data: dict) -> RuleSet:
    try:
        mention_phrases: dict[Task, tuple[str, ...]] = {}
        for name, phrases in dict(data["mention_phrases"]).items():
            try:
                task = Task(name)
            except ValueError:
                raise RuleValidationError(f"unknown task in mention_phrases: {name!r}") from None
            mention_phrases[task] = tuple(str(p) for p in phrases)
        return RuleSet(
            mention_phrases=mention_phrases,
            negation_pre_cues=tuple(str(c) for c in data["negation_pre_cues"]),
            negation_post_cues=tuple(str(c) for c in data["negation_post_cues"]),
            uncertainty_cues=tuple(str(c) for c in data["uncertainty_cues"]),
            window=int(data["window"]),
            version=str(data.get("version", "0")),
        )
    except (KeyError, TypeError) as exc:
        raise RuleValidationError(f"rule file missing or malformed field: {exc}") from exc


def load_rules(path: str) -> RuleSet:
    """Load and validate a JSON rule file."""
    with open(path, encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as exc:
            raise RuleValidationError(f"{path}: not valid JSON: {exc}") from exc
    return rules_from_json_dict(data)


def save_rules(path: str, rules: RuleSet) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(rules.to_json_dict(), handle, indent=2, ensure_ascii=False)
        handle.write("\n")


@dataclass(frozen=True)
class MentionHit:
    """One resolved mention match. token_span is a [start, end) token range."""

    task: Task
    phrase: str
    token_span: tuple[int, int]
    resolved_class: MentionClass


@dataclass
class _CompiledRules:
    """Token-level index of a RuleSet: first token -> candidate phrases,
    longest first. Plain data, safe to pickle into worker processes."""

    rules: RuleSet
    mention_index: dict[str, list[tuple[tuple[str, ...], Task, str]]] = field(default_factory=dict)
    pre_cue_index: dict[str, list[tuple[str, ...]]] = field(default_factory=dict)
    post_cue_index: dict[str, list[tuple[str, ...]]] = field(default_factory=dict)
    unc_cue_index: dict[str, list[tuple[str, ...]]] = field(default_factory=dict)

    @classmethod
    def compile(cls, rules: RuleSet) -> "_CompiledRules":
        compiled = cls(rules=rules)
        for task, phrases in rules.mention_phrases.items():
            for phrase in phrases:
                tokens = tuple(tokenize(phrase))
                compiled.mention_index.setdefault(tokens[0], []).append((tokens, task, phrase))
        for bucket in compiled.mention_index.values():
            bucket.sort(key=lambda item: -len(item[0]))
        for cues, index in (
            (rules.negation_pre_cues, compiled.pre_cue_index),
            (rules.negation_post_cues, compiled.post_cue_index),
            (rules.uncertainty_cues, compiled.unc_cue_index),
        ):
            for cue in cues:
                tokens = tuple(tokenize(cue))
                index.setdefault(tokens[0], []).append(tokens)
        return compiled


_Span = tuple[int, int]


def _find_cue_spans(tokens: Sequence[str], index: dict[str, list[tuple[str, ...]]]) -> list[_Span]:
    spans = []
    for start, token in enumerate(tokens):
        for cue_tokens in index.get(token, ()):
            end = start + len(cue_tokens)
            if tuple(tokens[start:end]) == cue_tokens:
                spans.append((start, end))
    return spans


def _find_mentions(tokens: Sequence[str], compiled: _CompiledRules) -> list[tuple[Task, str, _Span]]:
    """Leftmost-longest, non-overlapping per task."""
    raw: dict[Task, list[tuple[_Span, str]]] = {}
    for start, token in enumerate(tokens):
        for phrase_tokens, task, phrase in compiled.mention_index.get(token, ()):
            end = start + len(phrase_tokens)
            if tuple(tokens[start:end]) == phrase_tokens:
                raw.setdefault(task, []).append(((start, end), phrase))
    mentions: list[tuple[Task, str, _Span]] = []
    for task, candidates in raw.items():
        # candidates arrive in (start asc, length desc) order by construction
        cursor = 0
        for (start, end), phrase in candidates:
            if start >= cursor:
                mentions.append((task, phrase, (start, end)))
                cursor = end
    return mentions


def _in_scope(cue: _Span, mention: _Span, window: int, blocked_prefix: Sequence[int]) -> bool:
    if cue[0] >= mention[1]:
        gap_start, gap_end = mention[1], cue[0]
    elif cue[1] <= mention[0]:
        gap_start, gap_end = cue[1], mention[0]
    else:
        return True  # overlapping spans: distance zero, nothing in between
    if gap_end - gap_start >= window:
        return False
    return blocked_prefix[gap_end] == blocked_prefix[gap_start]


def classify_tokens(tokens: Sequence[str], compiled: _CompiledRules) -> tuple[LabelVector, list[MentionHit]]:
    rules = compiled.rules
    blocked_prefix = [0]
    for token in tokens:
        blocked_prefix.append(blocked_prefix[-1] + (token in CLAUSE_BOUNDARY_TOKENS))

    pre_spans = _find_cue_spans(tokens, compiled.pre_cue_index)
    post_spans = _find_cue_spans(tokens, compiled.post_cue_index)
    unc_spans = _find_cue_spans(tokens, compiled.unc_cue_index)

    hits: list[MentionHit] = []
    resolved: dict[Task, MentionClass] = {}
    for task, phrase, span in _find_mentions(tokens, compiled):
        if any(_in_scope(cue, span, rules.window, blocked_prefix) for cue in unc_spans):
            cls = MentionClass.UNCERTAIN
        elif any(
            cue[1] <= span[0] and _in_scope(cue, span, rules.window, blocked_prefix)
            for cue in pre_spans
        ) or any(
            cue[0] >= span[1] and _in_scope(cue, span, rules.window, blocked_prefix)
            for cue in post_spans
        ):
            cls = MentionClass.NEGATIVE
        else:
            cls = MentionClass.POSITIVE
        hits.append(MentionHit(task=task, phrase=phrase, token_span=span, resolved_class=cls))
        prior = resolved.get(task)
        resolved[task] = cls if prior is None else max(prior, cls)

    labels = {task: resolved.get(task, MentionClass.NO_MENTION) for task in TASKS if task is not Task.NO_FINDING}
    labels[Task.NO_FINDING] = _no_finding_summary(labels)
    hits.sort(key=lambda h: (h.token_span, TASK_INDEX[h.task]))
    return LabelVector(labels), hits


def _no_finding_summary(labels: dict[Task, MentionClass]) -> MentionClass:
    clear = all(
        c in (MentionClass.NO_MENTION, MentionClass.NEGATIVE)
        for t, c in labels.items()
        if t is not Task.NO_FINDING
    )
    return MentionClass.POSITIVE if clear else MentionClass.NEGATIVE


def classify_sentence(text: str, rules: RuleSet) -> tuple[LabelVector, list[MentionHit]]:
    """Label one sentence. Pure: identical inputs give identical outputs."""
    return classify_tokens(tokenize(text), _CompiledRules.compile(rules))


class SentenceClassifier:
    """Reusable compiled form of a RuleSet for corpus-scale labeling."""

    def __init__(self, rules: RuleSet):
        self.rules = rules
        self._compiled = _CompiledRules.compile(rules)

    def classify(self, text: str) -> tuple[LabelVector, list[MentionHit]]:
        return classify_tokens(tokenize(text), self._compiled)

    def label(self, text: str) -> LabelVector:
        return self.classify(text)[0]


@dataclass(frozen=True)
class TimingStats:
    sentences: int
    seconds: float
    sentences_per_second: float


_worker_classifier: SentenceClassifier | None = None


def _init_worker(rules: RuleSet) -> None:
    global _worker_classifier
    _worker_classifier = SentenceClassifier(rules)


def _label_line(record: SentenceRecord) -> str:
    assert _worker_classifier is not None
    labels = _worker_classifier.label(record.text)
    return labels_line(record.report_id, record.sentence_index, labels)


def classify_corpus(
    records: Iterable[SentenceRecord],
    rules: RuleSet,
    out_path: str,
    parallelism: int = 1,
) -> TimingStats:
    """Label a sentence stream into a labels file.

    Output order matches input order regardless of parallelism, and the
    emitted bytes are identical for any parallelism degree.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    start = time.perf_counter()
    n = 0
    with open(out_path, "w", encoding="utf-8") as out:
        if parallelism == 1:
            classifier = SentenceClassifier(rules)
            for record in records:
                out.write(labels_line(record.report_id, record.sentence_index, classifier.label(record.text)))
                out.write("\n")
                n += 1
        else:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(parallelism, initializer=_init_worker, initargs=(rules,)) as pool:
                for line in pool.imap(_label_line, records, chunksize=256):
                    out.write(line)
                    out.write("\n")
                    n += 1
    elapsed = time.perf_counter() - start
    return TimingStats(sentences=n, seconds=elapsed, sentences_per_second=n / elapsed if elapsed > 0 else 0.0)


def aggregate_report(sentence_labels: Sequence[LabelVector]) -> LabelVector:
    """Merge sentence label vectors into one report-level vector.

    Per task the precedence is positive > uncertain > negative > no_mention;
    no_finding is then recomputed from the merged result.
    """
    if not sentence_labels:
        raise ValueError("cannot aggregate an empty report")
    merged: dict[Task, MentionClass] = {}
    for task in TASKS:
        if task is Task.NO_FINDING:
            continue
        merged[task] = max(lv[task] for lv in sentence_labels)
    merged[Task.NO_FINDING] = _no_finding_summary(merged)
    return LabelVector(merged)


def label_corpus_file(corpus_path: str, rules: RuleSet, out_path: str, parallelism: int = 1) -> TimingStats:
    """classify_corpus over a corpus file, surfacing I/O errors with positions."""
    from .core import iter_corpus

    def checked() -> Iterator[SentenceRecord]:
        try:
            yield from iter_corpus(corpus_path)
        except OSError as exc:
            raise CorpusFormatError(corpus_path, 0, f"I/O error: {exc}") from exc

    return classify_corpus(checked(), rules, out_path, parallelism=parallelism)
