"""Synthetic report generation with exact gold labels, corpus ingestion,
and report-level splitting with unseen-sentence test filtering.

The generator is template-based so gold labels are exact by construction:
each template declares the label effect of every finding slot, and noise
(typos, synonym swaps) perturbs text only, never gold. The template
vocabulary is co-designed with the shipped rule files: on noise-free text
both ``rules/fixture.json`` and ``rules/default.json`` reproduce the gold
labels exactly. Typos are the lever for manufacturing teacher errors: by
default they avoid cue words; ``cue_typos=True`` lifts that protection.
"""

from __future__ import annotations

import csv
import json
import random
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .core import (
    CorpusFormatError,
    LabelVector,
    MentionClass,
    SentenceRecord,
    Task,
    TASKS,
    dump_json_line,
    write_corpus,
)

# ---------------------------------------------------------------------------
# Template bank
# ---------------------------------------------------------------------------

FINDING_SLOT_RE = re.compile(r"\{(f\d?)\}")

# Mention phrases the generator may bind into finding slots. Kept in sync
# with rules/fixture.json (rules/default.json is a superset).
GENERATOR_PHRASES: dict[Task, tuple[str, ...]] = {
    Task.ENLARGED_CARDIOMEDIASTINUM: ("enlarged cardiomediastinum", "widened mediastinum"),
    Task.CARDIOMEGALY: ("cardiomegaly", "enlarged cardiac silhouette"),
    Task.LUNG_LESION: ("lung lesion", "pulmonary nodule"),
    Task.AIRSPACE_OPACITY: ("airspace opacity", "patchy opacity"),
    Task.EDEMA: ("pulmonary edema", "vascular congestion", "pulmonary congestion", "edema"),
    Task.CONSOLIDATION: ("consolidation", "airspace consolidation"),
    Task.PNEUMONIA: ("pneumonia", "infectious process"),
    Task.ATELECTASIS: ("atelectasis", "volume loss"),
    Task.PNEUMOTHORAX: ("pneumothorax",),
    Task.PLEURAL_EFFUSION: ("pleural effusion", "pleural fluid", "effusion"),
    Task.PLEURAL_OTHER: ("pleural thickening", "pleural scarring"),
    Task.FRACTURE: ("rib fracture", "fracture"),
    Task.SUPPORT_DEVICES: ("endotracheal tube", "central venous catheter", "pacemaker"),
}

FILLERS: dict[str, tuple[str, ...]] = {
    "size": ("small", "large", "moderate", "tiny", "trace"),
    "loc": ("right base", "left base", "right upper zone", "left lower zone", "both bases"),
    "adj": ("mild", "extensive", "subtle", "chronic"),
    "comp": ("compared to prior", "since the prior exam", "from the previous study"),
}

SYNONYMS: dict[str, str] = {
    "small": "tiny",
    "large": "sizable",
    "moderate": "modest",
    "seen": "noted",
    "stable": "unchanged",
    "prior": "earlier",
    "study": "exam",
    "shows": "demonstrates",
    "present": "evident",
}


@dataclass(frozen=True)
class Template:
    """Sentence template. ``effects`` maps finding slot names (``f``, ``f2``)
    to the mention class the bound task receives."""

    text: str
    effects: tuple[tuple[str, MentionClass], ...] = ()


DEFAULT_TEMPLATES: tuple[Template, ...] = (
    # positive
    Template("there is a {size} {f}.", (("f", MentionClass.POSITIVE),)),
    Template("a {size} {f} is seen in the {loc}.", (("f", MentionClass.POSITIVE),)),
    Template("{adj} {f} is present.", (("f", MentionClass.POSITIVE),)),
    Template("stable {size} {f} {comp}.", (("f", MentionClass.POSITIVE),)),
    Template("interval increase in {f}.", (("f", MentionClass.POSITIVE),)),
    Template("the {loc} shows {adj} {f}.", (("f", MentionClass.POSITIVE),)),
    # negative
    Template("no {f}.", (("f", MentionClass.NEGATIVE),)),
    Template("there is no {f}.", (("f", MentionClass.NEGATIVE),)),
    Template("no {f} or {f2}.", (("f", MentionClass.NEGATIVE), ("f2", MentionClass.NEGATIVE))),
    Template("without {f} or {f2}.", (("f", MentionClass.NEGATIVE), ("f2", MentionClass.NEGATIVE))),
    Template("the {f} has resolved.", (("f", MentionClass.NEGATIVE),)),
    Template("no evidence of {f} in the {loc}.", (("f", MentionClass.NEGATIVE),)),
    Template("the lungs are well expanded without {f}.", (("f", MentionClass.NEGATIVE),)),
    # uncertain
    Template("possible {f}.", (("f", MentionClass.UNCERTAIN),)),
    Template("{f} is possible.", (("f", MentionClass.UNCERTAIN),)),
    Template("findings may represent {f}.", (("f", MentionClass.UNCERTAIN),)),
    Template("cannot exclude {f}.", (("f", MentionClass.UNCERTAIN),)),
    Template("there is a possible {size} {f} in the {loc}.", (("f", MentionClass.UNCERTAIN),)),
    # multi-finding
    Template("no {f} but there is a {size} {f2}.", (("f", MentionClass.NEGATIVE), ("f2", MentionClass.POSITIVE))),
    Template("there is {f}; no {f2}.", (("f", MentionClass.POSITIVE), ("f2", MentionClass.NEGATIVE))),
    Template("{f} and {f2} are present.", (("f", MentionClass.POSITIVE), ("f2", MentionClass.POSITIVE))),
    Template("findings may represent {f}; no {f2}.", (("f", MentionClass.UNCERTAIN), ("f2", MentionClass.NEGATIVE))),
    # no finding at all
    Template("the lungs are clear."),
    Template("no acute cardiopulmonary abnormality."),
    Template("normal heart size and clear lungs."),
    Template("unremarkable study."),
)


@dataclass(frozen=True)
class NoiseConfig:
    """Text perturbation that never touches gold labels.

    With cue_typos=False (default) typos hit only non-cue words, so the
    teacher still sees every negation/uncertainty cue. cue_typos=True aims
    the typos at the cue vocabulary instead: corrupted cues are how teacher
    errors are manufactured for the active-learning experiment.
    """

    typo_rate: float = 0.0
    synonym_swap_rate: float = 0.0
    cue_typos: bool = False

    def __post_init__(self) -> None:
        for name in ("typo_rate", "synonym_swap_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be a probability, got {value}")


@dataclass(frozen=True)
class GeneratorConfig:
    n_reports: int
    sentences_per_report: tuple[int, int] = (2, 6)
    seed: int = 0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    templates: tuple[Template, ...] = DEFAULT_TEMPLATES

    def __post_init__(self) -> None:
        if self.n_reports < 1:
            raise ValueError("n_reports must be >= 1")
        lo, hi = self.sentences_per_report
        if lo < 1 or hi < lo:
            raise ValueError(f"bad sentences_per_report range {self.sentences_per_report}")
        if not self.templates:
            raise ValueError("template bank is empty")


# Words whose corruption changes what the teacher sees as negation or
# uncertainty. Must cover the cue vocabulary of the shipped rule files.
CUE_WORDS = frozenset(
    "no without evidence of free negative for absence resolution clear "
    "has resolved is not seen cleared absent "
    "possible possibly probable likely questionable concerning suspicious "
    "cannot exclude excluded may represent reflect be equivocal".split()
)

_ALPHABET = "abcdefghijklmnopqrstuvwxyz"
_WORD_CORE_RE = re.compile(r"^([^a-z0-9]*)([a-z0-9-]*)([^a-z0-9]*)$")


def _typo(word: str, rng: random.Random) -> str:
    """One character edit, guaranteed to change the word."""
    op = rng.randrange(4)
    pos = rng.randrange(len(word))
    if op == 0 or (op == 3 and (pos + 1 >= len(word) or word[pos] == word[pos + 1])):
        others = _ALPHABET.replace(word[pos], "") if word[pos] in _ALPHABET else _ALPHABET
        return word[:pos] + others[rng.randrange(len(others))] + word[pos + 1:]
    if op == 1 and len(word) > 1:  # delete
        return word[:pos] + word[pos + 1:]
    if op == 2 or len(word) == 1:  # insert
        return word[:pos] + _ALPHABET[rng.randrange(26)] + word[pos:]
    return word[:pos] + word[pos + 1] + word[pos] + word[pos + 2:]  # transpose


def _apply_noise(words: list[str], noise: NoiseConfig, rng: random.Random) -> list[str]:
    out = []
    for word in words:
        match = _WORD_CORE_RE.match(word)
        if match is None:
            out.append(word)
            continue
        prefix, core, suffix = match.groups()
        if core in SYNONYMS and noise.synonym_swap_rate > 0 and rng.random() < noise.synonym_swap_rate:
            core = SYNONYMS[core]
        typo_target = (core in CUE_WORDS) if noise.cue_typos else (core not in CUE_WORDS)
        if len(core) >= 2 and noise.typo_rate > 0 and typo_target and rng.random() < noise.typo_rate:
            core = _typo(core, rng)
        out.append(prefix + core + suffix)
    return out


def _gold_vector(effects: dict[Task, MentionClass]) -> LabelVector:
    labels = {t: effects.get(t, MentionClass.NO_MENTION) for t in TASKS if t is not Task.NO_FINDING}
    clear = all(c in (MentionClass.NO_MENTION, MentionClass.NEGATIVE) for c in labels.values())
    labels[Task.NO_FINDING] = MentionClass.POSITIVE if clear else MentionClass.NEGATIVE
    return LabelVector(labels)


_REAL_TASKS = tuple(t for t in TASKS if t is not Task.NO_FINDING)


def _render_sentence(template: Template, rng: random.Random) -> tuple[str, LabelVector]:
    text = template.text
    effects: dict[Task, MentionClass] = {}
    slot_names = FINDING_SLOT_RE.findall(text)
    tasks = rng.sample(_REAL_TASKS, len(slot_names)) if slot_names else []
    effect_map = dict(template.effects)
    for slot, task in zip(slot_names, tasks):
        phrase = GENERATOR_PHRASES[task][rng.randrange(len(GENERATOR_PHRASES[task]))]
        text = text.replace("{" + slot + "}", phrase, 1)
        effects[task] = effect_map[slot]
    for name, choices in FILLERS.items():
        while "{" + name + "}" in text:
            text = text.replace("{" + name + "}", choices[rng.randrange(len(choices))], 1)
    return text, _gold_vector(effects)


def generate(config: GeneratorConfig) -> Iterator[tuple[SentenceRecord, LabelVector]]:
    """Yield (sentence, gold label) pairs. Deterministic given the seed.

    Noise draws come from a per-sentence stream, so the same seed produces
    structurally identical corpora (same templates, slots, gold) under any
    noise settings; only the rendered text differs.
    """
    rng = random.Random(config.seed)
    lo, hi = config.sentences_per_report
    for i in range(config.n_reports):
        report_id = f"r{i:06d}"
        for j in range(rng.randint(lo, hi)):
            template = config.templates[rng.randrange(len(config.templates))]
            text, gold = _render_sentence(template, rng)
            if config.noise.typo_rate > 0 or config.noise.synonym_swap_rate > 0:
                noise_rng = random.Random(f"{config.seed}:{report_id}:{j}:noise")
                text = " ".join(_apply_noise(text.split(), config.noise, noise_rng))
            yield SentenceRecord(report_id=report_id, sentence_index=j, text=text), gold


def generate_files(config: GeneratorConfig, corpus_path: str, gold_path: str) -> int:
    """Write corpus and gold labels files; returns the sentence count."""
    n = 0
    with open(corpus_path, "w", encoding="utf-8") as corpus_out, open(gold_path, "w", encoding="utf-8") as gold_out:
        for record, gold in generate(config):
            corpus_out.write(dump_json_line(
                {"report_id": record.report_id, "sentence_index": record.sentence_index, "text": record.text}
            ))
            corpus_out.write("\n")
            gold_out.write(dump_json_line(
                {"report_id": record.report_id, "sentence_index": record.sentence_index,
                 "labels": gold.to_json_dict()}
            ))
            gold_out.write("\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitManifest:
    """Report-level split plus the unseen-sentence test filter."""

    train_report_ids: frozenset[str]
    val_report_ids: frozenset[str]
    test_report_ids: frozenset[str]
    unseen_test_keys: frozenset[str]

    def split_of(self, report_id: str) -> str:
        if report_id in self.train_report_ids:
            return "train"
        if report_id in self.val_report_ids:
            return "val"
        if report_id in self.test_report_ids:
            return "test"
        raise KeyError(f"report {report_id!r} is not in the manifest")

    def to_json_dict(self) -> dict:
        return {
            "train_report_ids": sorted(self.train_report_ids),
            "val_report_ids": sorted(self.val_report_ids),
            "test_report_ids": sorted(self.test_report_ids),
            "unseen_test_keys": sorted(self.unseen_test_keys),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SplitManifest":
        return cls(
            train_report_ids=frozenset(data["train_report_ids"]),
            val_report_ids=frozenset(data["val_report_ids"]),
            test_report_ids=frozenset(data["test_report_ids"]),
            unseen_test_keys=frozenset(data["unseen_test_keys"]),
        )


def save_manifest(path: str, manifest: SplitManifest) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(manifest.to_json_dict(), handle, indent=2)
        handle.write("\n")


def load_manifest(path: str) -> SplitManifest:
    with open(path, encoding="utf-8") as handle:
        return SplitManifest.from_json_dict(json.load(handle))


def split(
    records: Iterable[SentenceRecord],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitManifest:
    """Split by report_id so all sentences of a report share a split.

    The unseen-test filter keeps the dedup keys that occur in test reports
    but in no train report.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative")

    report_order: list[str] = []
    keys_by_report: dict[str, set[str]] = {}
    for rec in records:
        if rec.report_id not in keys_by_report:
            report_order.append(rec.report_id)
            keys_by_report[rec.report_id] = set()
        keys_by_report[rec.report_id].add(rec.dedup_key)

    n = len(report_order)
    n_positive = sum(1 for f in fractions if f > 0)
    if n < n_positive:
        raise ValueError(f"only {n} reports for {n_positive} non-empty splits")

    shuffled = list(report_order)
    random.Random(seed).shuffle(shuffled)
    sizes = [int(fractions[0] * n), int(fractions[1] * n), 0]
    sizes[2] = n - sizes[0] - sizes[1]
    # floor allocation can empty a small positive-fraction split; repair by
    # taking one report from the largest split
    for i in range(3):
        while fractions[i] > 0 and sizes[i] == 0:
            sizes[max(range(3), key=lambda j: sizes[j])] -= 1
            sizes[i] += 1
    train = shuffled[:sizes[0]]
    val = shuffled[sizes[0]:sizes[0] + sizes[1]]
    test = shuffled[sizes[0] + sizes[1]:]

    train_keys = set().union(*(keys_by_report[r] for r in train)) if train else set()
    test_keys = set().union(*(keys_by_report[r] for r in test)) if test else set()
    return SplitManifest(
        train_report_ids=frozenset(train),
        val_report_ids=frozenset(val),
        test_report_ids=frozenset(test),
        unseen_test_keys=frozenset(test_keys - train_keys),
    )


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

_SENTENCE_BOUNDARY_RE = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[str]:
    """Split on ./?/! followed by whitespace; used when no sentence_index."""
    return [part for part in _SENTENCE_BOUNDARY_RE.split(text.strip()) if part]


def _decode_lines(path: str) -> Iterator[tuple[int, str]]:
    with open(path, "rb") as handle:
        for lineno, raw in enumerate(handle, start=1):
            try:
                yield lineno, raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CorpusFormatError(path, lineno, f"undecodable bytes: {exc}") from exc


def _expand_row(report_id: str, sentence_index: object, text: str) -> Iterator[SentenceRecord]:
    if sentence_index is None or sentence_index == "":
        for idx, sentence in enumerate(split_sentences(text)):
            yield SentenceRecord(report_id=report_id, sentence_index=idx, text=sentence)
    else:
        yield SentenceRecord(report_id=report_id, sentence_index=int(sentence_index), text=text)


def ingest(path: str, fmt: str, out_path: str) -> int:
    """Convert a jsonl or csv source into the canonical corpus format."""
    if fmt not in ("jsonl", "csv"):
        raise ValueError(f"unsupported format {fmt!r}")
    records: list[SentenceRecord] = []
    if fmt == "jsonl":
        for lineno, line in _decode_lines(path):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                records.extend(_expand_row(str(row["report_id"]), row.get("sentence_index"), str(row["text"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(path, lineno, f"bad record: {exc}") from exc
    else:
        lines = _decode_lines(path)
        reader = csv.reader(line for _, line in lines)
        try:
            header = next(reader)
        except StopIteration:
            raise CorpusFormatError(path, 1, "empty csv file") from None
        required = {"report_id", "text"}
        if not required.issubset(header):
            raise CorpusFormatError(path, 1, f"csv header must contain report_id,text; got {header}")
        columns = {name: i for i, name in enumerate(header)}
        index_col = columns.get("sentence_index")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sentence_index = row[index_col] if index_col is not None else None
                records.extend(_expand_row(row[columns["report_id"]], sentence_index, row[columns["text"]]))
            except (IndexError, ValueError) as exc:
                raise CorpusFormatError(path, lineno, f"bad row: {exc}") from exc
    write_corpus(out_path, records)
    return len(records)
