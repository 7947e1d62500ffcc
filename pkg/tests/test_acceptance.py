"""End-to-end acceptance suite.

Each test prints one PASS line (run with ``pytest -s`` to see them all).
The two experiment pipelines are module-scoped fixtures so their cost is
paid once; every threshold below is asserted at its stated tolerance.
"""

import random
import time

import pytest

from oracles import oracle_classify, oracle_micro_f1
from silverloop import active, corpus, evaluate, rules as rules_mod, surrogate
from silverloop.core import (
    LabelVector,
    MentionClass,
    SentenceRecord,
    Task,
    TASKS,
    read_corpus,
    read_labels,
    valid_classes,
)

RULES_DEFAULT = "rules/default.json"
RULES_FIXTURE = "rules/fixture.json"


def _rules_path(name):
    import os

    return os.path.join(os.path.dirname(__file__), "..", "rules", name)


# ---------------------------------------------------------------------------
# Criterion 1: distillation parity on a 50k-sentence synthetic corpus
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def parity_world(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("parity")
    started = time.perf_counter()

    config = corpus.GeneratorConfig(n_reports=12500, sentences_per_report=(2, 6), seed=42)
    corpus.generate_files(config, str(tmp / "corpus.jsonl"), str(tmp / "gold.jsonl"))
    ruleset = rules_mod.load_rules(_rules_path("default.json"))
    rules_mod.label_corpus_file(str(tmp / "corpus.jsonl"), ruleset, str(tmp / "teacher.jsonl"))

    records = read_corpus(str(tmp / "corpus.jsonl"))
    teacher = read_labels(str(tmp / "teacher.jsonl"))
    manifest = corpus.split(records, (0.8, 0.1, 0.1), seed=42)

    train_set = [
        (r.text, teacher[(r.report_id, r.sentence_index)])
        for r in records
        if r.report_id in manifest.train_report_ids
    ]
    model, logs = surrogate.train(train_set, surrogate.TrainConfig(epochs=5, seed=1))

    test_records = [r for r in records if r.report_id in manifest.test_report_ids]
    surrogate.predict_corpus(test_records, model, str(tmp / "student.jsonl"), batch_size=256)
    student = read_labels(str(tmp / "student.jsonl"))
    teacher_test = {k: teacher[k] for k in student}
    dedup = {(r.report_id, r.sentence_index): r.dedup_key for r in test_records}

    return {
        "tmp": tmp,
        "records": records,
        "n_sentences": len(records),
        "manifest": manifest,
        "teacher_test": teacher_test,
        "student": student,
        "dedup": dedup,
        "model": model,
        "train_logs": logs,
        "elapsed": time.perf_counter() - started,
    }


def test_criterion_1_distillation_parity(parity_world):
    world = parity_world
    assert world["n_sentences"] >= 50_000

    unseen = evaluate.parity(
        world["teacher_test"],
        world["student"],
        restrict_to=set(world["manifest"].unseen_test_keys),
        dedup_keys=world["dedup"],
    )
    assert unseen.n_sentences > 100  # the filter leaves a real test set
    assert unseen.overall_match >= 0.99, f"unseen parity {unseen.overall_match:.4f}"
    worst_task, worst = max(unseen.per_task_failure.items(), key=lambda kv: kv[1])
    assert worst <= 0.015, f"{worst_task.value} failure {worst:.4f}"
    assert world["elapsed"] <= 600, f"pipeline took {world['elapsed']:.0f}s"
    print(
        f"\nACCEPTANCE 1 PASS distillation parity: unseen {100 * unseen.overall_match:.2f}% "
        f"over {unseen.n_sentences} sentences, worst task failure {100 * worst:.2f}% "
        f"({world['elapsed']:.0f}s)"
    )


# ---------------------------------------------------------------------------
# Criterion 2: one active-learning round beats the noisy teacher
# ---------------------------------------------------------------------------

DELETED_PHRASES = ("vascular congestion", "patchy opacity")


@pytest.fixture(scope="module")
def noisy_world(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("noisy")
    started = time.perf_counter()

    config = corpus.GeneratorConfig(
        n_reports=12500,
        sentences_per_report=(2, 6),
        seed=99,
        noise=corpus.NoiseConfig(typo_rate=0.8, synonym_swap_rate=0.1, cue_typos=True),
    )
    corpus.generate_files(config, str(tmp / "corpus.jsonl"), str(tmp / "gold.jsonl"))
    noisy_teacher = rules_mod.load_rules(_rules_path("default.json")).without_phrases(DELETED_PHRASES)
    rules_mod.label_corpus_file(str(tmp / "corpus.jsonl"), noisy_teacher, str(tmp / "teacher.jsonl"))

    records = read_corpus(str(tmp / "corpus.jsonl"))
    sentences = {(r.report_id, r.sentence_index): r for r in records}
    teacher = read_labels(str(tmp / "teacher.jsonl"))
    gold = read_labels(str(tmp / "gold.jsonl"))
    manifest = corpus.split(records, (0.8, 0.1, 0.1), seed=99)

    heldout_items, shortfalls = active.build_heldout(teacher, sentences, per_cell=10, seed=11)
    heldout_keys = {item.dedup_key for item in heldout_items}

    train_set = [
        (r.text, teacher[(r.report_id, r.sentence_index)])
        for r in records
        if r.report_id in manifest.train_report_ids
    ]
    model, _ = surrogate.train(train_set, surrogate.TrainConfig(epochs=5, seed=1, word_dropout=0.1))

    val_records = [r for r in records if r.report_id in manifest.val_report_ids]
    surrogate.predict_corpus(
        val_records, model, str(tmp / "val_labels.jsonl"), str(tmp / "val_probs.jsonl"), batch_size=256
    )
    probs = active.read_probs(str(tmp / "val_probs.jsonl"))
    selection = active.select_uncertain(probs, sentences, k_per_task=100, exclude=heldout_keys)

    store = active.AnnotationStore(str(tmp / "store.jsonl"))
    for item in heldout_items:
        key = (item.report_id, item.sentence_index)
        store.record(active.AnnotationRecord(
            dedup_key=item.dedup_key, report_id=item.report_id, sentence_index=item.sentence_index,
            task=item.task, label=gold[key][item.task], annotator_id="gold_oracle", source="heldout",
        ))
    for item in selection:
        key = (item.report_id, item.sentence_index)
        for task in item.tasks:
            store.record(active.AnnotationRecord(
                dedup_key=item.dedup_key, report_id=item.report_id, sentence_index=item.sentence_index,
                task=task, label=gold[key][task], annotator_id="gold_oracle", source="active_round",
            ))

    result = active.run_round(
        sentences, teacher, model, store,
        active.RoundConfig(train=surrogate.TrainConfig(epochs=1, batch_size=8, learning_rate=7.5e-3, seed=2)),
    )
    return {
        "tmp": tmp,
        "sentences": sentences,
        "teacher": teacher,
        "gold": gold,
        "heldout_items": heldout_items,
        "shortfalls": shortfalls,
        "heldout_keys": heldout_keys,
        "selection": selection,
        "store": store,
        "model": model,
        "result": result,
        "elapsed": time.perf_counter() - started,
    }


def test_criterion_2_active_learning_gain(noisy_world):
    world = noisy_world
    macros = world["result"].comparison["macro"]
    teacher_acc = macros["teacher"]
    raw_acc = macros["student_raw"]
    post_acc = macros["student_post"]

    assert 0.70 <= teacher_acc <= 0.90, f"noisy teacher accuracy {teacher_acc:.3f} outside band"
    assert post_acc - teacher_acc >= 0.030, f"post-teacher gain {100 * (post_acc - teacher_acc):.1f} pts"
    assert post_acc - raw_acc >= 0.030, f"post-raw gain {100 * (post_acc - raw_acc):.1f} pts"
    assert world["elapsed"] <= 300, f"pipeline took {world['elapsed']:.0f}s"
    print(
        f"\nACCEPTANCE 2 PASS active-learning gain: teacher {100 * teacher_acc:.1f}%, "
        f"raw {100 * raw_acc:.1f}%, post {100 * post_acc:.1f}% "
        f"(+{100 * (post_acc - teacher_acc):.1f} vs teacher, +{100 * (post_acc - raw_acc):.1f} vs raw, "
        f"{world['elapsed']:.0f}s)"
    )


# ---------------------------------------------------------------------------
# Criterion 3: analytic gradients match central finite differences
# ---------------------------------------------------------------------------


def test_criterion_3_gradient_correctness():
    from test_surrogate import finite_difference_check, float64_model, random_batch

    rng = random.Random(12345)
    worst_overall = 0.0
    for trial in range(20):
        model = float64_model(seed=trial)
        batch = random_batch(rng)
        worst = finite_difference_check(model, batch, n_coords=200, rng=rng)
        worst_overall = max(worst_overall, worst)
        assert worst < 1e-4, f"trial {trial}: max relative error {worst:.2e}"
    print(f"\nACCEPTANCE 3 PASS gradient correctness: max relative error {worst_overall:.2e} over 20 trials")


# ---------------------------------------------------------------------------
# Criterion 4: rule engine equals the brute-force oracle; parallel labeling
# is byte-identical
# ---------------------------------------------------------------------------


def test_criterion_4_rule_engine_oracle_equivalence(tmp_path, fixture_rules):
    from test_rules import random_ruleset, random_sentence

    rng = random.Random(999)
    mixed_vocab = ["no", "without", "possible", "may", "represent", "cannot", "exclude",
                   "edema", "pulmonary", "pleural", "effusion", "pneumothorax", "stable",
                   ";", ".", ",", "or", "large", "has", "resolved", "alpha", "beta"]
    for case in range(1000):
        if case % 2:
            rules = random_ruleset(rng)
            text = random_sentence(rng)
        else:
            rules = fixture_rules
            text = " ".join(rng.choice(mixed_vocab) for _ in range(rng.randrange(0, 14)))
        vector, _ = rules_mod.classify_sentence(text, rules)
        expected = oracle_classify(text, rules)
        assert {t: vector[t] for t in TASKS} == expected, f"case {case}: {text!r}"

    records = [
        SentenceRecord(report_id=f"r{i}", sentence_index=0,
                       text=" ".join(rng.choice(mixed_vocab) for _ in range(rng.randrange(1, 12))))
        for i in range(2000)
    ]
    serial, parallel = tmp_path / "serial.jsonl", tmp_path / "parallel.jsonl"
    rules_mod.classify_corpus(records, fixture_rules, str(serial), parallelism=1)
    rules_mod.classify_corpus(records, fixture_rules, str(parallel), parallelism=4)
    assert serial.read_bytes() == parallel.read_bytes()
    print("\nACCEPTANCE 4 PASS rule-engine oracle equivalence: 1000 cases exact, "
          "parallel output byte-identical")


# ---------------------------------------------------------------------------
# Criterion 5: metric self-consistency on random label files
# ---------------------------------------------------------------------------


def test_criterion_5_metric_self_consistency():
    rng = random.Random(777)

    def random_vector():
        return LabelVector({t: rng.choice(valid_classes(t)) for t in TASKS})

    for case in range(100):
        n = rng.randint(1, 40)
        reference = {(f"r{i}", 0): random_vector() for i in range(n)}
        prediction = {k: random_vector() for k in reference}

        report = evaluate.parity(reference, prediction)
        macro_failure = sum(report.per_task_failure.values()) / len(TASKS)
        assert abs(report.overall_match - (1.0 - macro_failure)) < 1e-12
        for task in TASKS:
            matrix = report.confusion[task]
            trace = sum(matrix[c][c] for c in range(4))
            total = sum(sum(row) for row in matrix)
            assert total == report.n_sentences
            assert abs(report.per_task_failure[task] - (1 - trace / total)) < 1e-12

        f1_report = evaluate.f1(reference, prediction)
        for kind, is_positive in (
            ("mention", lambda c: c is not MentionClass.NO_MENTION),
            ("negation", lambda c: c is MentionClass.NEGATIVE),
            ("uncertainty", lambda c: c is MentionClass.UNCERTAIN),
        ):
            rows = [
                (is_positive(reference[k][t]), is_positive(prediction[k][t]))
                for k in reference
                for t in TASKS
            ]
            assert abs(f1_report.micro[kind] - oracle_micro_f1(rows)) < 1e-12
    print("\nACCEPTANCE 5 PASS metric self-consistency: 100 random label-file pairs exact")


# ---------------------------------------------------------------------------
# Criterion 6: tiered held-out construction and train/held-out disjointness
# ---------------------------------------------------------------------------


def test_criterion_6_heldout_construction(noisy_world):
    items = noisy_world["heldout_items"]
    assert not noisy_world["shortfalls"]
    assert len(items) == 540
    per_task = {}
    for item in items:
        per_task[item.task] = per_task.get(item.task, 0) + 1
    assert per_task[Task.NO_FINDING] == 20
    assert all(per_task[t] == 40 for t in TASKS if t is not Task.NO_FINDING)

    # selection already excludes held-out keys
    assert all(item.dedup_key not in noisy_world["heldout_keys"] for item in noisy_world["selection"])

    # planting an overlap makes the round abort
    store = noisy_world["store"]
    planted = items[0]
    store.record(active.AnnotationRecord(
        dedup_key=planted.dedup_key, report_id=planted.report_id,
        sentence_index=planted.sentence_index, task=planted.task,
        label=planted.teacher_label, annotator_id="intruder", source="active_round",
    ))
    with pytest.raises(ValueError, match="overlap"):
        active.run_round(noisy_world["sentences"], noisy_world["teacher"], noisy_world["model"], store)
    print("\nACCEPTANCE 6 PASS held-out construction: 540 items (40/task, 20 no_finding), "
          "planted overlap aborts the round")


# ---------------------------------------------------------------------------
# Criterion 7: benchmark report on 10,000 sentences
# ---------------------------------------------------------------------------


def test_criterion_7_benchmark_report(parity_world, fixture_rules):
    records = parity_world["records"][:10_000]
    assert len(records) == 10_000
    report = evaluate.bench(records, fixture_rules, parity_world["model"], parallelism=1)
    assert report.teacher_sps > 0
    assert report.student_sps > 0
    assert report.speed_ratio == pytest.approx(report.student_sps / report.teacher_sps)
    print(
        f"\nACCEPTANCE 7 PASS benchmark: teacher {report.teacher_sps:,.0f}/s, "
        f"student {report.student_sps:,.0f}/s, ratio {report.speed_ratio:.2f}x"
    )
