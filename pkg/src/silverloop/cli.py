"""Single entry-point command wiring all modules into runnable experiments.

Exit codes: 0 success, 1 runtime failure (single-line ``error:`` message on
stderr), 2 usage. Every file output is written to a temp path and renamed
into place. Paths are resolved against --data-dir when not absolute.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from typing import Iterator

from . import active, corpus, evaluate, rules as rules_mod, service, surrogate
from .core import (
    CorpusFormatError,
    SentenceRecord,
    iter_corpus,
    read_corpus,
    read_labels,
)


@contextlib.contextmanager
def atomic_output(path: str) -> Iterator[str]:
    """Yield a temp path that is renamed onto ``path`` on success."""
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.remove(tmp)
        raise


def _resolve(args: argparse.Namespace, path: str | None) -> str | None:
    if path is None or os.path.isabs(path) or args.data_dir is None:
        return path
    return os.path.join(args.data_dir, path)


def _sentence_map(corpus_path: str) -> dict[tuple[str, int], SentenceRecord]:
    return {(r.report_id, r.sentence_index): r for r in iter_corpus(corpus_path)}


def _write_json(path: str, payload: dict) -> None:
    with atomic_output(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, indent=2)
            handle.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args: argparse.Namespace) -> int:
    config = corpus.GeneratorConfig(
        n_reports=args.n_reports,
        sentences_per_report=(args.min_sentences, args.max_sentences),
        seed=args.seed,
        noise=corpus.NoiseConfig(
            typo_rate=args.typo_rate,
            synonym_swap_rate=args.synonym_rate,
            cue_typos=args.cue_typos,
        ),
    )
    out_corpus = _resolve(args, args.out_corpus)
    out_gold = _resolve(args, args.out_gold)
    with atomic_output(out_corpus) as tmp_corpus, atomic_output(out_gold) as tmp_gold:
        n = corpus.generate_files(config, tmp_corpus, tmp_gold)
    print(f"generated {n} sentences in {args.n_reports} reports -> {out_corpus}")
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    out = _resolve(args, args.out)
    with atomic_output(out) as tmp:
        n = corpus.ingest(_resolve(args, args.input), args.format, tmp)
    print(f"ingested {n} sentences -> {out}")
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    fractions = tuple(float(f) for f in args.fractions.split(","))
    if len(fractions) != 3:
        raise ValueError(f"expected three comma-separated fractions, got {args.fractions!r}")
    manifest = corpus.split(iter_corpus(_resolve(args, args.corpus)), fractions, seed=args.seed)
    out = _resolve(args, args.out)
    with atomic_output(out) as tmp:
        corpus.save_manifest(tmp, manifest)
    print(
        f"split {len(manifest.train_report_ids)}/{len(manifest.val_report_ids)}/"
        f"{len(manifest.test_report_ids)} reports, {len(manifest.unseen_test_keys)} unseen test keys -> {out}"
    )
    return 0


def cmd_label(args: argparse.Namespace) -> int:
    ruleset = rules_mod.load_rules(_resolve(args, args.rules))
    out = _resolve(args, args.out)
    with atomic_output(out) as tmp:
        stats = rules_mod.label_corpus_file(_resolve(args, args.corpus), ruleset, tmp, parallelism=args.parallelism)
    print(f"labeled {stats.sentences} sentences at {stats.sentences_per_second:.0f}/s -> {out}")
    return 0


def _filter_by_split(
    sentences: dict[tuple[str, int], SentenceRecord],
    manifest_path: str | None,
    split_name: str | None,
) -> dict[tuple[str, int], SentenceRecord]:
    if manifest_path is None or split_name is None:
        return sentences
    manifest = corpus.load_manifest(manifest_path)
    wanted = {
        "train": manifest.train_report_ids,
        "val": manifest.val_report_ids,
        "test": manifest.test_report_ids,
    }[split_name]
    return {k: r for k, r in sentences.items() if r.report_id in wanted}


def cmd_train(args: argparse.Namespace) -> int:
    sentences = _sentence_map(_resolve(args, args.corpus))
    labels = read_labels(_resolve(args, args.labels))
    sentences = _filter_by_split(sentences, _resolve(args, args.manifest), args.split)
    dataset = [(r.text, labels[k]) for k, r in sentences.items() if k in labels]
    if not dataset:
        raise ValueError("no overlapping (corpus, labels) sentences to train on")

    val = None
    if args.val_corpus and args.val_labels:
        val_sentences = _sentence_map(_resolve(args, args.val_corpus))
        val_labels = read_labels(_resolve(args, args.val_labels))
        val = [(r.text, val_labels[k]) for k, r in val_sentences.items() if k in val_labels]

    config = surrogate.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        seed=args.seed,
        word_dropout=args.word_dropout,
    )
    init = surrogate.load_checkpoint(_resolve(args, args.init)) if args.init else None
    model, logs = surrogate.train(
        dataset,
        config,
        init=init,
        val=val,
        model_dims=(args.n_buckets, args.embedding_dim, args.hidden_dim),
    )
    for log in logs:
        line = f"epoch {log.epoch}: loss {log.train_loss:.6f}"
        if log.val_parity is not None:
            line += f", val parity {100 * log.val_parity:.2f}%"
        print(line)
    out = _resolve(args, args.out)
    with atomic_output(out) as tmp:
        surrogate.save_checkpoint(tmp, model)
    print(f"checkpoint -> {out}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = surrogate.load_checkpoint(_resolve(args, args.checkpoint))
    out_labels = _resolve(args, args.out_labels)
    out_probs = _resolve(args, args.out_probs)
    records = read_corpus(_resolve(args, args.corpus))
    with contextlib.ExitStack() as stack:
        tmp_labels = stack.enter_context(atomic_output(out_labels))
        tmp_probs = stack.enter_context(atomic_output(out_probs)) if out_probs else None
        stats = surrogate.predict_corpus(records, model, tmp_labels, tmp_probs, batch_size=args.batch_size)
    print(f"predicted {stats.sentences} sentences at {stats.sentences_per_second:.0f}/s -> {out_labels}")
    return 0


def cmd_heldout(args: argparse.Namespace) -> int:
    labels = read_labels(_resolve(args, args.labels))
    sentences = _sentence_map(_resolve(args, args.corpus))
    items, shortfalls = active.build_heldout(labels, sentences, per_cell=args.per_cell, seed=args.seed)
    for shortfall in shortfalls:
        print(
            f"warning: cell ({shortfall.task.value}, {shortfall.label.key}) has only "
            f"{shortfall.available} of {shortfall.wanted} sentences",
            file=sys.stderr,
        )
    out = _resolve(args, args.out)
    queue_rows = [
        {"item_id": f"ho-{i:05d}", "source": "heldout", **item.to_json_dict()}
        for i, item in enumerate(items)
    ]
    with atomic_output(out) as tmp:
        service.write_label_queue(tmp, queue_rows)
    print(f"{len(items)} held-out annotation items -> {out}")

    if args.annotate_from:
        if not args.store:
            raise ValueError("--annotate-from needs --store")
        oracle = read_labels(_resolve(args, args.annotate_from))
        store = active.AnnotationStore(_resolve(args, args.store))
        recorded = 0
        for item in items:
            key = (item.report_id, item.sentence_index)
            store.record(active.AnnotationRecord(
                dedup_key=item.dedup_key, report_id=item.report_id,
                sentence_index=item.sentence_index, task=item.task,
                label=oracle[key][item.task], annotator_id=args.annotator,
                source="heldout", timestamp=active.now_timestamp(),
            ))
            recorded += 1
        print(f"recorded {recorded} oracle held-out annotations -> {args.store}")
    return 0


def cmd_select(args: argparse.Namespace) -> int:
    probs = active.read_probs(_resolve(args, args.probs))
    sentences = _sentence_map(_resolve(args, args.corpus))
    exclude: set[str] = set()
    if args.exclude_queue:
        for item in service.load_label_queue(_resolve(args, args.exclude_queue)):
            exclude.add(item.dedup_key)
    selection = active.select_uncertain(
        probs, sentences, k_per_task=args.k, exclude=exclude, measure=args.measure
    )
    queue_rows = []
    counter = 0
    for item in selection:
        for task in item.tasks:
            queue_rows.append({
                "item_id": f"al-{counter:05d}",
                "source": "active_round",
                "dedup_key": item.dedup_key,
                "report_id": item.report_id,
                "sentence_index": item.sentence_index,
                "text": item.text,
                "task": task.value,
            })
            counter += 1
    out = _resolve(args, args.out)
    with atomic_output(out) as tmp:
        service.write_label_queue(tmp, queue_rows)
    print(f"{len(selection)} unique sentences, {counter} annotation items -> {out}")
    return 0


def cmd_fine_tune(args: argparse.Namespace) -> int:
    model = surrogate.load_checkpoint(_resolve(args, args.checkpoint))
    store = active.AnnotationStore(_resolve(args, args.store))
    sentences = _sentence_map(_resolve(args, args.corpus))
    records = store.records(source=args.source)
    if not records:
        raise ValueError(f"store has no annotations with source {args.source!r}")
    dataset = active.annotations_to_dataset(records, sentences)
    config = surrogate.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.learning_rate, seed=args.seed
    )
    tuned, logs = surrogate.fine_tune(model, dataset, config)
    for log in logs:
        print(f"epoch {log.epoch}: loss {log.train_loss:.6f}")
    out = _resolve(args, args.out)
    with atomic_output(out) as tmp:
        surrogate.save_checkpoint(tmp, tuned)
    print(f"fine-tuned checkpoint -> {out}")
    return 0


def cmd_round(args: argparse.Namespace) -> int:
    sentences = _sentence_map(_resolve(args, args.corpus))
    teacher = read_labels(_resolve(args, args.teacher_labels))
    model = surrogate.load_checkpoint(_resolve(args, args.checkpoint))
    store = active.AnnotationStore(_resolve(args, args.store))
    config = active.RoundConfig(
        train=surrogate.TrainConfig(
            epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.learning_rate, seed=args.seed
        ),
        mix_teacher=args.mix_teacher,
        seed=args.seed,
    )
    if args.rounds > 1 or args.oracle_labels:
        if not (args.oracle_labels and args.select_corpus):
            raise ValueError("--rounds > 1 needs --oracle-labels and --select-corpus")
        oracle = read_labels(_resolve(args, args.oracle_labels))
        selection_keys = list(_sentence_map(_resolve(args, args.select_corpus)))
        results = active.iterate_rounds(
            sentences, teacher, model, store, oracle, selection_keys,
            rounds=args.rounds, k_per_task=args.k, config=config,
        )
        for i, round_result in enumerate(results, start=1):
            print(f"round {i}:")
            print(evaluate.render_gold_comparison(round_result.comparison))
        result = results[-1]
    else:
        result = active.run_round(sentences, teacher, model, store, config)
        print(evaluate.render_gold_comparison(result.comparison))
    out = _resolve(args, args.out)
    with atomic_output(out) as tmp:
        surrogate.save_checkpoint(tmp, result.model)
    print(f"post-round checkpoint -> {out}")
    if args.report:
        _write_json(_resolve(args, args.report), result.comparison)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    data_dir = args.serve_data_dir or os.environ.get(service.DATA_DIR_ENV) or args.data_dir
    if not data_dir:
        raise ValueError("serve needs --data-dir (or SILVERLOOP_DATA)")
    config = service.ServiceConfig(
        data_dir=data_dir,
        corpus_path=_resolve(args, args.corpus),
        teacher_labels_path=_resolve(args, args.teacher_labels),
        student_labels_path=_resolve(args, args.student_labels),
        checkpoint_path=_resolve(args, args.checkpoint),
        rules_path=_resolve(args, args.rules),
        ui_dir=_resolve(args, args.ui_dir),
    )
    service.serve(config, port=args.port, host=args.host)
    return 0


# -- eval subcommands -------------------------------------------------------


def _load_gold_pairs(path: str, source: str | None = None) -> list[evaluate.GoldPair]:
    store = active.AnnotationStore(path)
    records = store.records(source=source)
    return [((r.report_id, r.sentence_index), r.task, r.label) for r in records]


def cmd_eval_parity(args: argparse.Namespace) -> int:
    reference = read_labels(_resolve(args, args.ref))
    prediction = read_labels(_resolve(args, args.pred))
    restrict = None
    dedup = None
    if args.unseen_manifest:
        manifest = corpus.load_manifest(_resolve(args, args.unseen_manifest))
        restrict = set(manifest.unseen_test_keys)
        if not args.corpus:
            raise ValueError("--unseen-manifest needs --corpus to resolve dedup keys")
        dedup = {k: r.dedup_key for k, r in _sentence_map(_resolve(args, args.corpus)).items()}
    report = evaluate.parity(reference, prediction, restrict_to=restrict, dedup_keys=dedup)
    majority = evaluate.majority_baseline(reference) if args.majority else None
    print(evaluate.render_failure_table(report, majority))
    if args.json:
        _write_json(_resolve(args, args.json), report.to_json_dict())
    return 0


def cmd_eval_majority(args: argparse.Namespace) -> int:
    failures = evaluate.majority_baseline(read_labels(_resolve(args, args.ref)))
    for task, failure in failures.items():
        print(f"{task.value:<28}{100 * failure:>10.2f}")
    return 0


def cmd_eval_f1(args: argparse.Namespace) -> int:
    report = evaluate.f1(read_labels(_resolve(args, args.ref)), read_labels(_resolve(args, args.pred)))
    for kind in ("mention", "negation", "uncertainty"):
        print(f"{kind} F1 (micro): {report.micro[kind]:.3f}")
    if args.json:
        _write_json(_resolve(args, args.json), report.to_json_dict())
    return 0


def cmd_eval_gold(args: argparse.Namespace) -> int:
    gold = _load_gold_pairs(_resolve(args, args.gold), source=args.source)
    prediction = read_labels(_resolve(args, args.pred))
    if args.teacher:
        comparison = evaluate.gold_accuracy_comparison(
            gold,
            {"teacher": read_labels(_resolve(args, args.teacher)), "prediction": prediction},
            baseline="teacher",
        )
        print(evaluate.render_gold_comparison(comparison))
        if args.json:
            _write_json(_resolve(args, args.json), comparison)
    else:
        report = evaluate.gold_accuracy(gold, prediction)
        for task, value in report.per_task.items():
            print(f"{task.value:<28}{100 * value:>9.1f}%  (n={report.per_task_n[task]})")
        print(f"macro accuracy: {100 * report.macro:.1f}% over {report.n_pairs} pairs")
        if args.json:
            _write_json(_resolve(args, args.json), report.to_json_dict())
    return 0


def cmd_eval_agreement(args: argparse.Namespace) -> int:
    def records(path: str, annotator: str | None):
        return active.AnnotationStore(path).records(annotator_id=annotator)

    a_records = records(_resolve(args, args.a), args.annotator_a)
    b_records = records(_resolve(args, args.b), args.annotator_b)
    report = evaluate.agreement(
        [(r.dedup_key, r.task, r.label) for r in a_records],
        [(r.dedup_key, r.task, r.label) for r in b_records],
    )
    print(f"agreement: {100 * report.rate:.1f}% on {report.n_shared} shared pairs")
    if args.labels:
        labels = read_labels(_resolve(args, args.labels))
        for name, recs in (("a", a_records), ("b", b_records)):
            pairs = [
                ((r.report_id, r.sentence_index), r.task, r.label)
                for r in recs
                if (r.report_id, r.sentence_index) in labels
            ]
            if pairs:
                rate = evaluate.gold_accuracy(pairs, labels).macro
                print(f"annotator {name} vs labels file: {100 * rate:.1f}% (task macro, {len(pairs)} pairs)")
    return 0


def cmd_eval_bench(args: argparse.Namespace) -> int:
    records = read_corpus(_resolve(args, args.corpus))
    ruleset = rules_mod.load_rules(_resolve(args, args.rules))
    model = surrogate.load_checkpoint(_resolve(args, args.checkpoint))
    report = evaluate.bench(records, ruleset, model, parallelism=args.parallelism)
    print(
        f"teacher: {report.teacher_sps:,.0f} sentences/s ({report.teacher_seconds:.2f}s)\n"
        f"student: {report.student_sps:,.0f} sentences/s ({report.student_seconds:.2f}s)\n"
        f"student/teacher throughput ratio: {report.speed_ratio:.2f}x"
    )
    if args.json:
        _write_json(_resolve(args, args.json), report.to_json_dict())
    return 0


def cmd_eval_adjudications(args: argparse.Namespace) -> int:
    store = active.AdjudicationStore(_resolve(args, args.store))
    with open(_resolve(args, args.unblinding), encoding="utf-8") as handle:
        unblinding = json.load(handle)
    summary = evaluate.adjudication_summary(
        [(r.blinding_id, r.task, r.verdict) for r in store.records()], unblinding
    )
    print(evaluate.render_adjudication_summary(summary))
    if args.json:
        _write_json(_resolve(args, args.json), summary)
    return 0


def cmd_eval_discrepancies(args: argparse.Namespace) -> int:
    reference = read_labels(_resolve(args, args.ref))
    prediction = read_labels(_resolve(args, args.pred))
    sentences = _sentence_map(_resolve(args, args.corpus))
    items, unblinding = evaluate.discrepancy_sample(
        reference, prediction, sentences, per_task_cap=args.cap, seed=args.seed
    )
    out = _resolve(args, args.out)
    with atomic_output(out) as tmp:
        service.write_label_queue(tmp, [item.to_json_dict() for item in items])
    _write_json(_resolve(args, args.unblinding), unblinding)
    print(f"{len(items)} blinded discrepancies -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="silverloop", description=__doc__)
    parser.add_argument("--data-dir", default=None, help="base directory for relative paths")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus with gold labels")
    p.add_argument("--n-reports", type=int, required=True)
    p.add_argument("--min-sentences", type=int, default=2)
    p.add_argument("--max-sentences", type=int, default=6)
    p.add_argument("--typo-rate", type=float, default=0.0)
    p.add_argument("--synonym-rate", type=float, default=0.0)
    p.add_argument("--cue-typos", action="store_true", help="let typos hit negation/uncertainty cue words")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-corpus", required=True)
    p.add_argument("--out-gold", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("ingest", help="convert jsonl/csv into the canonical corpus format")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("jsonl", "csv"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="split a corpus by report id")
    p.add_argument("--corpus", required=True)
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("label", help="run the rule labeler over a corpus")
    p.add_argument("--rules", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--parallelism", type=int, default=1)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train the surrogate on a labels file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default=None)
    p.add_argument("--val-corpus", default=None)
    p.add_argument("--val-labels", default=None)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=5e-3)
    p.add_argument("--word-dropout", type=float, default=0.0,
                   help="token dropout during training; keeps entropy honest on unseen patterns")
    p.add_argument("--n-buckets", type=int, default=2**18)
    p.add_argument("--embedding-dim", type=int, default=64)
    p.add_argument("--hidden-dim", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="label a corpus with a checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-labels", required=True)
    p.add_argument("--out-probs", default=None)
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("heldout", help="build the tiered held-out annotation queue")
    p.add_argument("--labels", required=True, help="teacher labels file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--per-cell", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--annotate-from", default=None,
                   help="labels file standing in for the annotator; records held-out gold into --store")
    p.add_argument("--store", default=None)
    p.add_argument("--annotator", default="oracle")
    p.set_defaults(func=cmd_heldout)

    p = sub.add_parser("select", help="select the most uncertain sentences per task")
    p.add_argument("--probs", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--measure", choices=("entropy", "margin"), default="entropy")
    p.add_argument("--exclude-queue", default=None, help="label queue whose dedup keys are excluded")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("fine-tune", help="fine-tune a checkpoint on stored annotations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--source", default="active_round")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=5e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fine_tune)

    p = sub.add_parser("round", help="run one or more active-learning rounds")
    p.add_argument("--corpus", required=True)
    p.add_argument("--teacher-labels", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=5e-3)
    p.add_argument("--mix-teacher", type=float, default=0.0)
    p.add_argument("--rounds", type=int, default=1,
                   help="iterate select/annotate/fine-tune this many times (needs an oracle)")
    p.add_argument("--oracle-labels", default=None,
                   help="labels file standing in for the annotator when iterating")
    p.add_argument("--select-corpus", default=None, help="corpus file naming the selection pool")
    p.add_argument("--k", type=int, default=100, help="selections per task per round")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="post-round checkpoint path")
    p.add_argument("--report", default=None, help="write the comparison report JSON here")
    p.set_defaults(func=cmd_round)

    p = sub.add_parser("bench", help="compare teacher and student throughput")
    p.add_argument("--corpus", required=True)
    p.add_argument("--rules", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_eval_bench)

    p = sub.add_parser("serve", help="start the annotation HTTP service")
    p.add_argument("--port", type=int, default=service.DEFAULT_PORT)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--data-dir", dest="serve_data_dir", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--teacher-labels", default=None)
    p.add_argument("--student-labels", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--rules", default=None)
    p.add_argument("--ui-dir", default=None)
    p.set_defaults(func=cmd_serve)

    ev = sub.add_parser("eval", help="evaluation reports")
    ev_sub = ev.add_subparsers(dest="eval_command", required=True)

    p = ev_sub.add_parser("parity", help="match rate and confusion matrices")
    p.add_argument("--ref", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--corpus", default=None)
    p.add_argument("--unseen-manifest", default=None, help="restrict to the manifest's unseen test keys")
    p.add_argument("--majority", action="store_true", help="include the majority-class baseline column")
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_eval_parity)

    p = ev_sub.add_parser("majority", help="majority-class failure rates")
    p.add_argument("--ref", required=True)
    p.set_defaults(func=cmd_eval_majority)

    p = ev_sub.add_parser("f1", help="mention/negation/uncertainty F1")
    p.add_argument("--ref", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_eval_f1)

    p = ev_sub.add_parser("gold", help="accuracy against gold annotations")
    p.add_argument("--gold", required=True, help="annotation store jsonl")
    p.add_argument("--pred", required=True)
    p.add_argument("--teacher", default=None, help="teacher labels for a difference table")
    p.add_argument("--source", default=None, help="restrict to one annotation source")
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_eval_gold)

    p = ev_sub.add_parser("agreement", help="inter-annotator agreement")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--annotator-a", default=None)
    p.add_argument("--annotator-b", default=None)
    p.add_argument("--labels", default=None,
                   help="also report each annotator's agreement with this labels file")
    p.set_defaults(func=cmd_eval_agreement)

    p = ev_sub.add_parser("bench", help="compare teacher and student throughput")
    p.add_argument("--corpus", required=True)
    p.add_argument("--rules", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_eval_bench)

    p = ev_sub.add_parser("adjudications", help="unblind and summarize collected verdicts")
    p.add_argument("--store", required=True, help="adjudications jsonl written by the service")
    p.add_argument("--unblinding", required=True)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_eval_adjudications)

    p = ev_sub.add_parser("discrepancies", help="sample a blinded adjudication queue")
    p.add_argument("--ref", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--cap", type=int, default=46)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--unblinding", required=True)
    p.set_defaults(func=cmd_eval_discrepancies)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, CorpusFormatError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
