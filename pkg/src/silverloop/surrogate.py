"""The student: a probabilistic multi-task sentence classifier trained to
match the rule-based teacher, with manually derived gradients.

Architecture: hashed word uni+bigram features -> mean embedding (d) ->
tanh hidden layer (h) -> one softmax head per task (4 classes, 2 for
no_finding, which makes invalid classes unrepresentable).

Loss is the mean cross-entropy over all *present* (sentence, task) pairs;
tasks absent from a partial label vector contribute nothing to loss or
gradients. All math runs in float64; the checkpoint wire format is float32
(base64, little-endian), so loading a checkpoint is the canonical way to
get bit-reproducible predictions.

The embedding gradient is sparse (only hashed buckets touched by the batch),
and the optimizer applies Adam updates lazily to those rows only.
"""

from __future__ import annotations

import base64
import json
import time
from collections import Counter
from dataclasses import dataclass, field
from hashlib import blake2b
from typing import Iterable, Sequence

import numpy as np

from .core import (
    LabelVector,
    MentionClass,
    PartialLabelVector,
    SentenceRecord,
    Task,
    TASKS,
    TASK_INDEX,
    dump_json_line,
    labels_line,
    valid_classes,
)
from .rules import TimingStats, tokenize

CHECKPOINT_FORMAT_VERSION = 1
_HASH_SALT = b"silverloop-fh-1"
_BIGRAM_SEP = "\x1f"

HEAD_SIZES: tuple[int, ...] = tuple(len(valid_classes(t)) for t in TASKS)


@dataclass(frozen=True)
class HasherConfig:
    n_buckets: int = 2**18

    def __post_init__(self) -> None:
        if self.n_buckets < 2 or self.n_buckets & (self.n_buckets - 1):
            raise ValueError(f"n_buckets must be a power of two >= 2, got {self.n_buckets}")


class FeatureHasher:
    """Word uni+bigram multiset hashed into a fixed bucket space.

    The same text always yields the same (bucket, count) pairs: the hash is
    keyed blake2b, independent of process or platform.
    """

    def __init__(self, config: HasherConfig):
        self.config = config
        self._mask = config.n_buckets - 1

    def _bucket(self, gram: str) -> int:
        digest = blake2b(gram.encode("utf-8"), digest_size=8, salt=_HASH_SALT).digest()
        return int.from_bytes(digest, "little") & self._mask

    def token_buckets(self, text: str) -> tuple[list[int], list[int]]:
        """Unigram and bigram buckets aligned to token positions (bigram i
        spans tokens i and i+1)."""
        tokens = tokenize(text)
        uni = [self._bucket(t) for t in tokens]
        bi = [self._bucket(a + _BIGRAM_SEP + b) for a, b in zip(tokens, tokens[1:])]
        return uni, bi

    def features(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        """(bucket indices, counts), sorted by bucket. Empty text -> empty."""
        uni, bi = self.token_buckets(text)
        return assemble_features(uni, bi)


def assemble_features(unigrams: Sequence[int], bigrams: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    counts = Counter(unigrams)
    counts.update(bigrams)
    if not counts:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    idx = np.array(sorted(counts), dtype=np.int64)
    return idx, np.array([counts[i] for i in idx], dtype=np.float64)


@dataclass
class ModelParams:
    """All learnable arrays. Embedding is float32 (it dominates memory);
    dense layers are float64. Head order is canonical task order."""

    embedding: np.ndarray            # (n_buckets, d)
    w_hidden: np.ndarray             # (d, h)
    b_hidden: np.ndarray             # (h,)
    head_w: list[np.ndarray]         # per task (h, c_t)
    head_b: list[np.ndarray]         # per task (c_t,)

    @property
    def dims(self) -> tuple[int, int, int]:
        n_buckets, d = self.embedding.shape
        return n_buckets, d, self.w_hidden.shape[1]

    def dense_arrays(self) -> list[np.ndarray]:
        return [self.w_hidden, self.b_hidden, *self.head_w, *self.head_b]

    def check_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in (self.embedding, *self.dense_arrays()))


def init_params(n_buckets: int = 2**18, embedding_dim: int = 64, hidden_dim: int = 128, seed: int = 0) -> ModelParams:
    """Uniform(-0.05, 0.05) weights from the seed; zero biases."""
    rng = np.random.default_rng(seed)
    return ModelParams(
        embedding=rng.uniform(-0.05, 0.05, size=(n_buckets, embedding_dim)).astype(np.float32),
        w_hidden=rng.uniform(-0.05, 0.05, size=(embedding_dim, hidden_dim)),
        b_hidden=np.zeros(hidden_dim),
        head_w=[rng.uniform(-0.05, 0.05, size=(hidden_dim, c)) for c in HEAD_SIZES],
        head_b=[np.zeros(c) for c in HEAD_SIZES],
    )


@dataclass
class Model:
    hasher: FeatureHasher
    params: ModelParams
    meta: dict = field(default_factory=dict)


def new_model(
    n_buckets: int = 2**18,
    embedding_dim: int = 64,
    hidden_dim: int = 128,
    seed: int = 0,
) -> Model:
    return Model(
        hasher=FeatureHasher(HasherConfig(n_buckets=n_buckets)),
        params=init_params(n_buckets, embedding_dim, hidden_dim, seed=seed),
        meta={"init_seed": seed, "epochs_seen": 0},
    )


Features = tuple[np.ndarray, np.ndarray]


def _embed(features_batch: Sequence[Features], params: ModelParams) -> np.ndarray:
    d = params.embedding.shape[1]
    x = np.zeros((len(features_batch), d))
    for i, (idx, counts) in enumerate(features_batch):
        if idx.size:
            x[i] = counts @ params.embedding[idx].astype(np.float64) / counts.sum()
    return x


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _hidden(x: np.ndarray, params: ModelParams) -> np.ndarray:
    return np.tanh(x @ params.w_hidden + params.b_hidden)


def forward(text: str, model: Model) -> dict[Task, np.ndarray]:
    """Per-task probability vectors for one sentence. Each sums to one."""
    h = _hidden(_embed([model.hasher.features(text)], model.params), model.params)
    return {
        task: _softmax(h @ model.params.head_w[i] + model.params.head_b[i])[0]
        for i, task in enumerate(TASKS)
    }


Batch = Sequence[tuple[str, "PartialLabelVector | LabelVector"]]


def _targets(batch: Batch) -> np.ndarray:
    """(B, 14) class indices into each task's valid-class tuple; -1 = absent."""
    targets = np.full((len(batch), len(TASKS)), -1, dtype=np.int64)
    for i, (_, labels) in enumerate(batch):
        for task, label in labels.items():
            targets[i, TASK_INDEX[task]] = valid_classes(task).index(label)
    return targets


def _batch_features(batch: Batch, hasher: FeatureHasher) -> list[Features]:
    return [hasher.features(text) for text, _ in batch]


def loss(batch: Batch, model: Model) -> float:
    """Mean -log p(label) over present (sentence, task) pairs."""
    value, _ = _loss_and_grads(_batch_features(batch, model.hasher), _targets(batch), model.params, want_grads=False)
    return value


@dataclass
class Gradients:
    """Gradients of the mean masked cross-entropy. embedding_rows holds only
    buckets the batch touched; untouched rows have exactly zero gradient."""

    embedding_rows: dict[int, np.ndarray]
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    head_w: list[np.ndarray]
    head_b: list[np.ndarray]


def backward(batch: Batch, model: Model) -> tuple[float, Gradients]:
    """Loss plus exact analytic gradients of every parameter."""
    value, grads = _loss_and_grads(_batch_features(batch, model.hasher), _targets(batch), model.params, want_grads=True)
    assert grads is not None
    return value, grads


def _loss_and_grads(
    features: Sequence[Features],
    targets: np.ndarray,
    params: ModelParams,
    want_grads: bool,
) -> tuple[float, Gradients | None]:
    if len(features) == 0:
        raise ValueError("batch is empty")
    n_pairs = int((targets >= 0).sum())
    if n_pairs == 0:
        raise ValueError("batch has no labeled (sentence, task) pairs")

    x = _embed(features, params)
    h = _hidden(x, params)

    total = 0.0
    d_h = np.zeros_like(h) if want_grads else None
    grads = Gradients(
        embedding_rows={},
        w_hidden=np.zeros_like(params.w_hidden),
        b_hidden=np.zeros_like(params.b_hidden),
        head_w=[np.zeros_like(w) for w in params.head_w],
        head_b=[np.zeros_like(b) for b in params.head_b],
    ) if want_grads else None

    for t in range(len(TASKS)):
        rows = np.nonzero(targets[:, t] >= 0)[0]
        if rows.size == 0:
            continue
        logits = h[rows] @ params.head_w[t] + params.head_b[t]
        log_p = _log_softmax(logits)
        labels = targets[rows, t]
        total -= log_p[np.arange(rows.size), labels].sum()
        if want_grads:
            d_logits = np.exp(log_p)
            d_logits[np.arange(rows.size), labels] -= 1.0
            d_logits /= n_pairs
            grads.head_w[t] = h[rows].T @ d_logits
            grads.head_b[t] = d_logits.sum(axis=0)
            d_h[rows] += d_logits @ params.head_w[t].T

    value = float(total / n_pairs)
    if not want_grads:
        return value, None

    d_pre = d_h * (1.0 - h * h)
    grads.w_hidden = x.T @ d_pre
    grads.b_hidden = d_pre.sum(axis=0)
    d_x = d_pre @ params.w_hidden.T
    for i, (idx, counts) in enumerate(features):
        if not idx.size:
            continue
        scale = counts / counts.sum()
        for j, row in enumerate(idx):
            bucket = int(row)
            existing = grads.embedding_rows.get(bucket)
            contribution = scale[j] * d_x[i]
            if existing is None:
                grads.embedding_rows[bucket] = contribution.copy()
            else:
                existing += contribution
    return value, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings.

    word_dropout randomly hides tokens (and the bigrams they anchor) during
    training only. It leaves clean-pattern fits intact but keeps the model
    honestly uncertain on token patterns it has never seen whole, which is
    what entropy-based sample selection relies on.
    """

    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    word_dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 1, batch_size >= 1, learning_rate > 0 required")
        if not 0.0 <= self.word_dropout < 1.0:
            raise ValueError(f"word_dropout must be in [0, 1), got {self.word_dropout}")


class _Adam:
    """Adam with exact dense updates and lazy (touched rows only) updates
    for the embedding matrix."""

    def __init__(self, params: ModelParams, config: TrainConfig):
        self.config = config
        self.step = 0
        self.m_dense = [np.zeros_like(a) for a in params.dense_arrays()]
        self.v_dense = [np.zeros_like(a) for a in params.dense_arrays()]
        self.m_emb = np.zeros_like(params.embedding)
        self.v_emb = np.zeros_like(params.embedding)

    def apply(self, params: ModelParams, grads: Gradients) -> None:
        cfg = self.config
        self.step += 1
        correction1 = 1.0 - cfg.beta1 ** self.step
        correction2 = 1.0 - cfg.beta2 ** self.step
        for array, grad, m, v in zip(
            params.dense_arrays(),
            [grads.w_hidden, grads.b_hidden, *grads.head_w, *grads.head_b],
            self.m_dense,
            self.v_dense,
        ):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad * grad
            array -= cfg.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        if grads.embedding_rows:
            rows = np.array(sorted(grads.embedding_rows), dtype=np.int64)
            grad_rows = np.stack([grads.embedding_rows[int(r)] for r in rows])
            m_rows = self.m_emb[rows].astype(np.float64) * cfg.beta1 + (1.0 - cfg.beta1) * grad_rows
            v_rows = self.v_emb[rows].astype(np.float64) * cfg.beta2 + (1.0 - cfg.beta2) * grad_rows * grad_rows
            update = cfg.learning_rate * (m_rows / correction1) / (np.sqrt(v_rows / correction2) + cfg.eps)
            self.m_emb[rows] = m_rows.astype(np.float32)
            self.v_emb[rows] = v_rows.astype(np.float32)
            params.embedding[rows] = (params.embedding[rows].astype(np.float64) - update).astype(np.float32)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_parity: float | None = None


Dataset = Sequence[tuple[str, "PartialLabelVector | LabelVector"]]


def train(
    dataset: Dataset,
    config: TrainConfig,
    init: Model | None = None,
    val: Dataset | None = None,
    model_dims: tuple[int, int, int] = (2**18, 64, 128),
) -> tuple[Model, list[EpochLog]]:
    """Seeded, single-threaded mini-batch training; reproducible bit for bit.

    Aborts with the offending batch index if the loss goes non-finite.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if init is not None:
        # deep-copy so training never mutates the caller's model
        params = ModelParams(
            embedding=init.params.embedding.copy(),
            w_hidden=init.params.w_hidden.copy(),
            b_hidden=init.params.b_hidden.copy(),
            head_w=[w.copy() for w in init.params.head_w],
            head_b=[b.copy() for b in init.params.head_b],
        )
        model = Model(hasher=init.hasher, params=params, meta=dict(init.meta))
    else:
        n_buckets, d, h = model_dims
        model = new_model(n_buckets=n_buckets, embedding_dim=d, hidden_dim=h, seed=config.seed)

    feature_cache: dict[str, Features] = {}
    token_cache: dict[str, tuple[list[int], list[int]]] = {}
    features: list[Features] = []
    tokens: list[tuple[list[int], list[int]]] = []
    for text, _ in dataset:
        if config.word_dropout > 0:
            if text not in token_cache:
                token_cache[text] = model.hasher.token_buckets(text)
            tokens.append(token_cache[text])
        else:
            if text not in feature_cache:
                feature_cache[text] = model.hasher.features(text)
            features.append(feature_cache[text])
    targets = _targets(dataset)

    optimizer = _Adam(model.params, config)
    rng = np.random.default_rng(config.seed)
    logs: list[EpochLog] = []
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        epoch_loss_sum = 0.0
        epoch_pairs = 0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            rows = order[start:start + config.batch_size]
            if config.word_dropout > 0:
                batch_features = [_dropped_features(tokens[i], config.word_dropout, rng) for i in rows]
            else:
                batch_features = [features[i] for i in rows]
            batch_targets = targets[rows]
            value, grads = _loss_and_grads(batch_features, batch_targets, model.params, want_grads=True)
            if not np.isfinite(value):
                raise ValueError(f"non-finite loss at epoch {epoch} batch {batch_index}")
            pairs = int((batch_targets >= 0).sum())
            epoch_loss_sum += value * pairs
            epoch_pairs += pairs
            optimizer.apply(model.params, grads)
        model.meta["epochs_seen"] = model.meta.get("epochs_seen", 0) + 1
        log = EpochLog(epoch=epoch, train_loss=float(epoch_loss_sum / epoch_pairs))
        if val:
            log.val_parity = _parity_on(val, model)
        logs.append(log)
    return model, logs


def _dropped_features(
    buckets: tuple[list[int], list[int]],
    dropout: float,
    rng: np.random.Generator,
) -> Features:
    uni, bi = buckets
    if not uni:
        return assemble_features([], [])
    keep = rng.random(len(uni)) >= dropout
    kept_uni = [b for b, k in zip(uni, keep) if k]
    kept_bi = [b for i, b in enumerate(bi) if keep[i] and keep[i + 1]]
    return assemble_features(kept_uni, kept_bi)


def fine_tune(model: Model, annotations: Dataset, config: TrainConfig | None = None) -> tuple[Model, list[EpochLog]]:
    """One-epoch (by default) masked fine-tuning on partial human labels."""
    if not annotations:
        raise ValueError("no annotations to fine-tune on")
    if config is None:
        config = TrainConfig(epochs=1)
    return train(annotations, config, init=model)


def _parity_on(dataset: Dataset, model: Model) -> float:
    matched = 0
    total = 0
    for text, labels in dataset:
        predicted = predict_labels(text, model)
        for task, label in labels.items():
            total += 1
            matched += predicted[task] is label
    return matched / total if total else 0.0


def predict_labels(text: str, model: Model) -> dict[Task, MentionClass]:
    """Argmax per task; ties break to the lowest mention-class ordinal."""
    probs = forward(text, model)
    return {
        task: valid_classes(task)[int(np.argmax(p))]
        for task, p in probs.items()
    }


def predict_corpus(
    records: Iterable[SentenceRecord],
    model: Model,
    labels_path: str,
    probs_path: str | None = None,
    batch_size: int = 64,
) -> TimingStats:
    """Batched inference into a labels file (argmax) and a probabilities file."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    start = time.perf_counter()
    n = 0
    params = model.params
    probs_out = open(probs_path, "w", encoding="utf-8") if probs_path else None
    cache: dict[str, Features] = {}
    try:
        with open(labels_path, "w", encoding="utf-8") as labels_out:
            pending: list[SentenceRecord] = []

            def flush() -> None:
                nonlocal n
                if not pending:
                    return
                feats = []
                for rec in pending:
                    if rec.text not in cache:
                        cache[rec.text] = model.hasher.features(rec.text)
                    feats.append(cache[rec.text])
                h = _hidden(_embed(feats, params), params)
                per_task_probs = [
                    _softmax(h @ params.head_w[i] + params.head_b[i]) for i in range(len(TASKS))
                ]
                for row, rec in enumerate(pending):
                    labels = LabelVector({
                        task: valid_classes(task)[int(np.argmax(per_task_probs[i][row]))]
                        for i, task in enumerate(TASKS)
                    })
                    labels_out.write(labels_line(rec.report_id, rec.sentence_index, labels))
                    labels_out.write("\n")
                    if probs_out is not None:
                        probs_out.write(dump_json_line({
                            "report_id": rec.report_id,
                            "sentence_index": rec.sentence_index,
                            "probs": {
                                task.value: [float(p) for p in per_task_probs[i][row]]
                                for i, task in enumerate(TASKS)
                            },
                        }))
                        probs_out.write("\n")
                    n += 1
                pending.clear()

            for record in records:
                pending.append(record)
                if len(pending) >= batch_size:
                    flush()
            flush()
    finally:
        if probs_out is not None:
            probs_out.close()
    elapsed = time.perf_counter() - start
    return TimingStats(sentences=n, seconds=elapsed, sentences_per_second=n / elapsed if elapsed > 0 else 0.0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _encode_array(array: np.ndarray) -> dict:
    return {
        "shape": list(array.shape),
        "data": base64.b64encode(np.ascontiguousarray(array, dtype="<f4").tobytes()).decode("ascii"),
    }


def _decode_array(payload: dict, dtype: type) -> np.ndarray:
    data = np.frombuffer(base64.b64decode(payload["data"]), dtype="<f4")
    return data.reshape(payload["shape"]).astype(dtype)


def save_checkpoint(path: str, model: Model) -> None:
    """Versioned JSON checkpoint; every array is little-endian float32."""
    arrays = {
        "embedding": _encode_array(model.params.embedding),
        "w_hidden": _encode_array(model.params.w_hidden),
        "b_hidden": _encode_array(model.params.b_hidden),
    }
    for task, w, b in zip(TASKS, model.params.head_w, model.params.head_b):
        arrays[f"head_w_{task.value}"] = _encode_array(w)
        arrays[f"head_b_{task.value}"] = _encode_array(b)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "hasher": {"n_buckets": model.hasher.config.n_buckets},
        "arrays": arrays,
        "meta": model.meta,
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle)
        handle.write("\n")


def load_checkpoint(path: str) -> Model:
    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    arrays = payload["arrays"]
    params = ModelParams(
        embedding=_decode_array(arrays["embedding"], np.float32),
        w_hidden=_decode_array(arrays["w_hidden"], np.float64),
        b_hidden=_decode_array(arrays["b_hidden"], np.float64),
        head_w=[_decode_array(arrays[f"head_w_{t.value}"], np.float64) for t in TASKS],
        head_b=[_decode_array(arrays[f"head_b_{t.value}"], np.float64) for t in TASKS],
    )
    hasher = FeatureHasher(HasherConfig(n_buckets=int(payload["hasher"]["n_buckets"])))
    return Model(hasher=hasher, params=params, meta=dict(payload.get("meta", {})))
