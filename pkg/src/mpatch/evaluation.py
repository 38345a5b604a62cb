"""Classification, retrieval, and embedding-drift metrics.

mAP is macro-averaged: per class the samples are ranked by score (ties
broken by sample index ascending), average precision is the mean of
precision-at-rank over that class's positives, and classes without any
positive are excluded from the mean. A brute-force O(N^2 C) pairwise
implementation is kept alongside the fast path as the verification oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import l2_normalize_rows
from .checkpoint import Checkpoint

HISTOGRAM_BINS = 20


class MetricError(Exception):
    pass


@dataclass
class EmbeddingSet:
    """[N,D] embedding matrix with unique sample ids."""

    matrix: np.ndarray
    ids: list
    normalized: bool = False

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        self.ids = list(self.ids)
        if self.matrix.ndim != 2 or len(self.ids) != self.matrix.shape[0]:
            raise MetricError("embedding matrix and ids disagree")
        if len(set(self.ids)) != len(self.ids):
            raise MetricError("embedding ids must be unique")
        if self.normalized:
            norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise MetricError("normalized=True but rows are not unit norm")

    def unit(self) -> "EmbeddingSet":
        if self.normalized:
            return self
        normed, zero = l2_normalize_rows(self.matrix)
        if zero.any():
            raise MetricError("cannot normalize zero embedding rows")
        return EmbeddingSet(normed, self.ids, normalized=True)


@dataclass
class MetricsReport:
    """Structured evaluation output; every metric value lies in [0, 1]."""

    task_id: str
    metric: str
    value: float
    values: dict = field(default_factory=dict)
    per_class: dict | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in [self.value, *self.values.values()]:
            if not (0.0 <= float(v) <= 1.0):
                raise MetricError(f"metric value {v} outside [0, 1]")

    def to_dict(self) -> dict:
        d = {
            "task_id": self.task_id,
            "metric": self.metric,
            "value": float(self.value),
            "values": {k: float(v) for k, v in self.values.items()},
            "config": self.config,
        }
        if self.per_class is not None:
            d["per_class"] = {k: float(v) for k, v in self.per_class.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


# ------------------------------------------------------------------ metrics

def accuracy(predictions, labels) -> float:
    """Fraction of exact matches between two equal-length id sequences."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise MetricError("predictions and labels must be equal-length 1-D")
    if predictions.size == 0:
        raise MetricError("empty input")
    return float(np.mean(predictions == labels))


def _ranked(scores_1d):
    # descending scores, ties broken by sample index ascending
    return np.argsort(-scores_1d, kind="stable")


def average_precision(scores_1d, labels_1d) -> float:
    order = _ranked(np.asarray(scores_1d, dtype=np.float64))
    rel = np.asarray(labels_1d)[order].astype(np.float64)
    npos = rel.sum()
    if npos == 0:
        raise MetricError("average_precision needs at least one positive")
    prec = np.cumsum(rel) / np.arange(1, rel.size + 1)
    return float((prec * rel).sum() / npos)


def mean_average_precision(scores, labels) -> float:
    """Macro mAP over classes that have at least one positive sample."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise MetricError(f"scores {scores.shape} vs labels {labels.shape}")
    keep = [c for c in range(labels.shape[1]) if labels[:, c].sum() > 0]
    if not keep:
        raise MetricError("no positives in any class")
    return float(np.mean(
        [average_precision(scores[:, c], labels[:, c]) for c in keep]
    ))


def mean_average_precision_pairwise(scores, labels) -> float:
    """O(N^2 C) reference implementation used as the independent oracle."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n, c = scores.shape
    aps = []
    for cls in range(c):
        s, y = scores[:, cls], labels[:, cls]
        if not y.any():
            continue
        precs = []
        for i in range(n):
            if not y[i]:
                continue
            rank = 0
            hits = 0
            for j in range(n):
                ahead = s[j] > s[i] or (s[j] == s[i] and j <= i)
                if ahead:
                    rank += 1
                    if y[j]:
                        hits += 1
            precs.append(hits / rank)
        aps.append(sum(precs) / len(precs))
    if not aps:
        raise MetricError("no positives in any class")
    return float(sum(aps) / len(aps))


def similarity_matrix(query: EmbeddingSet, gallery: EmbeddingSet) -> np.ndarray:
    """Cosine similarities [Nq, Ng]; inputs are normalized internally."""
    q = query.unit().matrix.astype(np.float64)
    g = gallery.unit().matrix.astype(np.float64)
    if q.shape[1] != g.shape[1]:
        raise MetricError("query/gallery dims differ")
    return q @ g.T


def recall_at_k(query: EmbeddingSet, gallery: EmbeddingSet, pairing: dict,
                k: int, sims: np.ndarray | None = None) -> float:
    """Fraction of queries whose paired gallery item lands in the cosine
    top-k; similarity ties break by gallery index ascending.

    A precomputed similarity matrix may be passed so both retrieval
    directions can share one matrix (MS->RGB is the transpose of RGB->MS).
    """
    if k < 1:
        raise MetricError("k must be >= 1")
    if k > len(gallery.ids):
        raise MetricError(f"k={k} exceeds gallery size {len(gallery.ids)}")
    if sims is None:
        sims = similarity_matrix(query, gallery)
    gallery_pos = {gid: i for i, gid in enumerate(gallery.ids)}
    hits = 0
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    for row, qid in enumerate(query.ids):
        if qid not in pairing:
            raise MetricError(f"query id {qid!r} missing from pairing")
        target = pairing[qid]
        if target not in gallery_pos:
            raise MetricError(f"paired gallery id {target!r} not in gallery")
        if gallery_pos[target] in order[row]:
            hits += 1
    return hits / len(query.ids)


def cosine_similarity_stats(a: EmbeddingSet, b: EmbeddingSet) -> dict:
    """Row-wise cosine between paired sets: mean, median, 20-bin histogram
    over [-1, 1]."""
    if a.ids != b.ids:
        raise MetricError("embedding sets must carry the same ids in order")
    au = a.unit().matrix.astype(np.float64)
    bu = b.unit().matrix.astype(np.float64)
    cos = np.clip((au * bu).sum(axis=1), -1.0, 1.0)
    counts, _ = np.histogram(cos, bins=HISTOGRAM_BINS, range=(-1.0, 1.0))
    return {
        "mean": float(cos.mean()),
        "median": float(np.median(cos)),
        "histogram": counts.tolist(),
    }


# -------------------------------------------------------------- linear probe

def linear_probe(frozen_encoder: Checkpoint, dataset, probe_cfg,
                 task_id: str = "linear-probe") -> MetricsReport:
    """Train one linear layer on frozen embeddings, report the test metric.

    The encoder kind picks the input modality (image -> rgb composites,
    modality -> multi-spectral). The backbone is asserted bit-identical
    before and after.
    """
    from .encoders import EncoderConfig, encode_image, encode_modality
    from .training import AdamW, lr_at
    from .autodiff import Graph

    cfg = EncoderConfig.from_meta(frozen_encoder.meta)
    before = {n: frozen_encoder[n].tobytes() for n in frozen_encoder.names()}

    def embed(split):
        arr = dataset.ms[split] if cfg.kind == "modality" else dataset.rgb[split]
        if cfg.kind == "modality":
            return encode_modality(frozen_encoder, arr)
        return encode_image(frozen_encoder, arr)

    train_ids = dataset.splits["train"]
    test_ids = dataset.splits["test"]
    x_train = embed(train_ids)
    y_train = dataset.labels[train_ids]
    if np.all(y_train.argmax(axis=1) == y_train.argmax(axis=1)[0]) and not \
            dataset.multilabel:
        raise MetricError("degenerate dataset: a single class in train split")

    d = x_train.shape[1]
    c = y_train.shape[1]
    r = np.random.Generator(np.random.Philox(probe_cfg.seed))
    weights = {
        "probe.weight": (r.normal(0, d ** -0.5, size=(d, c))).astype(np.float32),
        "probe.bias": np.zeros(c, np.float32),
    }

    n = x_train.shape[0]
    bs = min(probe_cfg.batch_size, n)
    steps_per_epoch = n // bs
    total = max(probe_cfg.epochs * steps_per_epoch, 1)
    opt = AdamW(weight_decay=probe_cfg.weight_decay)
    order_rng = np.random.Generator(np.random.Philox(probe_cfg.seed ^ 0xBEEF))
    step = 0
    for _ in range(probe_cfg.epochs):
        order = order_rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * bs : (b + 1) * bs]
            g = Graph()
            x = g.input("x", (len(idx), d))
            w = g.parameter("probe.weight", weights["probe.weight"])
            bias = g.parameter("probe.bias", weights["probe.bias"])
            logits = g.add(g.matmul(x, w), bias)
            t = g.parameter("t", y_train[idx], trainable=False)
            loss = g.output(
                "loss",
                g.binary_cross_entropy(logits, t) if dataset.multilabel
                else g.softmax_cross_entropy(logits, t),
            )
            run = g.run({"x": x_train[idx]})
            grads = run.backward(loss)
            opt.step(g, grads, lr_at(step, total, probe_cfg))
            step += 1
            weights = {k: g.get_parameter(k) for k in weights}

    x_test = embed(test_ids)
    logits = (
        x_test.astype(np.float64) @ weights["probe.weight"].astype(np.float64)
        + weights["probe.bias"].astype(np.float64)
    )
    y_test = dataset.labels[test_ids]
    if dataset.multilabel:
        metric, value = "mAP", mean_average_precision(logits, y_test)
    else:
        metric, value = "accuracy", accuracy(
            logits.argmax(axis=1), y_test.argmax(axis=1)
        )

    after = {n: frozen_encoder[n].tobytes() for n in frozen_encoder.names()}
    if before != after:
        raise MetricError("linear probe mutated the frozen backbone")
    return MetricsReport(
        task_id, metric, value,
        config={"epochs": probe_cfg.epochs, "lr": probe_cfg.peak_lr,
                "seed": probe_cfg.seed, "encoder": frozen_encoder.meta["arch"]},
    )
