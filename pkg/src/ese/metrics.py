"""Retrieval metrics on labelled embedding sets: Recall@1 and MAP@R.

Every point is a query against all other points (self excluded). Rankings are
by descending cosine with ties broken by ascending index. MAP@R uses
``R_q = class size - 1`` for query ``q``.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .embeddings import DOMAINS, EmbeddingSet


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    r_at_1: float
    map_at_r: float
    n_queries: int
    domain_tag: str

    def __post_init__(self):
        for name in ("r_at_1", "map_at_r"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.domain_tag not in DOMAINS:
            raise ValueError(f"unknown domain tag {self.domain_tag!r}")

    def as_row(self) -> dict:
        return asdict(self)


def _check(es: EmbeddingSet, need_pairs: bool):
    if es.labels is None:
        raise MetricsError("embedding set has no labels")
    if es.N < 2:
        raise MetricsError(f"need at least 2 points, got {es.N}")
    if need_pairs:
        counts = Counter(es.labels.tolist())
        for label, c in sorted(counts.items()):
            if c < 2:
                raise MetricsError(f"class {label} has a single member; MAP@R is undefined for it")


def _similarity(x: np.ndarray) -> np.ndarray:
    sim = x @ x.T
    np.fill_diagonal(sim, -np.inf)
    return sim


def recall_at_1(es: EmbeddingSet) -> float:
    _check(es, need_pairs=False)
    sim = _similarity(es.vectors)
    # argmax returns the first (lowest index) maximum
    nn = np.argmax(sim, axis=1)
    hits = es.labels[nn] == es.labels
    return math.fsum(hits.astype(float)) / es.N


def _ranking(sim: np.ndarray) -> np.ndarray:
    # stable sort on -sim keeps ascending index among ties; self (-inf) sorts last
    return np.argsort(-sim, axis=1, kind="stable")[:, :-1]


def map_at_r(es: EmbeddingSet) -> float:
    _check(es, need_pairs=True)
    labels = es.labels
    counts = np.bincount(labels - labels.min())
    r_q = counts[labels - labels.min()] - 1
    order = _ranking(_similarity(es.vectors))
    aps = []
    for q in range(es.N):
        r = int(r_q[q])
        rel = labels[order[q, :r]] == labels[q]
        k = np.flatnonzero(rel) + 1
        terms = np.arange(1, k.size + 1) / k
        aps.append(math.fsum(terms.tolist()) / r)
    return math.fsum(aps) / es.N


def evaluate(es: EmbeddingSet, domain_tag: str | None = None) -> MetricsReport:
    return MetricsReport(
        r_at_1=recall_at_1(es),
        map_at_r=map_at_r(es),
        n_queries=es.N,
        domain_tag=domain_tag or es.domain,
    )


def brute_force_oracle(es: EmbeddingSet, domain_tag: str | None = None) -> MetricsReport:
    """Independent O(N^2) evaluation with explicit per-query sorting. Test use only."""
    _check(es, need_pairs=True)
    x = es.vectors
    labels = es.labels.tolist()
    n = len(labels)
    class_size = Counter(labels)
    hits = []
    aps = []
    for q in range(n):
        cands = []
        for j in range(n):
            if j != q:
                cands.append((-float(np.dot(x[q], x[j])), j))
        cands.sort()
        ranked = [j for _, j in cands]
        hits.append(1.0 if labels[ranked[0]] == labels[q] else 0.0)
        r = class_size[labels[q]] - 1
        correct = 0
        terms = []
        for k in range(1, r + 1):
            if labels[ranked[k - 1]] == labels[q]:
                correct += 1
                terms.append(correct / k)
        aps.append(math.fsum(terms) / r)
    return MetricsReport(
        r_at_1=math.fsum(hits) / n,
        map_at_r=math.fsum(aps) / n,
        n_queries=n,
        domain_tag=domain_tag or es.domain,
    )
