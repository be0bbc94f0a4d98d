import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import unit_rows
from ese.embeddings import EmbeddingSet
from ese.metrics import MetricsError, MetricsReport, brute_force_oracle, evaluate, map_at_r, recall_at_1
from ese.synthetic import random_orthogonal


def labelled_set(rng, n, d=4, classes=3):
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    return EmbeddingSet(unit_rows(rng, n, d), labels, domain="synthetic")


def clustered_set(per_class=5, classes=4, d=6, spread=1e-3, seed=0):
    rng = np.random.default_rng(seed)
    centres = np.eye(d)[:classes]
    labels = np.repeat(np.arange(classes), per_class)
    x = centres[labels] + spread * rng.standard_normal((len(labels), d))
    return EmbeddingSet(x / np.linalg.norm(x, axis=1, keepdims=True), labels)


def test_tight_clusters_score_one():
    es = clustered_set()
    assert recall_at_1(es) == 1.0
    assert map_at_r(es) == 1.0


def test_two_points_two_classes_score_zero():
    es = EmbeddingSet(np.eye(2), np.array([0, 1]))
    assert recall_at_1(es) == 0.0
    with pytest.raises(MetricsError, match="single member"):
        map_at_r(es)


def test_two_points_same_class():
    es = EmbeddingSet(np.eye(2), np.array([5, 5]))
    rep = brute_force_oracle(es)
    assert rep.r_at_1 == recall_at_1(es) == 1.0
    assert rep.map_at_r == map_at_r(es) == 1.0


def _hand_set(order):
    """Labels [A, A, B, B]; query A0 sees the other three at the given cosine ranks."""
    # A0 = e0; the others sit at decreasing cosine in the requested order
    cos = {name: c for name, c in zip(order, (0.9, 0.5, 0.1))}
    rows = [np.array([1.0, 0.0, 0.0])]
    for name, sign in (("A1", 1), ("B0", -1), ("B1", 1)):
        c = cos[name]
        s = np.sqrt(1 - c * c)
        rows.append(np.array([c, s * sign, 0.0]) if name != "B1" else np.array([c, 0.0, s]))
    return EmbeddingSet(np.stack(rows), np.array([0, 0, 1, 1]))


def _query_ap(es, q):
    # hand evaluation of the AP formula for one query
    sims = es.vectors @ es.vectors[q]
    sims[q] = -np.inf
    order = np.argsort(-sims, kind="stable")[:-1]
    r = int(np.sum(es.labels == es.labels[q])) - 1
    hits, total = 0, 0.0
    for k, j in enumerate(order[:r], 1):
        if es.labels[j] == es.labels[q]:
            hits += 1
            total += hits / k
    return total / r


def test_map_hand_example_correct_first():
    es = _hand_set(["A1", "B0", "B1"])
    assert _query_ap(es, 0) == 1.0


def test_map_hand_example_wrong_first():
    es = _hand_set(["B0", "A1", "B1"])
    assert _query_ap(es, 0) == 0.0


def test_map_hand_example_full_set_against_oracle():
    for order in (["A1", "B0", "B1"], ["B0", "A1", "B1"]):
        es = _hand_set(order)
        per_query = [_query_ap(es, q) for q in range(4)]
        assert map_at_r(es) == pytest.approx(sum(per_query) / 4, abs=1e-15)
        assert map_at_r(es) == brute_force_oracle(es).map_at_r


def test_fast_paths_equal_oracle_exactly_on_100_sets():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(4, 201))
        es = labelled_set(rng, n, d=int(rng.integers(2, 9)), classes=int(rng.integers(2, max(3, n // 2))))
        oracle = brute_force_oracle(es)
        assert recall_at_1(es) == oracle.r_at_1
        assert map_at_r(es) == oracle.map_at_r


def test_ties_break_by_lowest_index():
    # every candidate is equally similar, so index order decides
    x = np.tile([1.0, 0.0], (4, 1))
    es = EmbeddingSet(x, np.array([0, 1, 0, 1]))
    # query 0 -> candidate 1 (wrong); 1 -> 0 (wrong); 2 -> 0 (right); 3 -> 0 (wrong)
    assert recall_at_1(es) == 0.25
    assert brute_force_oracle(es).r_at_1 == 0.25
    assert map_at_r(es) == brute_force_oracle(es).map_at_r


def test_permutation_invariance():
    rng = np.random.default_rng(2)
    for _ in range(20):
        es = labelled_set(rng, 60)
        perm = rng.permutation(60)
        shuffled = EmbeddingSet(es.vectors[perm], es.labels[perm])
        assert recall_at_1(shuffled) == recall_at_1(es)
        assert map_at_r(shuffled) == pytest.approx(map_at_r(es), abs=1e-15)


def test_orthogonal_invariance():
    rng = np.random.default_rng(3)
    for k in range(20):
        es = labelled_set(rng, 80, d=6)
        q = random_orthogonal(6, k)
        rotated = EmbeddingSet(es.vectors @ q.T, es.labels)
        assert recall_at_1(rotated) == recall_at_1(es)
        assert map_at_r(rotated) == pytest.approx(map_at_r(es), abs=1e-15)


@given(st.integers(0, 2**32 - 1), st.integers(4, 40))
def test_metrics_in_unit_interval_and_map_one_iff_pure_top_r(seed, n):
    rng = np.random.default_rng(seed)
    es = labelled_set(rng, n, classes=2)
    r1, mp = recall_at_1(es), map_at_r(es)
    assert 0.0 <= r1 <= 1.0 and 0.0 <= mp <= 1.0
    sim = es.vectors @ es.vectors.T
    np.fill_diagonal(sim, -np.inf)
    order = np.argsort(-sim, axis=1, kind="stable")
    pure = all(
        np.all(es.labels[order[q, : np.sum(es.labels == es.labels[q]) - 1]] == es.labels[q]) for q in range(n)
    )
    assert (mp == 1.0) == pure


def test_missing_labels_raise():
    with pytest.raises(MetricsError, match="no labels"):
        recall_at_1(EmbeddingSet(np.eye(3)))


def test_singleton_class_is_named():
    es = EmbeddingSet(np.eye(3), np.array([0, 0, 7]))
    with pytest.raises(MetricsError, match="class 7"):
        map_at_r(es)


def test_single_point_raises():
    with pytest.raises(MetricsError, match="at least 2"):
        recall_at_1(EmbeddingSet(np.eye(2)[:1], np.array([0])))


def test_evaluate_report():
    rep = evaluate(clustered_set(), "ood_color")
    assert rep == MetricsReport(1.0, 1.0, 20, "ood_color")
    assert rep.as_row() == {"r_at_1": 1.0, "map_at_r": 1.0, "n_queries": 20, "domain_tag": "ood_color"}
    with pytest.raises(ValueError):
        MetricsReport(1.5, 0.0, 1, "id")
    with pytest.raises(ValueError):
        MetricsReport(0.5, 0.0, 1, "imagenet")
