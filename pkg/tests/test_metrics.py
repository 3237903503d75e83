import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seq2slate.metrics import evaluate, map_score, ndcg_at_k, rank_gain, report_from_permutations, reward
from seq2slate.model import RankingInstance
from seq2slate.numerics import make_rng


def naive_ap(ranked):
    hits, total = 0, 0.0
    for pos, label in enumerate(ranked, start=1):
        if label:
            hits += 1
            total += hits / pos
    return total / hits if hits else None


def naive_ndcg(ranked, k):
    dcg = sum(label / math.log2(pos + 1) for pos, label in enumerate(ranked[:k], start=1))
    ideal_labels = sorted(ranked, reverse=True)
    ideal = sum(label / math.log2(pos + 1) for pos, label in enumerate(ideal_labels[:k], start=1))
    return dcg / ideal if ideal else None


class TestHandExamples:
    def test_map(self):
        assert map_score([0, 1, 2], [1, 1, 0]) == 1.0
        assert map_score([0, 1, 2], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2)
        assert map_score([0], [1]) == 1.0

    def test_ndcg(self):
        assert ndcg_at_k([2, 0, 1], [1, 0, 1], 3) == 1.0
        assert ndcg_at_k([0, 1, 2], [1, 0, 1], 2) == pytest.approx(1 / (1 + 1 / math.log2(3)))
        assert ndcg_at_k([0, 1, 2], [1, 0, 1], 2) == pytest.approx(0.6131, abs=1e-4)
        assert ndcg_at_k([1, 0, 2], [1, 0, 1], 10) == ndcg_at_k([1, 0, 2], [1, 0, 1], 3)

    def test_rank_gain(self):
        assert rank_gain([0, 1, 2, 3], [0, 1, 0, 1]) == 0.0
        assert rank_gain([2, 0, 1], [0, 0, 1]) == 2.0
        assert rank_gain([3, 2, 1, 0], [1, 0, 0, 0]) == -3.0

    def test_no_positives(self):
        assert map_score([0, 1], [0, 0]) is None
        assert ndcg_at_k([0, 1], [0, 0], 2) is None
        assert reward([0, 1], [0, 0]) == 0.0


def test_naive_reference_agreement():
    rng = make_rng(0)
    cases = 0
    while cases < 200:
        n = int(rng.integers(1, 12))
        y = rng.integers(0, 2, size=n)
        if y.sum() == 0:
            continue
        perm = rng.permutation(n)
        k = int(rng.integers(1, 12))
        ranked = [int(v) for v in y[perm]]
        assert abs(map_score(perm, y) - naive_ap(ranked)) <= 1e-12
        assert abs(ndcg_at_k(perm, y, k) - naive_ndcg(ranked, k)) <= 1e-12
        cases += 1


labels = st.lists(st.integers(0, 1), min_size=1, max_size=10).filter(lambda y: sum(y) > 0)


@given(labels, st.randoms(use_true_random=False), st.integers(1, 12))
def test_bounds_and_perfect_ranking(y, rnd, k):
    n = len(y)
    perm = list(range(n))
    rnd.shuffle(perm)
    m, g = map_score(perm, y), ndcg_at_k(perm, y, k)
    assert 0 <= m <= 1 and 0 <= g <= 1 + 1e-15
    ideal = sorted(range(n), key=lambda i: -y[i])
    assert map_score(ideal, y) == 1.0
    assert ndcg_at_k(ideal, y, k) == pytest.approx(1.0)


@given(labels, st.randoms(use_true_random=False), st.integers(1, 12))
def test_swapping_a_positive_up_never_hurts(y, rnd, k):
    n = len(y)
    perm = list(range(n))
    rnd.shuffle(perm)
    for a in range(n - 1):
        if y[perm[a]] == 0 and y[perm[a + 1]] == 1:
            better = perm.copy()
            better[a], better[a + 1] = better[a + 1], better[a]
            assert map_score(better, y) >= map_score(perm, y)
            assert ndcg_at_k(better, y, k) >= ndcg_at_k(perm, y, k) - 1e-15
            assert rank_gain(better, y) >= rank_gain(perm, y)


@given(st.integers(1, 10), st.data())
def test_rank_gain_antisymmetry(n, data):
    pos = data.draw(st.integers(0, n - 1))
    y = np.zeros(n, dtype=int)
    y[pos] = 1
    perm = np.array(data.draw(st.permutations(list(range(n)))))
    # rerank the reranked list back to the base order
    inverse = np.argsort(perm)
    assert rank_gain(perm, y) + rank_gain(inverse, y[perm]) == 0


class TestReport:
    def test_noop_has_zero_rank_gain(self):
        rng = make_rng(0)
        insts = [RankingInstance(rng.normal(size=(5, 2)), rng.integers(0, 2, size=5)) for _ in range(20)]
        assert evaluate("noop", insts).rank_gain == 0.0

    def test_single_query(self):
        inst = RankingInstance(np.zeros((3, 1)), [0, 1, 1])
        rep = evaluate(lambda insts: [np.array([2, 0, 1])], [inst], ks=(2,))
        assert rep.map == map_score([2, 0, 1], [0, 1, 1])
        assert rep.ndcg[2] == ndcg_at_k([2, 0, 1], [0, 1, 1], 2)
        assert rep.rank_gain == rank_gain([2, 0, 1], [0, 1, 1])

    def test_zero_click_queries_counted_separately(self):
        rep = report_from_permutations([[0, 1], [0, 1]], [[1, 0], [0, 0]], ks=(1,))
        assert rep.map == 1.0 and rep.num_queries == 2 and rep.zero_click_fraction == 0.5

    def test_tsv(self):
        rep = report_from_permutations([[1, 0]], [[0, 1]], ks=(5, 10))
        lines = rep.to_tsv().splitlines()
        assert lines[0] == "metric\tk\tvalue"
        assert lines[1].startswith("map\t\t") and lines[2].startswith("ndcg\t5\t")
