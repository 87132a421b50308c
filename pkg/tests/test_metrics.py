import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prodsearch.graphs import QueryProductGraph
from prodsearch.metrics import (
    MetricError, MetricReport, RankingCase, RetrievalCase, average_precision, evaluate_ranking, load_cases,
    make_ranking_sets, make_retrieval_cases, mrr, ndcg_score, precision_at_k, random_mrr_baseline, rank_candidates,
    recall_at_k, reciprocal_rank, save_cases,
)
from oracles import ap_oracle, ndcg_oracle, p_at_k_oracle, r_at_k_oracle, random_case, rr_oracle


def test_reciprocal_rank_examples():
    assert reciprocal_rank([7, 1, 2], [7]) == 1.0
    assert reciprocal_rank([1, 2, 3, 7], [7]) == 0.25
    cases = [RankingCase(i, "q", (9,), (1, 2, 3)) for i in range(3)]
    ranks = [[9, 1, 2, 3], [1, 9, 2, 3], [1, 2, 3, 9]]
    assert mrr(cases, ranks) == pytest.approx((1 + 0.5 + 0.25) / 3)
    with pytest.raises(MetricError):
        reciprocal_rank([1, 2], [7])


def test_average_precision_examples():
    assert average_precision([4, 5, 1, 2], [4, 5]) == 1.0
    assert average_precision([1, 4, 2, 3], [4]) == 0.5


def test_ndcg_examples():
    assert ndcg_score([3, 4, 1, 2], [3, 4]) == 1.0
    assert ndcg_score([1, 9, 2], [9]) == pytest.approx(1 / math.log2(3))


def test_ndcg_ignores_order_among_negatives():
    assert ndcg_score([9, 1, 2, 8, 3], [9, 8]) == ndcg_score([9, 2, 1, 8, 3], [9, 8])


def test_precision_recall_set_arithmetic():
    truth = list(range(200))
    assert precision_at_k(list(range(50)), truth, 50) == 1.0
    assert recall_at_k(list(range(50)), truth, 50) == 0.25
    assert precision_at_k([500, 501], truth, 2) == recall_at_k([500, 501], truth, 2) == 0.0


def test_metrics_match_oracles_on_random_cases():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        ranking, pos = random_case(rng)
        assert abs(reciprocal_rank(ranking, pos) - rr_oracle(ranking, pos)) <= 1e-12
        assert abs(average_precision(ranking, pos) - ap_oracle(ranking, pos)) <= 1e-12
        assert abs(ndcg_score(ranking, pos) - ndcg_oracle(ranking, pos)) <= 1e-12
        k = int(rng.integers(1, len(ranking) + 1))
        assert abs(precision_at_k(ranking, pos, k) - p_at_k_oracle(ranking, pos, k)) <= 1e-12
        assert abs(recall_at_k(ranking, pos, k) - r_at_k_oracle(ranking, pos, k)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_bounded_and_relabel_invariant(seed):
    rng = np.random.default_rng(seed)
    ranking, pos = random_case(rng)
    relabel = {i: int(j) for i, j in zip(ranking, rng.permutation(10_000)[: len(ranking)])}
    r2, p2 = [relabel[i] for i in ranking], {relabel[i] for i in pos}
    for f in (reciprocal_rank, average_precision, ndcg_score):
        v = f(ranking, pos)
        assert 0.0 <= v <= 1.0 and v == f(r2, p2)


def test_ideal_rankings_score_one():
    pos = [3, 1]
    ranking = [3, 1, 7, 8, 9]
    assert average_precision(ranking, pos) == ndcg_score(ranking, pos) == reciprocal_rank(ranking, pos) == 1.0


def test_random_baseline_closed_form_and_simulation():
    h21 = sum(1 / r for r in range(1, 22)) / 21
    assert random_mrr_baseline(21) == pytest.approx(h21)
    assert h21 == pytest.approx(0.1735, abs=1e-4)
    rng = np.random.default_rng(1)
    ranks = rng.integers(1, 22, size=10_000)
    assert abs(np.mean(1.0 / ranks) - h21) < 0.01


def test_case_construction_ratios(small_world):
    qp, cat = small_world["qp"], small_world["catalog"]
    sets = make_ranking_sets(qp.query_ids[:60], qp, cat, small_world["text"], seed=2)
    assert sets.mrr_cases and len(sets.mrr_cases) == len(sets.map_cases)
    for c in sets.mrr_cases:
        assert len(c.positive_ids) == 1 and len(c.negative_ids) == 20 and len(c.candidates) == 21
    for c in sets.map_cases:
        assert len(c.negative_ids) == 3 * len(c.positive_ids)
        assert not set(c.negative_ids) & set(qp.neighbors(c.query_id))
    again = make_ranking_sets(qp.query_ids[:60], qp, cat, small_world["text"], seed=2)
    assert again.mrr_cases == sets.mrr_cases


def test_two_positive_query_gets_six_negatives(small_world):
    cat = small_world["catalog"]
    qp = QueryProductGraph({(0, 1): 3, (0, 2): 1})
    sets = make_ranking_sets([0], qp, cat, {0: "q"})
    assert len(sets.map_cases[0].negative_ids) == 6


def test_overlapping_case_rejected():
    with pytest.raises(MetricError):
        RankingCase(0, "q", (1,), (1, 2))


def test_retrieval_cases_are_single_atg(small_world):
    qp, cat = small_world["qp"], small_world["catalog"]
    for c in make_retrieval_cases(qp.query_ids, qp, cat, small_world["text"]):
        assert {cat.atg_of[p] for p in c.truth} == {c.atg}


class LookupEmbed:
    def __init__(self, table):
        self.table = table

    def __call__(self, texts):
        return np.array([self.table[t] for t in texts], dtype=np.float64)


def test_rank_candidates_ideal_and_scale_invariant():
    case = RankingCase(0, "q", (5, 6), (1, 2, 3))
    rng = np.random.default_rng(0)
    q = rng.standard_normal(4)
    table = {"q": q, "p5": q, "p6": q * 2.0}
    table.update({f"p{i}": rng.standard_normal(4) for i in (1, 2, 3)})
    text = lambda pid: f"p{pid}"
    ranking = rank_candidates(LookupEmbed(table), case, text)
    assert ranking[:2] == [5, 6]  # tie at cosine 1 broken by id
    scaled = LookupEmbed({k: v * 3.7 for k, v in table.items()})
    assert rank_candidates(scaled, case, text) == ranking


def test_report_json_round_trip(tmp_path):
    cases = [RankingCase(0, "q", (5,), (1, 2))]
    emb = LookupEmbed({"q": np.ones(2), "p5": np.ones(2), "p1": -np.ones(2), "p2": np.array([1.0, -1.0])})
    rep = evaluate_ranking(emb, cases, cases, lambda p: f"p{p}")
    assert rep.mrr == rep.map == rep.ndcg == 1.0
    rep.save(tmp_path / "r.json")
    assert MetricReport.load(tmp_path / "r.json") == rep


def test_case_file_round_trip(tmp_path, small_world):
    qp, cat = small_world["qp"], small_world["catalog"]
    sets = make_ranking_sets(qp.query_ids[:20], qp, cat, small_world["text"])
    retr = make_retrieval_cases(qp.query_ids[:20], qp, cat, small_world["text"])
    save_cases(sets, retr, tmp_path / "c.json")
    sets2, retr2 = load_cases(tmp_path / "c.json")
    assert sets2.mrr_cases == sets.mrr_cases and sets2.map_cases == sets.map_cases and retr2 == retr
    with pytest.raises(MetricError):
        RetrievalCase(0, "q", (), ("a", "b"))
