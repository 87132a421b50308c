"""Ranking/retrieval test-set construction and the evaluation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .ann import EmbeddingIndex, cosine_scores, rank_by_score
from .catalog import ATG, Catalog
from .graphs import QueryProductGraph, top_k_positives


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------- per-case metrics


def reciprocal_rank(ranking: Sequence[int], positives: Iterable[int]) -> float:
    pos = set(positives)
    for r, item in enumerate(ranking, start=1):
        if item in pos:
            return 1.0 / r
    raise MetricError("no positive appears in the ranking")


def average_precision(ranking: Sequence[int], positives: Iterable[int]) -> float:
    pos = set(positives)
    if not pos:
        raise MetricError("average precision needs at least one positive")
    hits, total = 0, 0.0
    for r, item in enumerate(ranking, start=1):
        if item in pos:
            hits += 1
            total += hits / r
    return total / len(pos)


def ndcg_score(ranking: Sequence[int], positives: Iterable[int]) -> float:
    """Binary-gain NDCG with a ``1 / log2(rank + 1)`` discount."""
    pos = set(positives)
    if not pos:
        raise MetricError("NDCG needs at least one positive")
    dcg = sum(1.0 / math.log2(r + 1) for r, item in enumerate(ranking, start=1) if item in pos)
    ideal = sum(1.0 / math.log2(r + 1) for r in range(1, min(len(pos), len(ranking)) + 1))
    return dcg / ideal


def precision_at_k(retrieved: Sequence[int], truth: Iterable[int], k: int) -> float:
    return len(set(retrieved[:k]) & set(truth)) / k


def recall_at_k(retrieved: Sequence[int], truth: Iterable[int], k: int) -> float:
    truth = set(truth)
    if not truth:
        raise MetricError("recall needs a non-empty ground truth")
    return len(set(retrieved[:k]) & truth) / len(truth)


# ---------------------------------------------------------------- cases


@dataclass(frozen=True)
class RankingCase:
    query_id: int
    query_text: str
    positive_ids: tuple[int, ...]
    negative_ids: tuple[int, ...]

    def __post_init__(self):
        if set(self.positive_ids) & set(self.negative_ids):
            raise MetricError(f"query {self.query_id}: positives and negatives overlap")
        if not self.positive_ids:
            raise MetricError(f"query {self.query_id}: no positives")

    @property
    def candidates(self) -> tuple[int, ...]:
        return self.positive_ids + self.negative_ids


@dataclass(frozen=True)
class RetrievalCase:
    query_id: int
    query_text: str
    truth: tuple[int, ...]
    atg: ATG

    def __post_init__(self):
        if not self.truth:
            raise MetricError(f"query {self.query_id}: empty ground truth")


def mrr(cases: Sequence[RankingCase], rankings: Sequence[Sequence[int]]) -> float:
    for c in cases:
        if len(c.positive_ids) != 1:
            raise MetricError(f"MRR case {c.query_id} has {len(c.positive_ids)} positives, expected 1")
    return float(np.mean([reciprocal_rank(r, c.positive_ids) for c, r in zip(cases, rankings, strict=True)]))


def mean_average_precision(cases: Sequence[RankingCase], rankings: Sequence[Sequence[int]]) -> float:
    return float(np.mean([average_precision(r, c.positive_ids) for c, r in zip(cases, rankings, strict=True)]))


def ndcg(cases: Sequence[RankingCase], rankings: Sequence[Sequence[int]]) -> float:
    return float(np.mean([ndcg_score(r, c.positive_ids) for c, r in zip(cases, rankings, strict=True)]))


def _sample_negatives(rng: np.random.Generator, pool: np.ndarray, exclude: set[int], n: int) -> tuple[int, ...] | None:
    eligible = pool[~np.isin(pool, np.fromiter(exclude, np.int64, len(exclude)))]
    if eligible.size < n:
        return None
    return tuple(int(i) for i in rng.choice(eligible, size=n, replace=False))


@dataclass
class CaseSets:
    mrr_cases: list[RankingCase] = field(default_factory=list)
    map_cases: list[RankingCase] = field(default_factory=list)
    skipped: int = 0


def make_ranking_sets(query_ids: Iterable[int], qp: QueryProductGraph, catalog: Catalog,
                      query_text: Mapping[int, str], seed: int = 0, top_k: int = 100, n_mrr_negatives: int = 20,
                      negative_ratio: int = 3, same_atg_negatives: bool = False) -> CaseSets:
    """1:20 reciprocal-rank cases and 1:3 MAP/NDCG cases for held-out queries.

    The MRR positive is one clicked product drawn uniformly; MAP positives are
    the query's top-k clicked products. Negatives are uniform over the catalog
    (or the positive's ATG) and exclude everything the query clicked.
    """
    out = CaseSets()
    ids = catalog.ids
    for qid in sorted(query_ids):
        if qid not in qp:
            out.skipped += 1
            continue
        rng = np.random.default_rng([seed, qid, 0xE7A])
        clicked = set(qp.neighbors(qid))
        positives = top_k_positives(qid, qp, top_k)
        one = positives[int(rng.integers(len(positives)))]
        pool = catalog.by_atg[catalog.atg_of[one]] if same_atg_negatives else ids
        neg = _sample_negatives(rng, pool, clicked, n_mrr_negatives)
        neg_map = _sample_negatives(rng, pool, clicked, negative_ratio * len(positives))
        if neg is None or neg_map is None:
            out.skipped += 1
            continue
        text = query_text[qid]
        out.mrr_cases.append(RankingCase(qid, text, (one,), neg))
        out.map_cases.append(RankingCase(qid, text, tuple(positives), neg_map))
    return out


def make_retrieval_cases(query_ids: Iterable[int], qp: QueryProductGraph, catalog: Catalog,
                         query_text: Mapping[int, str]) -> list[RetrievalCase]:
    """Held-out queries whose clicked products all share one ATG."""
    cases = []
    for qid in sorted(query_ids):
        if qid not in qp:
            continue
        clicked = sorted(qp.neighbors(qid))
        atgs = {catalog.atg_of[p] for p in clicked}
        if len(atgs) == 1:
            cases.append(RetrievalCase(qid, query_text[qid], tuple(clicked), next(iter(atgs))))
    return cases


# ---------------------------------------------------------------- scoring with a model

Embed = Callable[[Sequence[str]], np.ndarray]


def rank_candidates(embed: Embed, case: RankingCase, product_text: Callable[[int], str]) -> list[int]:
    """Candidates by descending cosine to the query; ties by ascending id."""
    cand = np.array(case.candidates, dtype=np.int64)
    vecs = embed([case.query_text] + [product_text(int(p)) for p in cand])
    return [int(i) for i in rank_by_score(cand, cosine_scores(vecs[0], vecs[1:]))]


@dataclass
class MetricReport:
    mrr: float | None = None
    map: float | None = None
    ndcg: float | None = None
    precision_at_k: float | None = None
    recall_at_k: float | None = None
    k: int | None = None
    n_cases: dict = field(default_factory=dict)
    per_query: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def evaluate_ranking(embed: Embed, mrr_cases: Sequence[RankingCase], map_cases: Sequence[RankingCase],
                     product_text: Callable[[int], str]) -> MetricReport:
    mrr_rank = [rank_candidates(embed, c, product_text) for c in mrr_cases]
    map_rank = [rank_candidates(embed, c, product_text) for c in map_cases]
    rep = MetricReport(n_cases={"mrr": len(mrr_cases), "map": len(map_cases)})
    rep.per_query = {
        "mrr": {str(c.query_id): reciprocal_rank(r, c.positive_ids) for c, r in zip(mrr_cases, mrr_rank)},
        "ap": {str(c.query_id): average_precision(r, c.positive_ids) for c, r in zip(map_cases, map_rank)},
        "ndcg": {str(c.query_id): ndcg_score(r, c.positive_ids) for c, r in zip(map_cases, map_rank)},
    }
    if mrr_cases:
        rep.mrr = mrr(mrr_cases, mrr_rank)
    if map_cases:
        rep.map = mean_average_precision(map_cases, map_rank)
        rep.ndcg = ndcg(map_cases, map_rank)
    return rep


def evaluate_retrieval(embed: Embed, index: EmbeddingIndex, cases: Sequence[RetrievalCase], k: int = 50) -> MetricReport:
    if not cases:
        raise MetricError("no retrieval cases")
    qv = embed([c.query_text for c in cases])
    prec, rec = {}, {}
    for c, v in zip(cases, qv):
        got = [int(i) for i in index.query(v, k).ids]
        prec[str(c.query_id)] = precision_at_k(got, c.truth, k)
        rec[str(c.query_id)] = recall_at_k(got, c.truth, k)
    return MetricReport(precision_at_k=float(np.mean(list(prec.values()))), recall_at_k=float(np.mean(list(rec.values()))),
                        k=k, n_cases={"retrieval": len(cases)}, per_query={"precision": prec, "recall": rec})


def random_mrr_baseline(n_candidates: int = 21) -> float:
    """Expected reciprocal rank of one positive placed uniformly among ``n_candidates``."""
    return sum(1.0 / r for r in range(1, n_candidates + 1)) / n_candidates


# ---------------------------------------------------------------- case files


def save_cases(sets: CaseSets, retrieval: Sequence[RetrievalCase], path: str | Path) -> None:
    obj = {"mrr": [asdict(c) for c in sets.mrr_cases], "map": [asdict(c) for c in sets.map_cases],
           "retrieval": [asdict(c) for c in retrieval], "skipped": sets.skipped}
    Path(path).write_text(json.dumps(obj, sort_keys=True), encoding="utf-8")


def load_cases(path: str | Path) -> tuple[CaseSets, list[RetrievalCase]]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))

    def rc(d):
        return RankingCase(d["query_id"], d["query_text"], tuple(d["positive_ids"]), tuple(d["negative_ids"]))

    sets = CaseSets([rc(d) for d in obj["mrr"]], [rc(d) for d in obj["map"]], obj["skipped"])
    retr = [RetrievalCase(d["query_id"], d["query_text"], tuple(d["truth"]), tuple(d["atg"])) for d in obj["retrieval"]]
    return sets, retr
