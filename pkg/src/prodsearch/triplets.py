"""Training triplets from click graphs with ATG-aware negative sampling."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .catalog import ATG, Catalog
from .graphs import QueryClass, QueryProductGraph, QueryType, top_k_positives

log = logging.getLogger(__name__)

QP, PP = "QP", "PP"


@dataclass(frozen=True)
class Triplet:
    anchor_text: str
    positive_text: str
    negative_text: str
    source: str
    anchor_id: int
    positive_id: int
    negative_id: int
    same_atg_negative: bool = False

    def __post_init__(self):
        if self.positive_id == self.negative_id:
            raise ValueError("positive and negative must differ")
        if not (self.anchor_text and self.positive_text and self.negative_text):
            raise ValueError("triplet texts must be non-empty")


@dataclass(frozen=True)
class SamplerConfig:
    broad_same_atg_prob: float = 0.0
    narrow_same_atg_prob: float = 0.5
    pp_same_atg_prob: float = 0.5
    top_k: int = 100
    positive_mode: str = "uniform"
    samples_per_query: int | None = None
    product_text: str = "description"
    seed: int = 0

    def __post_init__(self):
        for name in ("broad_same_atg_prob", "narrow_same_atg_prob", "pp_same_atg_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.positive_mode not in ("uniform", "weighted"):
            raise ValueError(f"positive_mode must be 'uniform' or 'weighted', got {self.positive_mode!r}")


@dataclass
class SampleStats:
    emitted: Counter = field(default_factory=Counter)
    skipped: Counter = field(default_factory=Counter)


def split_queries(query_ids: Iterable[int], ratio: float = 0.85, seed: int = 0) -> tuple[list[int], list[int]]:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in the open interval (0, 1), got {ratio}")
    ids = np.array(sorted(set(query_ids)), dtype=np.int64)
    perm = np.random.default_rng([seed, 0x5B1]).permutation(ids.size)
    n_train = int(round(ratio * ids.size))
    return sorted(int(i) for i in ids[perm[:n_train]]), sorted(int(i) for i in ids[perm[n_train:]])


class NegativeSampler:
    """Draws a product of the same or a different ATG, avoiding an exclusion set."""

    def __init__(self, catalog: Catalog):
        self.catalog = catalog
        self.ids = catalog.ids
        self.by_atg = catalog.by_atg
        self.atg_of = catalog.atg_of

    def same(self, rng: np.random.Generator, atg: ATG, exclude: set[int]) -> int | None:
        pool = self.by_atg.get(atg, np.zeros(0, np.int64))
        return self._draw(rng, pool, exclude, lambda p: True)

    def different(self, rng: np.random.Generator, atg: ATG, exclude: set[int]) -> int | None:
        return self._draw(rng, self.ids, exclude, lambda p: self.atg_of[p] != atg)

    @staticmethod
    def _draw(rng, pool: np.ndarray, exclude: set[int], ok) -> int | None:
        if pool.size == 0:
            return None
        for _ in range(64):
            p = int(pool[rng.integers(pool.size)])
            if p not in exclude and ok(p):
                return p
        eligible = [int(p) for p in pool if int(p) not in exclude and ok(int(p))]
        if not eligible:
            return None
        return eligible[int(rng.integers(len(eligible)))]


def sample_qp_triplets(qp: QueryProductGraph, classes: Mapping[int, QueryClass], catalog: Catalog,
                       query_text: Mapping[int, str], cfg: SamplerConfig = SamplerConfig(),
                       query_ids: Iterable[int] | None = None, stats: SampleStats | None = None,
                       epoch: int = 0) -> Iterator[Triplet]:
    """Query-anchored triplets.

    BROAD queries take a negative from a different ATG than the positive;
    NARROW queries take a same-ATG negative with ``narrow_same_atg_prob``.
    Negatives never come from the query's clicked set. UNNAMED queries are
    skipped. A draw whose rule has no eligible product is skipped and counted.
    """
    stats = stats if stats is not None else SampleStats()
    neg = NegativeSampler(catalog)
    ids = sorted(classes) if query_ids is None else sorted(query_ids)
    for qid in ids:
        cls = classes.get(qid)
        if cls is None or cls.kind is QueryType.UNNAMED:
            stats.skipped["unnamed"] += 1
            continue
        rng = np.random.default_rng([cfg.seed, epoch, qid, 0x0])
        positives = top_k_positives(qid, qp, cfg.top_k)
        clicked = set(qp.neighbors(qid))
        n = cfg.samples_per_query or len(positives)
        if cfg.positive_mode == "weighted":
            w = np.array([qp.weight(qid, p) for p in positives], dtype=np.float64)
            picks = rng.choice(len(positives), size=n, p=w / w.sum())
        else:
            picks = rng.integers(len(positives), size=n)
        p_same = cfg.broad_same_atg_prob if cls.kind is QueryType.BROAD else cfg.narrow_same_atg_prob
        for i in picks:
            pos = positives[int(i)]
            atg = catalog.atg_of[pos]
            same = bool(rng.random() < p_same)
            nid = neg.same(rng, atg, clicked) if same else neg.different(rng, atg, clicked)
            if nid is None:
                stats.skipped[f"no_negative_{cls.kind.value}"] += 1
                continue
            stats.emitted[QP] += 1
            yield Triplet(query_text[qid], catalog.text(pos, cfg.product_text), catalog.text(nid, cfg.product_text),
                          QP, qid, pos, nid, catalog.atg_of[nid] == atg)
    if sum(stats.skipped.values()):
        log.info("qp sampling skipped %s", dict(stats.skipped))


def sample_pp_triplets(walk_sets: Mapping[int, set[int]], catalog: Catalog, cfg: SamplerConfig = SamplerConfig(),
                       stats: SampleStats | None = None, epoch: int = 0) -> Iterator[Triplet]:
    """Product-anchored triplets: every walk-visited node is a positive."""
    stats = stats if stats is not None else SampleStats()
    neg = NegativeSampler(catalog)
    for anchor in sorted(walk_sets):
        visited = walk_sets[anchor]
        if not visited:
            continue
        rng = np.random.default_rng([cfg.seed, epoch, anchor, 0x1])
        exclude = set(visited) | {anchor}
        atg = catalog.atg_of[anchor]
        for pos in sorted(visited):
            same = bool(rng.random() < cfg.pp_same_atg_prob)
            nid = neg.same(rng, atg, exclude) if same else neg.different(rng, atg, exclude)
            if nid is None:
                stats.skipped["no_negative_pp"] += 1
                continue
            stats.emitted[PP] += 1
            yield Triplet(catalog.text(anchor, cfg.product_text), catalog.text(pos, cfg.product_text),
                          catalog.text(nid, cfg.product_text), PP, anchor, pos, nid, catalog.atg_of[nid] == atg)


def augment(qp_triplets: Iterable[Triplet], pp_triplets: Iterable[Triplet], seed: int = 0) -> list[Triplet]:
    merged = list(qp_triplets) + list(pp_triplets)
    order = np.random.default_rng([seed, 0xA6]).permutation(len(merged))
    return [merged[i] for i in order]


def save_triplets(triplets: Sequence[Triplet], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(f"{_clean(t.anchor_text)}\t{_clean(t.positive_text)}\t{_clean(t.negative_text)}\t{t.source}\n")


def load_triplet_texts(path: str | Path) -> list[tuple[str, str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                a, p, n, s = line.rstrip("\n").split("\t")
                rows.append((a, p, n, s))
    return rows


def _clean(text: str) -> str:
    return text.replace("\t", " ").replace("\n", " ")
