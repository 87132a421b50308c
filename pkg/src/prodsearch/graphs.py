"""Query-product and product-product click graphs, query classes, random walks."""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .catalog import ATG, Catalog, ClickLog, SyntheticQuery

BROAD_THRESHOLD = 0.3


class QueryNotFound(KeyError):
    pass


@dataclass
class QueryProductGraph:
    edges: dict[tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        self._adj: dict[int, dict[int, int]] = defaultdict(dict)
        for (q, p), w in self.edges.items():
            self._adj[q][p] = w

    def neighbors(self, query_id: int) -> dict[int, int]:
        if query_id not in self._adj:
            raise QueryNotFound(query_id)
        return self._adj[query_id]

    def __contains__(self, query_id: int) -> bool:
        return query_id in self._adj

    @property
    def query_ids(self) -> list[int]:
        return sorted(self._adj)

    def weight(self, query_id: int, product_id: int) -> int:
        return self.edges.get((query_id, product_id), 0)


@dataclass
class ProductProductGraph:
    edges: dict[tuple[int, int], int] = field(default_factory=dict)
    node_atg: dict[int, ATG] = field(default_factory=dict)

    def __post_init__(self):
        self._adj: dict[int, dict[int, int]] = defaultdict(dict)
        for (a, b), w in self.edges.items():
            self._adj[a][b] = w
            self._adj[b][a] = w

    def weight(self, a: int, b: int) -> int:
        return self.edges.get((min(a, b), max(a, b)), 0)

    def neighbors(self, product_id: int) -> dict[int, int]:
        return self._adj.get(product_id, {})

    @property
    def nodes(self) -> list[int]:
        return sorted(self.node_atg)


class QueryType(enum.Enum):
    UNNAMED = "unnamed"
    BROAD = "broad"
    NARROW = "narrow"


@dataclass(frozen=True)
class QueryClass:
    kind: QueryType
    assigned_atg: ATG | None = None
    coverage: float = 0.0


def canonical_query_ids(queries: Iterable[SyntheticQuery]) -> dict[int, int]:
    """Map every query id to the smallest id sharing its exact text."""
    first: dict[str, int] = {}
    out = {}
    for q in sorted(queries, key=lambda q: q.query_id):
        out[q.query_id] = first.setdefault(q.text, q.query_id)
    return out


def build_qp_graph(log: ClickLog, queries: Iterable[SyntheticQuery] | None = None) -> QueryProductGraph:
    """Edge weight = number of distinct sessions where the query led to a click on the product."""
    canon = canonical_query_ids(queries) if queries is not None else None
    edges: dict[tuple[int, int], int] = defaultdict(int)
    for s in log.sessions:
        if s.query_id is None:
            continue
        q = canon.get(s.query_id, s.query_id) if canon else s.query_id
        for p in set(s.clicked_product_ids):
            edges[(q, p)] += 1
    return QueryProductGraph(dict(sorted(edges.items())))


def build_pp_graph(log: ClickLog, catalog: Catalog) -> ProductProductGraph:
    """Co-click counts between distinct same-ATG products clicked in one session."""
    atg = catalog.atg_of
    edges: dict[tuple[int, int], int] = defaultdict(int)
    for s in log.sessions:
        for a, b in combinations(sorted(set(s.clicked_product_ids)), 2):
            if atg[a] == atg[b]:
                edges[(a, b)] += 1
    return ProductProductGraph(dict(sorted(edges.items())), dict(sorted(atg.items())))


def classify_query(query_id: int, qp: QueryProductGraph, atg_of: Mapping[int, ATG],
                   atg_sizes: Mapping[ATG, int], broad_threshold: float = BROAD_THRESHOLD) -> QueryClass:
    """UNNAMED if clicks span several ATGs; BROAD if distinct clicked products
    cover more than ``broad_threshold`` of the single ATG; NARROW otherwise."""
    clicked = qp.neighbors(query_id)
    atgs = {atg_of[p] for p in clicked}
    if len(atgs) > 1:
        return QueryClass(QueryType.UNNAMED)
    (atg,) = atgs
    coverage = len(clicked) / atg_sizes[atg]
    kind = QueryType.BROAD if coverage > broad_threshold else QueryType.NARROW
    return QueryClass(kind, atg, coverage)


def classify_all(qp: QueryProductGraph, catalog: Catalog, query_ids: Iterable[int] | None = None,
                 broad_threshold: float = BROAD_THRESHOLD) -> dict[int, QueryClass]:
    sizes = catalog.atg_sizes()
    ids = qp.query_ids if query_ids is None else sorted(query_ids)
    return {q: classify_query(q, qp, catalog.atg_of, sizes, broad_threshold) for q in ids if q in qp}


def top_k_positives(query_id: int, qp: QueryProductGraph, k: int = 100) -> list[int]:
    """Neighbours by descending weight; equal weights fall back to ascending product id."""
    nbrs = qp.neighbors(query_id)
    return [p for p, _ in sorted(nbrs.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]


def random_walks(pp: ProductProductGraph, walks_per_node: int = 5, walk_length: int = 5, seed: int = 0,
                 weighted: bool = True, nodes: Iterable[int] | None = None) -> dict[int, set[int]]:
    """Visited-node sets of short walks from each node.

    Each step moves to a neighbour chosen proportionally to edge weight (or
    uniformly with ``weighted=False``). The union over a node's walks is
    returned without the start node; each node draws from its own stream
    seeded by ``(seed, node)``.
    """
    tables: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for node in pp.nodes:
        nbrs = pp.neighbors(node)
        if nbrs:
            ids = np.array(sorted(nbrs), dtype=np.int64)
            w = np.array([nbrs[i] for i in ids], dtype=np.float64) if weighted else np.ones(len(ids))
            tables[node] = (ids, np.cumsum(w) / w.sum())
    out: dict[int, set[int]] = {}
    for start in (pp.nodes if nodes is None else sorted(nodes)):
        visited: set[int] = set()
        if start in tables:
            rng = np.random.default_rng([seed, start])
            for _ in range(walks_per_node):
                cur = start
                for _ in range(walk_length):
                    ids, cdf = tables[cur]
                    cur = int(ids[min(int(np.searchsorted(cdf, rng.random(), side="right")), len(ids) - 1)])
                    visited.add(cur)
        visited.discard(start)
        out[start] = visited
    return out


# ---------------------------------------------------------------- TSV edge lists


def save_edges(edges: Mapping[tuple[int, int], int], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (a, b), w in sorted(edges.items()):
            fh.write(f"{a}\t{b}\t{w}\n")


def load_edges(path: str | Path) -> dict[tuple[int, int], int]:
    edges = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                a, b, w = line.rstrip("\n").split("\t")
                edges[(int(a), int(b))] = int(w)
    return edges
