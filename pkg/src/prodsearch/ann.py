"""Random-hyperplane forest for approximate cosine nearest neighbours.

Each tree splits on the hyperplane through the origin that bisects two
randomly chosen (normalised) points, so it partitions by angle. A query
walks all trees best-first through a shared priority queue, collects leaf
items until the search budget is spent, then re-scores the candidate union
exactly. Final order is descending cosine with ties by ascending id.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .container import load_arrays, save_arrays


class IndexError_(ValueError):
    pass


def cosine_scores(q: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Cosine of ``q`` against every row, in float64; zero vectors score 0."""
    q = np.asarray(q, dtype=np.float64)
    M = np.asarray(vectors, dtype=np.float64)
    qn = np.sqrt(q @ q)
    mn = np.sqrt(np.einsum("ij,ij->i", M, M))
    denom = qn * mn
    dots = M @ q
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def rank_by_score(ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Order by descending score, ties by ascending id."""
    return np.asarray(ids)[np.lexsort((ids, -scores))]


def exact_knn(vectors: np.ndarray, q: np.ndarray, k: int, ids: np.ndarray | None = None) -> np.ndarray:
    vectors = np.asarray(vectors)
    if vectors.shape[0] == 0:
        raise IndexError_("exact_knn over an empty corpus")
    ids = np.arange(vectors.shape[0]) if ids is None else np.asarray(ids, dtype=np.int64)
    return rank_by_score(ids, cosine_scores(q, vectors))[:k]


@dataclass(frozen=True)
class AnnConfig:
    n_trees: int = 16
    leaf_size: int = 32
    search_k: int | None = None  # candidate budget; None -> n_trees * leaf_size * 12
    seed: int = 0

    def budget(self, k: int) -> int:
        base = self.search_k if self.search_k is not None else self.n_trees * self.leaf_size * 12
        return max(base, k)


@dataclass(frozen=True)
class QueryResult:
    ids: np.ndarray
    scores: np.ndarray
    k_exceeds_corpus: bool = False
    n_candidates: int = 0


def _unit(M: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(M, axis=1, keepdims=True)
    return M / np.where(n > 0, n, 1.0)


class EmbeddingIndex:
    def __init__(self, ids: np.ndarray, vectors: np.ndarray, config: AnnConfig, roots: np.ndarray,
                 normals: np.ndarray, children: np.ndarray, leaf_bounds: np.ndarray, leaf_items: np.ndarray):
        self.ids = ids
        self.vectors = vectors
        self.config = config
        self.roots = roots
        self.normals = normals
        self.children = children
        self.leaf_bounds = leaf_bounds
        self.leaf_items = leaf_items

    def __len__(self) -> int:
        return self.ids.size

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    # ------------------------------------------------------------ build

    @classmethod
    def build(cls, vectors: Mapping[int, np.ndarray] | tuple[np.ndarray, np.ndarray],
              config: AnnConfig = AnnConfig()) -> "EmbeddingIndex":
        """Build from ``{id: vector}`` or an ``(ids, matrix)`` pair."""
        if isinstance(vectors, tuple):
            ids, M = np.asarray(vectors[0], dtype=np.int64), np.asarray(vectors[1])
        else:
            keys = sorted(vectors)
            dims = {np.asarray(vectors[k]).shape for k in keys}
            if len(dims) > 1:
                raise IndexError_(f"vectors have differing shapes: {sorted(dims)}")
            ids = np.array(keys, dtype=np.int64)
            M = np.array([vectors[k] for k in keys]) if keys else np.zeros((0, 0))
        if ids.size == 0:
            raise IndexError_("cannot build an index over zero vectors")
        if M.ndim != 2 or M.shape[0] != ids.size:
            raise IndexError_(f"vector block {M.shape} does not match {ids.size} ids")
        if np.unique(ids).size != ids.size:
            raise IndexError_("duplicate ids")
        M = M.astype(np.float32)
        unit = _unit(M.astype(np.float64))

        normals: list[np.ndarray] = []
        children: list[tuple[int, int]] = []
        bounds: list[tuple[int, int]] = []
        leaf_items: list[np.ndarray] = []
        n_leaf_items = 0
        roots = []
        d = M.shape[1]

        def new_node() -> int:
            normals.append(np.zeros(d, np.float32))
            children.append((-1, -1))
            bounds.append((0, 0))
            return len(children) - 1

        for tree in range(config.n_trees):
            rng = np.random.default_rng([config.seed, tree])
            root = new_node()
            roots.append(root)
            stack = [(root, np.arange(ids.size))]
            while stack:
                node, items = stack.pop()
                if items.size <= config.leaf_size:
                    bounds[node] = (n_leaf_items, n_leaf_items + items.size)
                    leaf_items.append(items)
                    n_leaf_items += items.size
                    continue
                side = None
                for _ in range(8):
                    a, b = rng.choice(items, size=2, replace=False)
                    w = (unit[a] - unit[b]).astype(np.float32)
                    if not w.any():
                        continue
                    proj = unit[items] @ w.astype(np.float64)
                    side = proj > 0
                    if 0 < side.sum() < items.size:
                        break
                    side = None
                if side is None:
                    # degenerate (e.g. duplicate vectors): random balanced split
                    w = np.zeros(d, np.float32)
                    side = np.zeros(items.size, bool)
                    side[rng.permutation(items.size)[: items.size // 2]] = True
                left, right = new_node(), new_node()
                normals[node] = w
                children[node] = (left, right)
                stack.append((right, items[side]))
                stack.append((left, items[~side]))
        return cls(ids, M, config, np.array(roots, np.int64), np.array(normals, np.float32),
                   np.array(children, np.int64), np.array(bounds, np.int64),
                   np.concatenate(leaf_items).astype(np.int64))

    # ------------------------------------------------------------ query

    def candidates(self, q: np.ndarray, budget: int) -> np.ndarray:
        qd = np.asarray(q, dtype=np.float64)
        heap = [(-np.inf, int(r)) for r in self.roots]
        heapq.heapify(heap)
        seen = np.zeros(self.ids.size, dtype=bool)
        found = 0
        while heap and found < budget:
            neg_margin, node = heapq.heappop(heap)
            left, right = self.children[node]
            if left < 0:
                lo, hi = self.leaf_bounds[node]
                items = self.leaf_items[lo:hi]
                new = items[~seen[items]]
                seen[new] = True
                found += new.size
                continue
            w = self.normals[node]
            if not w.any():
                heapq.heappush(heap, (neg_margin, int(left)))
                heapq.heappush(heap, (neg_margin, int(right)))
                continue
            m = float(w.astype(np.float64) @ qd)
            bound = -neg_margin
            heapq.heappush(heap, (-min(bound, m), int(right)))
            heapq.heappush(heap, (-min(bound, -m), int(left)))
        return np.flatnonzero(seen)

    def query(self, q: np.ndarray, k: int = 50) -> QueryResult:
        q = np.asarray(q)
        if q.shape != (self.dim,):
            raise IndexError_(f"query dimension {q.shape} does not match index dimension {self.dim}")
        exceeds = k > self.ids.size
        k = min(k, self.ids.size)
        rows = self.candidates(q, self.config.budget(k))
        scores = cosine_scores(q, self.vectors[rows])
        order = np.lexsort((self.ids[rows], -scores))[:k]
        return QueryResult(self.ids[rows][order], scores[order], exceeds, rows.size)

    # ------------------------------------------------------------ identity / io

    def structure_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.roots, self.normals, self.children, self.leaf_bounds, self.leaf_items):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        c = self.config
        meta = {"dim": self.dim, "n_trees": c.n_trees, "leaf_size": c.leaf_size, "search_k": c.search_k,
                "seed": c.seed, **(extra_meta or {})}
        save_arrays(path, {"ids": self.ids, "vectors": self.vectors, "roots": self.roots, "normals": self.normals,
                           "children": self.children, "leaf_bounds": self.leaf_bounds,
                           "leaf_items": self.leaf_items}, meta)

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingIndex":
        a, meta = load_arrays(path)
        cfg = AnnConfig(meta["n_trees"], meta["leaf_size"], meta["search_k"], meta["seed"])
        return cls(a["ids"], a["vectors"], cfg, a["roots"], a["normals"], a["children"], a["leaf_bounds"],
                   a["leaf_items"])


def build(vectors, n_trees: int = 16, leaf_size: int = 32, seed: int = 0, search_k: int | None = None) -> EmbeddingIndex:
    return EmbeddingIndex.build(vectors, AnnConfig(n_trees, leaf_size, search_k, seed))


def query(index: EmbeddingIndex, q: np.ndarray, k: int = 50) -> QueryResult:
    return index.query(q, k)
