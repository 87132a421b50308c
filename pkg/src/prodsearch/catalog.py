"""Synthetic fashion catalog, queries, and click-stream sessions.

The generator stands in for real click logs: every product belongs to an
(article type, gender) group, queries are terse bags of attribute terms, and
sessions click products with probability rising in attribute relevance.
``relevance`` is the ground-truth oracle the tests score against.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

ATG = tuple[str, str]


class CatalogConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeVocabulary:
    brands: tuple[str, ...]
    article_types: tuple[str, ...]
    genders: tuple[str, ...]
    colors: tuple[str, ...]
    fits: tuple[str, ...]
    fabrics: tuple[str, ...]

    def __post_init__(self):
        for name in ("brands", "article_types", "genders", "colors", "fits", "fabrics"):
            values = getattr(self, name)
            if not values:
                raise CatalogConfigError(f"attribute list {name!r} is empty")
            if any(v != v.lower() or not v.strip() for v in values):
                raise CatalogConfigError(f"attribute list {name!r} must hold non-blank lowercase strings")
            if len(set(values)) != len(values):
                raise CatalogConfigError(f"attribute list {name!r} has duplicates")

    @property
    def atgs(self) -> list[ATG]:
        return [(a, g) for a in self.article_types for g in self.genders]

    def all_terms(self) -> list[str]:
        return sorted({*self.brands, *self.article_types, *self.genders, *self.colors, *self.fits, *self.fabrics})

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeVocabulary":
        return cls(**{k: tuple(v) for k, v in d.items()})


DEFAULT_VOCAB = AttributeVocabulary(
    brands=("nike", "adidas", "puma", "reebok", "hrx", "roadster", "allen solly", "levis", "wrangler",
            "biba", "libas", "fabindia", "mango", "van heusen", "peter england", "jack and jones",
            "only", "vero moda", "campus", "woodland"),
    article_types=("tshirts", "shirts", "jeans", "trousers", "kurtas", "dresses", "tops", "sweatshirts",
                   "jackets", "sweaters", "shorts", "track pants", "shoes", "sandals", "leggings"),
    genders=("men", "women", "boys", "girls"),
    colors=("red", "blue", "black", "white", "green", "yellow", "pink", "grey", "navy", "maroon",
            "olive", "beige"),
    fits=("slim fit", "regular fit", "skinny fit", "relaxed fit", "oversized"),
    fabrics=("cotton", "denim", "linen", "polyester", "wool", "silk", "fleece", "rayon"),
)


@dataclass(frozen=True)
class Product:
    product_id: int
    atg: ATG
    brand: str
    attributes: frozenset[str]
    title: str
    description: str

    def to_json(self) -> dict:
        return {"product_id": self.product_id, "atg": list(self.atg), "brand": self.brand,
                "attributes": sorted(self.attributes), "title": self.title, "description": self.description}

    @classmethod
    def from_json(cls, d: dict) -> "Product":
        return cls(int(d["product_id"]), tuple(d["atg"]), d["brand"], frozenset(d["attributes"]),
                   d["title"], d["description"])


@dataclass(frozen=True)
class SyntheticQuery:
    query_id: int
    text: str
    intent: frozenset[str]
    intended_atg: ATG | None

    def to_json(self) -> dict:
        return {"query_id": self.query_id, "text": self.text, "intent": sorted(self.intent),
                "intended_atg": list(self.intended_atg) if self.intended_atg else None}

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticQuery":
        atg = tuple(d["intended_atg"]) if d.get("intended_atg") else None
        return cls(int(d["query_id"]), d["text"], frozenset(d["intent"]), atg)


@dataclass(frozen=True)
class Session:
    session_id: int
    query_id: int | None
    clicked_product_ids: tuple[int, ...]

    def to_json(self) -> dict:
        return {"session_id": self.session_id, "query_id": self.query_id,
                "clicked_product_ids": list(self.clicked_product_ids)}

    @classmethod
    def from_json(cls, d: dict) -> "Session":
        q = d.get("query_id")
        return cls(int(d["session_id"]), None if q is None else int(q), tuple(int(p) for p in d["clicked_product_ids"]))


@dataclass
class Catalog:
    vocab: AttributeVocabulary
    products: list[Product]

    def __len__(self) -> int:
        return len(self.products)

    @cached_property
    def by_id(self) -> dict[int, Product]:
        return {p.product_id: p for p in self.products}

    @cached_property
    def ids(self) -> np.ndarray:
        return np.array([p.product_id for p in self.products], dtype=np.int64)

    @cached_property
    def atg_of(self) -> dict[int, ATG]:
        return {p.product_id: p.atg for p in self.products}

    @cached_property
    def by_atg(self) -> dict[ATG, np.ndarray]:
        groups: dict[ATG, list[int]] = {}
        for p in self.products:
            groups.setdefault(p.atg, []).append(p.product_id)
        return {k: np.array(sorted(v), dtype=np.int64) for k, v in sorted(groups.items())}

    def atg_sizes(self) -> dict[ATG, int]:
        return {k: len(v) for k, v in self.by_atg.items()}

    def text(self, product_id: int, field_name: str = "description") -> str:
        return getattr(self.by_id[product_id], field_name)


@dataclass
class ClickLog:
    sessions: list[Session]

    def __len__(self) -> int:
        return len(self.sessions)

    def validate(self, catalog: Catalog, queries: Iterable[SyntheticQuery]) -> None:
        qids = {q.query_id for q in queries}
        pids = catalog.by_id
        for s in self.sessions:
            if not s.clicked_product_ids:
                raise ValueError(f"session {s.session_id} has no clicks")
            if s.query_id is not None and s.query_id not in qids:
                raise ValueError(f"session {s.session_id} references unknown query {s.query_id}")
            missing = [p for p in s.clicked_product_ids if p not in pids]
            if missing:
                raise ValueError(f"session {s.session_id} references unknown products {missing}")


@dataclass(frozen=True)
class ClickModel:
    """Logistic click propensity over the whole catalog.

    A product's click logit is ``bias + relevance_weight * rel + brand_weight *
    brand_match + noise`` with ``noise ~ N(0, position_noise)``. The first click
    is drawn proportional to the sigmoid of that logit; every other product is
    then clicked independently, with ``atg_weight`` added to the logit of
    products sharing the first click's ATG. A session keeps at most
    ``1 + Poisson(mean_extra_clicks)`` clicks (capped at ``max_clicks``).
    Browsing sessions (no query) start from a uniform product and co-click
    mostly within its ATG.
    """

    relevance_weight: float = 14.0
    brand_weight: float = 1.0
    bias: float = -12.0
    position_noise: float = 1.0
    atg_weight: float = 2.0
    mean_extra_clicks: float = 1.5
    max_clicks: int = 8
    browse_fraction: float = 0.3
    browse_bias: float = -8.0
    browse_atg_weight: float = 6.0
    browse_brand_weight: float = 1.0
    popularity_exponent: float = 1.0


_FILLER = (
    "designed for everyday comfort and easy movement",
    "machine wash cold with like colours",
    "a wardrobe essential that works across seasons",
    "finished with fine stitching for a clean look",
    "soft on the skin and breathable through the day",
    "style it with sneakers for a relaxed weekend look",
    "dry in shade and do not bleach",
    "the model is wearing a standard size",
    "made to last wash after wash",
    "a smart choice for work travel and weekends",
    "lightweight build keeps you cool",
    "easy to pair with your favourite accessories",
    "crafted with attention to detail",
    "ideal for casual outings and festive days",
    "iron on low heat if needed",
)

_PAIRINGS = ("pair it with {} for a complete look", "goes well with {}", "team it up with {}")

_TEMPLATES: tuple[tuple[tuple[str, ...], float], ...] = (
    (("article_type", "gender"), 0.12),
    (("brand", "article_type", "gender"), 0.22),
    (("color", "article_type", "gender"), 0.16),
    (("fit", "article_type", "gender"), 0.10),
    (("fabric", "article_type", "gender"), 0.10),
    (("brand", "color", "article_type", "gender"), 0.10),
    (("color", "fabric", "article_type", "gender"), 0.05),
    (("brand", "article_type"), 0.05),
    (("article_type",), 0.04),
    (("brand", "gender"), 0.06),
)


def _describe(rng: np.random.Generator, vocab: AttributeVocabulary, brand, color, fit, fabric, at, g) -> str:
    head = [
        f"{brand} {color} {at} for {g}",
        f"this {fit} {at} comes in {color}",
        f"made from {fabric}",
        f"by {brand}",
    ]
    target = int(rng.integers(31, 81))
    # " . " separators count as tokens
    words = sum(len(s.split()) for s in head) + len(head) - 1
    body: list[str] = []
    while words + 1 < target:
        words += 1
        if rng.random() < 0.25:
            other = vocab.article_types[int(rng.integers(len(vocab.article_types)))]
            sent = _PAIRINGS[int(rng.integers(len(_PAIRINGS)))].format(other)
        else:
            sent = _FILLER[int(rng.integers(len(_FILLER)))]
        toks = sent.split()[: target - words]
        body.append(" ".join(toks))
        words += len(toks)
    return " . ".join(head + body)


def gen_catalog(vocab: AttributeVocabulary = DEFAULT_VOCAB, n_products: int = 2000, seed: int = 0) -> Catalog:
    """Generate ``n_products`` products; ATGs are assigned round-robin over reshuffled cycles."""
    if n_products < 1:
        raise CatalogConfigError(f"n_products must be >= 1, got {n_products}")
    rng = np.random.default_rng([seed, 0xCA7])
    atgs = vocab.atgs
    order: list[ATG] = []
    while len(order) < n_products:
        order.extend(atgs[i] for i in rng.permutation(len(atgs)))
    products = []
    for pid in range(n_products):
        at, g = order[pid]
        brand = vocab.brands[int(rng.integers(len(vocab.brands)))]
        color = vocab.colors[int(rng.integers(len(vocab.colors)))]
        fit = vocab.fits[int(rng.integers(len(vocab.fits)))]
        fabric = vocab.fabrics[int(rng.integers(len(vocab.fabrics)))]
        title = f"{brand} {g} {color} {fit} {fabric} {at}"
        desc = _describe(rng, vocab, brand, color, fit, fabric, at, g)
        attrs = frozenset({at, g, brand, color, fit, fabric})
        products.append(Product(pid, (at, g), brand, attrs, title, desc))
    return Catalog(vocab, products)


def relevance(query: SyntheticQuery, product: Product) -> bool:
    return query.intent <= product.attributes


class _RelevanceIndex:
    """Product x attribute-term incidence matrix for vectorised relevance."""

    def __init__(self, catalog: Catalog):
        self.terms = {t: i for i, t in enumerate(catalog.vocab.all_terms())}
        self.matrix = np.zeros((len(catalog), len(self.terms)), dtype=np.int32)
        for row, p in enumerate(catalog.products):
            for a in p.attributes:
                self.matrix[row, self.terms[a]] = 1

    def mask(self, intent: frozenset[str]) -> np.ndarray:
        cols = [self.terms[t] for t in intent if t in self.terms]
        if len(cols) != len(intent):
            return np.zeros(self.matrix.shape[0], dtype=bool)
        return self.matrix[:, cols].sum(axis=1) == len(cols)


def _gen_queries(catalog: Catalog, n_queries: int, rng: np.random.Generator) -> list[SyntheticQuery]:
    weights = np.array([w for _, w in _TEMPLATES])
    weights /= weights.sum()
    seen: set[frozenset[str]] = set()
    queries: list[SyntheticQuery] = []
    attempts = 0
    while len(queries) < n_queries:
        attempts += 1
        if attempts > 200 * n_queries:
            raise CatalogConfigError(f"could only build {len(queries)} distinct queries; catalog too small")
        p = catalog.products[int(rng.integers(len(catalog)))]
        slots, _ = _TEMPLATES[int(rng.choice(len(_TEMPLATES), p=weights))]
        values = {"article_type": p.atg[0], "gender": p.atg[1], "brand": p.brand}
        for a in p.attributes:
            if a in catalog.vocab.colors:
                values["color"] = a
            elif a in catalog.vocab.fits:
                values["fit"] = a
            elif a in catalog.vocab.fabrics:
                values["fabric"] = a
        intent = frozenset(values[s] for s in slots)
        if intent in seen:
            continue
        seen.add(intent)
        terms = sorted(intent)
        terms = [terms[i] for i in rng.permutation(len(terms))]
        atg = p.atg if {"article_type", "gender"} <= set(slots) else None
        queries.append(SyntheticQuery(len(queries), " ".join(terms), intent, atg))
    return queries


def _draw_clicks(rng: np.random.Generator, logit: np.ndarray, budget: int, atg_codes: np.ndarray,
                 atg_weight: float, first: int | None = None) -> list[int]:
    """First click proportional to propensity, then independent Bernoulli co-clicks."""
    if first is None:
        p = _sigmoid(logit)
        first = int(rng.choice(p.size, p=p / p.sum()))
    boosted = logit + atg_weight * (atg_codes == atg_codes[first])
    hits = np.flatnonzero(rng.random(logit.size) < _sigmoid(boosted))
    hits = hits[hits != first]
    if hits.size > budget - 1:
        hits = rng.choice(hits, size=budget - 1, replace=False)
    else:
        hits = rng.permutation(hits)
    return [first] + [int(i) for i in hits]


def gen_clicklog(catalog: Catalog, n_queries: int = 3000, n_sessions: int = 20000,
                 click_model: ClickModel = ClickModel(), seed: int = 0) -> tuple[list[SyntheticQuery], ClickLog]:
    """Generate queries and sessions; every query owns at least one session."""
    if len(catalog) == 0:
        raise CatalogConfigError("catalog is empty")
    if n_sessions < n_queries:
        raise CatalogConfigError(f"n_sessions ({n_sessions}) must be >= n_queries ({n_queries})")
    cm = click_model
    rng = np.random.default_rng([seed, 0x9E5])
    queries = _gen_queries(catalog, n_queries, rng)

    n_extra = n_sessions - n_queries
    n_browse = int(round(n_extra * cm.browse_fraction))
    ranks = np.arange(1, n_queries + 1, dtype=np.float64)
    pop = ranks ** -cm.popularity_exponent
    pop /= pop.sum()
    # head queries are the short ones
    popular_order = np.lexsort((rng.random(n_queries), [len(q.intent) for q in queries]))
    extra_q = popular_order[rng.choice(n_queries, size=n_extra - n_browse, p=pop)]
    plan: list[int | None] = list(range(n_queries)) + [int(q) for q in extra_q] + [None] * n_browse
    plan = [plan[i] for i in rng.permutation(len(plan))]

    rel_index = _RelevanceIndex(catalog)
    brands = np.array([p.brand for p in catalog.products])
    atg_codes = np.array(_atg_codes(catalog))
    pids = catalog.ids
    n = len(catalog)
    rel_cache: dict[int, np.ndarray] = {}

    sessions = []
    for sid, qid in enumerate(plan):
        srng = np.random.default_rng([seed, 0x5E5, sid])
        budget = min(1 + int(srng.poisson(cm.mean_extra_clicks)), cm.max_clicks)
        noise = srng.normal(0.0, cm.position_noise, size=n) if cm.position_noise > 0 else 0.0
        if qid is not None:
            q = queries[qid]
            rel = rel_cache.get(qid)
            if rel is None:
                rel = rel_cache[qid] = rel_index.mask(q.intent).astype(np.float64)
            brand_match = np.isin(brands, list(q.intent)).astype(np.float64)
            logit = cm.bias + cm.relevance_weight * rel + cm.brand_weight * brand_match + noise
            picked = _draw_clicks(srng, logit, budget, atg_codes, cm.atg_weight)
        else:
            first = int(srng.integers(n))
            same_brand = (brands == brands[first]).astype(np.float64)
            logit = cm.browse_bias + cm.browse_brand_weight * same_brand + noise
            picked = _draw_clicks(srng, logit, budget, atg_codes, cm.browse_atg_weight, first=first)
        sessions.append(Session(sid, qid, tuple(int(pids[i]) for i in picked)))
    return queries, ClickLog(sessions)


def _atg_codes(catalog: Catalog) -> list[int]:
    index = {atg: i for i, atg in enumerate(catalog.vocab.atgs)}
    return [index[p.atg] for p in catalog.products]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------- JSON Lines


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    path = Path(path)
    _write_jsonl(path, (p.to_json() for p in catalog.products))
    vocab_path = path.with_name(path.stem + ".vocab.json")
    vocab_path.write_text(json.dumps(catalog.vocab.to_dict(), sort_keys=True), encoding="utf-8")


def load_catalog(path: str | Path) -> Catalog:
    path = Path(path)
    vocab_path = path.with_name(path.stem + ".vocab.json")
    vocab = AttributeVocabulary.from_dict(json.loads(vocab_path.read_text(encoding="utf-8")))
    return Catalog(vocab, [Product.from_json(d) for d in _read_jsonl(path)])


def save_queries(queries: list[SyntheticQuery], path: str | Path) -> None:
    _write_jsonl(Path(path), (q.to_json() for q in queries))


def load_queries(path: str | Path) -> list[SyntheticQuery]:
    return [SyntheticQuery.from_json(d) for d in _read_jsonl(Path(path))]


def save_clicklog(log: ClickLog, path: str | Path) -> None:
    _write_jsonl(Path(path), (s.to_json() for s in log.sessions))


def load_clicklog(path: str | Path) -> ClickLog:
    return ClickLog([Session.from_json(d) for d in _read_jsonl(Path(path))])
