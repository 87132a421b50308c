"""Character-level BPE tokenizer and MLM masking.

Text is cut into chunks with ``\\s*\\S+|\\s+`` so that leading whitespace rides
with the following word; chunks concatenate back to the input, which makes
``decode(encode(t)) == t`` exact over the training alphabet.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, UNK, BOS, EOS, MASK = "<pad>", "<unk>", "<s>", "</s>", "<mask>"
SPECIALS = (PAD, UNK, BOS, EOS, MASK)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, MASK_ID = range(5)

_CHUNK = re.compile(r"\s*\S+|\s+")

DESK_VOCAB_SIZE = 4000
FULL_SCALE_VOCAB_SIZE = 30000


class TokenizerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class BpeVocab:
    tokens: list[str]
    merges: list[tuple[str, str]]
    specials: tuple[str, ...] = SPECIALS
    add_prefix_space: bool = False
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._chunk_ids = lru_cache(maxsize=65536)(self._encode_chunk)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_specials(self) -> int:
        return len(self.specials)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens, "merges": [list(m) for m in self.merges],
                           "specials": list(self.specials), "add_prefix_space": self.add_prefix_space},
                          ensure_ascii=False, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BpeVocab":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(obj["tokens"], [tuple(m) for m in obj["merges"]], tuple(obj["specials"]),
                   bool(obj.get("add_prefix_space", False)))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def _encode_chunk(self, chunk: str) -> tuple[int, ...]:
        symbols = list(chunk)
        ranks = self._ranks
        while len(symbols) > 1:
            best, best_rank = None, None
            for pair in zip(symbols, symbols[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            merged, i = [], 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    merged.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        lookup = self.token_to_id
        return tuple(lookup[s] if s in lookup and lookup[s] >= self.n_specials else UNK_ID for s in symbols)

    def encode(self, text: str, max_len: int | None = None, prefix_space: bool | None = None) -> TokenSequence:
        """Encode ``text``; with a prefix space the first word tokenizes like any later word."""
        if text and (self.add_prefix_space if prefix_space is None else prefix_space):
            text = " " + text
        ids: list[int] = []
        for chunk in _CHUNK.findall(text):
            ids.extend(self._chunk_ids(chunk))
        if max_len is not None and len(ids) > max_len:
            return TokenSequence(tuple(ids[:max_len]), truncated=True)
        return TokenSequence(tuple(ids))

    def decode(self, seq: TokenSequence | Iterable[int]) -> str:
        ids = seq.ids if isinstance(seq, TokenSequence) else seq
        out = []
        for i in ids:
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(self.tokens[i])
        text = "".join(out)
        if self.add_prefix_space and text.startswith(" "):
            text = text[1:]
        return text


def encode(text: str, vocab: BpeVocab, max_len: int | None = None) -> TokenSequence:
    return vocab.encode(text, max_len)


def decode(seq: TokenSequence | Iterable[int], vocab: BpeVocab) -> str:
    return vocab.decode(seq)


def train_bpe(corpus: Iterable[str], vocab_size: int = DESK_VOCAB_SIZE, seed: int = 0,
              add_prefix_space: bool = False) -> BpeVocab:
    """Greedy BPE: merge the most frequent adjacent pair until the vocabulary is full.

    Ties go to the lexicographically smallest pair, so ``seed`` has no effect on
    the result; it is accepted for interface symmetry with the other trainers.
    Training stops early once no adjacent pair is left to merge. With
    ``add_prefix_space`` every text gets a leading space, at training and at
    encode time, so a sentence-initial word shares its token with mid-sentence use.
    """
    words: Counter[str] = Counter()
    for text in corpus:
        if add_prefix_space and text:
            text = " " + text
        words.update(_CHUNK.findall(text))
    if not words:
        raise TokenizerConfigError("cannot train a tokenizer on an empty corpus")
    alphabet = sorted({ch for w in words for ch in w})
    if vocab_size <= len(alphabet) + len(SPECIALS):
        raise TokenizerConfigError(
            f"vocab_size {vocab_size} must exceed alphabet ({len(alphabet)}) + specials ({len(SPECIALS)})")

    tokens = list(SPECIALS) + alphabet
    known = set(tokens)
    merges: list[tuple[str, str]] = []
    seqs = {w: list(w) for w in words}

    pair_counts: Counter[tuple[str, str]] = Counter()
    where: dict[tuple[str, str], set[str]] = {}
    for w, syms in seqs.items():
        for p in zip(syms, syms[1:]):
            pair_counts[p] += words[w]
            where.setdefault(p, set()).add(w)

    while len(tokens) < vocab_size:
        live = [(c, p) for p, c in pair_counts.items() if c > 0]
        if not live:
            break
        top = max(c for c, _ in live)
        best = min(p for c, p in live if c == top)
        new = best[0] + best[1]
        merges.append(best)
        if new not in known and new not in SPECIALS:
            tokens.append(new)
            known.add(new)
        for w in sorted(where.pop(best, ())):
            syms = seqs[w]
            n = words[w]
            for p in zip(syms, syms[1:]):
                pair_counts[p] -= n
            merged, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == best[0] and syms[i + 1] == best[1]:
                    merged.append(new)
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            seqs[w] = merged
            for p in zip(merged, merged[1:]):
                pair_counts[p] += n
                where.setdefault(p, set()).add(w)
        pair_counts.pop(best, None)
    return BpeVocab(tokens, merges, add_prefix_space=add_prefix_space)


@dataclass(frozen=True)
class MaskedSequence:
    ids: np.ndarray
    target_positions: np.ndarray
    target_ids: np.ndarray
    corruption: np.ndarray  # per target: 0 -> <mask>, 1 -> random token, 2 -> kept


def mask_for_mlm(seq, vocab_size: int, mask_rate: float = 0.15, seed: int | np.random.Generator = 0,
                 mask_frac: float = 0.8, random_frac: float = 0.1) -> MaskedSequence:
    """Select ``ceil(mask_rate * n)`` non-pad positions and corrupt them 80/10/10."""
    ids = np.array(seq.ids if isinstance(seq, TokenSequence) else seq, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot mask an empty sequence")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    candidates = np.flatnonzero(ids != PAD_ID)
    k = min(math.ceil(mask_rate * candidates.size), candidates.size)
    pos = np.sort(rng.choice(candidates, size=k, replace=False)) if k else np.zeros(0, np.int64)
    targets = ids[pos].copy()
    u = rng.random(k)
    kind = np.where(u < mask_frac, 0, np.where(u < mask_frac + random_frac, 1, 2))
    out = ids.copy()
    out[pos[kind == 0]] = MASK_ID
    n_rand = int((kind == 1).sum())
    if n_rand:
        out[pos[kind == 1]] = rng.integers(len(SPECIALS), vocab_size, size=n_rand)
    return MaskedSequence(out, pos, targets, kind)
