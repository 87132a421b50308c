"""Losses, optimizers, learning-rate schedules and the three training loops."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .bpe import MASK_ID, SPECIALS, UNK_ID, BpeVocab, mask_for_mlm
from .encoders import Encoder, TransformerEncoder, pad_batch
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Raised when a loss turns NaN or infinite."""


class TrainingConfigError(ValueError):
    pass


class TokenizerMismatch(TrainingConfigError):
    pass


# ---------------------------------------------------------------- losses


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 0.5

    def __post_init__(self):
        if self.margin < 0:
            raise TrainingConfigError(f"margin must be non-negative, got {self.margin}")


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    return 1.0 - T.cosine_similarity(a, b)


def triplet_loss(f_a: Tensor, f_p: Tensor, f_n: Tensor, cfg: TripletLossConfig = TripletLossConfig()) -> Tensor:
    """Summed hinge ``max(0, d(a, p) - d(a, n) + margin)`` under cosine distance."""
    if not (f_a.shape == f_p.shape == f_n.shape):
        raise T.ShapeError(f"triplet batches disagree: {f_a.shape}, {f_p.shape}, {f_n.shape}")
    return T.sum_(T.relu(cosine_distance(f_a, f_p) - cosine_distance(f_a, f_n) + cfg.margin))


@dataclass(frozen=True)
class LanguageModelScore:
    total_log_likelihood: float
    n_tokens: int

    @property
    def perplexity(self) -> float:
        return math.exp(-self.total_log_likelihood / self.n_tokens)


def perplexity_from_logprobs(logprobs: Sequence[float]) -> LanguageModelScore:
    if len(logprobs) == 0:
        raise TrainingConfigError("perplexity of an empty stream is undefined")
    return LanguageModelScore(float(np.sum(logprobs, dtype=np.float64)), len(logprobs))


def pseudo_perplexity(model: TransformerEncoder, seqs: Sequence[Sequence[int]], batch_size: int = 64) -> LanguageModelScore:
    """Mask each position in turn and score the original token under the MLM head."""
    items = [(i, j) for i, s in enumerate(seqs) for j in range(min(len(s), model.max_len))]
    if not items:
        raise TrainingConfigError("perplexity of an empty stream is undefined")
    lps = np.empty(len(items), dtype=np.float64)
    with T.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start : start + batch_size]
            ids, mask = pad_batch([seqs[i] for i, _ in chunk], model.max_len)
            L = ids.shape[1]
            rows = np.arange(len(chunk))
            cols = np.array([j for _, j in chunk])
            targets = ids[rows, cols].copy()
            ids[rows, cols] = MASK_ID
            logits = mlm_logits_at(model, ids, mask, rows * L + cols).data.astype(np.float64)
            logz = np.log(np.exp(logits - logits.max(1, keepdims=True)).sum(1)) + logits.max(1)
            lps[start : start + len(chunk)] = logits[rows, targets] - logz
    return perplexity_from_logprobs(lps)


perplexity = pseudo_perplexity


def mlm_logits_at(model: TransformerEncoder, ids: np.ndarray, mask: np.ndarray, flat_positions) -> Tensor:
    out = model.forward(ids, mask)
    return model.mlm_logits(out.hidden, flat_positions)


# ---------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def _adam_update(params, grads, state: OptimizerState, lr: float, decoupled: bool) -> None:
    if len(params) != len(state.m):
        raise TrainingConfigError("optimizer state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if decoupled and state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState,
              lr: float | None = None) -> None:
    _adam_update(params, grads, state, state.lr if lr is None else lr, decoupled=False)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState,
               lr: float | None = None) -> None:
    _adam_update(params, grads, state, state.lr if lr is None else lr, decoupled=True)


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled: bool = False):
        self.params = list(params)
        self.decoupled = decoupled
        self.state = OptimizerState.for_params(self.params, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                               weight_decay=weight_decay)

    def step(self, lr: float | None = None) -> None:
        step = adamw_step if self.decoupled else adam_step
        step(self.params, [p.grad for p in self.params], self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def Adam(params, lr=1e-3, **kw) -> Optimizer:
    return Optimizer(params, lr, decoupled=False, **kw)


def AdamW(params, lr=5e-5, weight_decay=0.01, **kw) -> Optimizer:
    return Optimizer(params, lr, weight_decay=weight_decay, decoupled=True, **kw)


@dataclass(frozen=True)
class StlrSchedule:
    """Linear ramp from ``lr_max / ratio`` to ``lr_max`` at the cut, then linear decay back."""

    total_steps: int
    lr_max: float
    cut_fraction: float = 0.1
    ratio: float = 32.0

    def __post_init__(self):
        if not 0.0 < self.cut_fraction < 1.0:
            raise TrainingConfigError(f"cut_fraction must lie in (0, 1), got {self.cut_fraction}")
        if self.total_steps < 2:
            raise TrainingConfigError(f"STLR needs at least 2 steps, got {self.total_steps}")
        if self.ratio < 1:
            raise TrainingConfigError(f"ratio must be >= 1, got {self.ratio}")

    @property
    def cut(self) -> int:
        return min(max(1, int(math.floor(self.total_steps * self.cut_fraction))), self.total_steps - 1)

    def __call__(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise TrainingConfigError(f"step {step} outside [0, {self.total_steps}]")
        lo, cut = self.lr_max / self.ratio, self.cut
        if step <= cut:
            return lo + (self.lr_max - lo) * step / cut
        return self.lr_max - (self.lr_max - lo) * (step - cut) / (self.total_steps - cut)


def stlr(step: int, total_steps: int, lr_max: float, cut_fraction: float = 0.1, ratio: float = 32.0) -> float:
    return StlrSchedule(total_steps, lr_max, cut_fraction, ratio)(step)


# ---------------------------------------------------------------- run logging


class RunLog:
    """JSON Lines log with one record per optimizer step."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._t0 = time.perf_counter()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def write(self, step: int, lr: float, loss: float, **extra) -> None:
        rec = {"step": step, "lr": lr, "loss": loss, "wall_ms": round((time.perf_counter() - self._t0) * 1000, 1), **extra}
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------- triplet training


class TokenCache:
    """Memoised text -> id tuple under one vocabulary and length cap."""

    def __init__(self, vocab: BpeVocab, max_len: int):
        self.vocab, self.max_len = vocab, max_len
        self._cache: dict[str, tuple[int, ...]] = {}

    def __call__(self, text: str) -> tuple[int, ...]:
        ids = self._cache.get(text)
        if ids is None:
            ids = self.vocab.encode(text, self.max_len).ids or (UNK_ID,)
            self._cache[text] = ids
        return ids


TripletTexts = tuple[str, str, str]
TripletSource = Callable[[int], Sequence[TripletTexts]]


@dataclass(frozen=True)
class GruTrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    margin: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 1
    batch_size: int = 8
    lr_max: float = 5e-5
    cut_fraction: float = 0.1
    ratio: float = 32.0
    weight_decay: float = 0.01
    margin: float = 0.5
    seed: int = 0
    discriminative_lr: float | None = None

    def __post_init__(self):
        if self.discriminative_lr is not None:
            raise NotImplementedError("per-layer discriminative learning rates are not implemented")


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0
    lr_trace: list[float] = field(default_factory=list)


def triplet_batch_loss(model: Encoder, tokens: TokenCache, batch: Sequence[TripletTexts], margin: float) -> Tensor:
    n = len(batch)
    seqs = [tokens(t[k]) for k in range(3) for t in batch]
    emb = model.encode(seqs)
    return triplet_loss(emb[0:n], emb[n : 2 * n], emb[2 * n : 3 * n], TripletLossConfig(margin))


def mean_triplet_loss(model: Encoder, tokens: TokenCache, triplets: Sequence[TripletTexts], margin: float = 0.5,
                      batch_size: int = 64) -> float:
    total = 0.0
    with T.no_grad():
        for s in range(0, len(triplets), batch_size):
            total += triplet_batch_loss(model, tokens, triplets[s : s + batch_size], margin).item()
    return total / max(len(triplets), 1)


def _check_params(params, what: str, epoch: int, step: int) -> None:
    # a finite loss can hide overflowed weights once activations saturate
    for name, t in params.items() if isinstance(params, dict) else enumerate(params):
        if not np.isfinite(t.data).all():
            raise NumericalError(f"non-finite parameter {name} after {what} step {step} (epoch {epoch})")


def _fit_triplets(model: Encoder, tokens: TokenCache, source: TripletSource, epochs: int, batch_size: int,
                  margin: float, seed: int, opt: Optimizer, lr_at: Callable[[int], float], run_log: RunLog | None,
                  total_steps: int | None = None) -> TrainResult:
    result = TrainResult()
    step = 0
    for epoch in range(epochs):
        triplets = list(source(epoch))
        if not triplets:
            raise TrainingConfigError("triplet set is empty")
        order = np.random.default_rng([seed, epoch, 0x7A1]).permutation(len(triplets))
        epoch_sum = 0.0
        for s in range(0, len(order), batch_size):
            if total_steps is not None and step >= total_steps:
                break
            batch = [triplets[i] for i in order[s : s + batch_size]]
            T.reset_tape()
            loss = triplet_batch_loss(model, tokens, batch, margin)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite triplet loss {value} at epoch {epoch}, step {step}")
            lr = lr_at(step)
            opt.zero_grad()
            T.backward(loss)
            opt.step(lr)
            _check_params(model.named_parameters(), "triplet", epoch, step)
            result.lr_trace.append(lr)
            if run_log is not None:
                run_log.write(step, lr, value / len(batch), epoch=epoch)
            epoch_sum += value
            step += 1
        result.epoch_losses.append(epoch_sum / len(triplets))
        log.info("epoch %d mean triplet loss %.4f", epoch, result.epoch_losses[-1])
    result.steps = step
    return result


def train_gru(model: Encoder, tokens: TokenCache, source: TripletSource, cfg: GruTrainConfig = GruTrainConfig(),
              run_log: RunLog | None = None) -> TrainResult:
    """Adam on summed triplet loss; ``source(epoch)`` supplies that epoch's triplets."""
    opt = Adam(model.parameters(), lr=cfg.lr)
    return _fit_triplets(model, tokens, source, cfg.epochs, cfg.batch_size, cfg.margin, cfg.seed, opt,
                         lambda step: cfg.lr, run_log)


def finetune(model: TransformerEncoder, tokens: TokenCache, source: TripletSource,
             cfg: FinetuneConfig = FinetuneConfig(), run_log: RunLog | None = None,
             expected_arch_hash: str | None = None) -> TrainResult:
    """Full fine-tuning with AdamW under a slanted triangular schedule."""
    if model.tokenizer_hash is not None and model.tokenizer_hash != tokens.vocab.hash:
        raise TokenizerMismatch("checkpoint tokenizer hash differs from the tokenizer used for triplets")
    if expected_arch_hash is not None and expected_arch_hash != model.arch_hash():
        raise TrainingConfigError("checkpoint architecture does not match the configured architecture")
    n_per_epoch = math.ceil(len(source(0)) / cfg.batch_size)
    total = max(cfg.epochs * n_per_epoch, 2)
    sched = StlrSchedule(total, cfg.lr_max, cfg.cut_fraction, cfg.ratio)
    opt = AdamW(model.parameters(), lr=cfg.lr_max, weight_decay=cfg.weight_decay)
    return _fit_triplets(model, tokens, source, cfg.epochs, cfg.batch_size, cfg.margin, cfg.seed, opt, sched,
                         run_log, total_steps=total)


# ---------------------------------------------------------------- MLM pre-training


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 2
    batch_size: int = 8
    lr_max: float = 5e-5
    cut_fraction: float = 0.1
    ratio: float = 32.0
    weight_decay: float = 0.01
    mask_rate: float = 0.15
    n_evals: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.mask_rate <= 0.0:
            raise TrainingConfigError("mask_rate must be positive: with no masked tokens there is no objective")


@dataclass
class PretrainResult:
    ppl_curve: list[tuple[int, float]] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    steps: int = 0


def chunk_corpus(seqs: Sequence[Sequence[int]], max_len: int) -> list[tuple[int, ...]]:
    """Split sequences longer than ``max_len`` into consecutive windows."""
    out = []
    for s in seqs:
        for i in range(0, len(s), max_len):
            piece = tuple(s[i : i + max_len])
            if piece:
                out.append(piece)
    return out


def pretrain_mlm(model: TransformerEncoder, corpus: Sequence[Sequence[int]], eval_seqs: Sequence[Sequence[int]],
                 cfg: PretrainConfig = PretrainConfig(), run_log: RunLog | None = None) -> PretrainResult:
    """Masked-token cross-entropy with AdamW + STLR; pseudo-perplexity on ``eval_seqs``.

    Evaluation runs at step 0 and at ``n_evals`` evenly spaced later points.
    """
    seqs = chunk_corpus(corpus, model.max_len)
    if not seqs:
        raise TrainingConfigError("pre-training corpus is empty")
    V = model.config.vocab_size
    per_epoch = math.ceil(len(seqs) / cfg.batch_size)
    total = max(cfg.epochs * per_epoch, 2)
    eval_at = {int(round(total * k / cfg.n_evals)) for k in range(1, cfg.n_evals + 1)} if cfg.n_evals else set()
    sched = StlrSchedule(total, cfg.lr_max, cfg.cut_fraction, cfg.ratio)
    opt = AdamW(model.parameters(), lr=cfg.lr_max, weight_decay=cfg.weight_decay)
    result = PretrainResult()
    if eval_seqs and cfg.n_evals:
        result.ppl_curve.append((0, pseudo_perplexity(model, eval_seqs).perplexity))
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch, 0x3A5])
        order = rng.permutation(len(seqs))
        for s in range(0, len(order), cfg.batch_size):
            batch = [seqs[i] for i in order[s : s + cfg.batch_size]]
            ids, mask = pad_batch(batch, model.max_len)
            L = ids.shape[1]
            flat, targets = [], []
            for r, seq in enumerate(batch):
                ms = mask_for_mlm(seq, V, cfg.mask_rate, rng)
                ids[r, : len(seq)] = ms.ids
                flat.extend(r * L + ms.target_positions)
                targets.extend(ms.target_ids)
            if not targets:
                raise TrainingConfigError("batch produced no masked targets")
            T.reset_tape()
            loss = T.cross_entropy(mlm_logits_at(model, ids, mask, np.array(flat)), np.array(targets))
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite MLM loss {value} at epoch {epoch}, step {step}")
            lr = sched(step)
            opt.zero_grad()
            T.backward(loss)
            opt.step(lr)
            _check_params(model.named_parameters(), "MLM", epoch, step)
            result.losses.append(value)
            if run_log is not None:
                run_log.write(step, lr, value, epoch=epoch)
            step += 1
            if step in eval_at and eval_seqs:
                ppl = pseudo_perplexity(model, eval_seqs).perplexity
                result.ppl_curve.append((step, ppl))
                log.info("step %d pseudo-perplexity %.2f", step, ppl)
    result.steps = step
    return result


# ---------------------------------------------------------------- fill-mask


def encode_with_masks(vocab: BpeVocab, text: str) -> list[int]:
    """Encode ``text`` where the literal ``<mask>`` marks masked tokens.

    Whitespace right before a mask is dropped: learned tokens carry their
    leading space, so the prediction fills it.
    """
    marker = SPECIALS[MASK_ID]
    pieces = text.split(marker)
    ids: list[int] = []
    for k, piece in enumerate(pieces):
        if k < len(pieces) - 1:
            piece = piece.rstrip()
        ids.extend(vocab.encode(piece, prefix_space=None if k == 0 else False).ids)
        if k < len(pieces) - 1:
            ids.append(MASK_ID)
    return ids


def fill_mask(model: TransformerEncoder, vocab: BpeVocab, text: str, top: int = 5) -> list[list[tuple[str, float]]]:
    """Top predictions (token, probability) for every ``<mask>`` in ``text``."""
    ids = encode_with_masks(vocab, text)
    if MASK_ID not in ids:
        raise TrainingConfigError("text contains no <mask> token")
    return [[(vocab.tokens[i], p) for i, p in row] for row in fill_mask_ids(model, ids, top)]


def fill_mask_ids(model: TransformerEncoder, ids: Sequence[int], top: int = 5) -> list[list[tuple[int, float]]]:
    ids = list(ids)[: model.max_len]
    positions = [i for i, t in enumerate(ids) if t == MASK_ID]
    arr, mask = pad_batch([ids], model.max_len)
    with T.no_grad():
        logits = mlm_logits_at(model, arr, mask, np.array(positions)).data.astype(np.float64)
    logits[:, : len(SPECIALS)] = -np.inf
    probs = np.exp(logits - logits.max(1, keepdims=True))
    probs /= probs.sum(1, keepdims=True)
    out = []
    for row in probs:
        best = np.lexsort((np.arange(row.size), -row))[:top]
        out.append([(int(i), float(row[i])) for i in best])
    return out


def fill_mask_accuracy(model: TransformerEncoder, vocab: BpeVocab, texts: Sequence[str], terms: Sequence[str],
                       n: int = 50, top: int = 5, seed: int = 0) -> dict:
    """Mask one attribute-word token per text and score top-``top`` recovery.

    A text qualifies when some token, stripped of whitespace, is one of
    ``terms``; one qualifying position is masked per text, chosen by ``seed``.
    The first ``n`` qualifying texts are scored.
    """
    term_set = set(terms)
    rng = np.random.default_rng([seed, 0xF11])
    hits, items = 0, []
    for text in texts:
        ids = list(vocab.encode(text, model.max_len).ids)
        cand = [i for i, t in enumerate(ids) if t >= len(SPECIALS) and vocab.tokens[t].strip() in term_set]
        if not cand:
            continue
        pos = cand[int(rng.integers(len(cand)))]
        target = ids[pos]
        ids[pos] = MASK_ID
        preds = [i for i, _ in fill_mask_ids(model, ids, top)[0]]
        hit = target in preds
        hits += hit
        items.append({"text": text, "target": vocab.tokens[target], "top": [vocab.tokens[i] for i in preds], "hit": hit})
        if len(items) == n:
            break
    if not items:
        raise TrainingConfigError("no text contains a maskable attribute token")
    chance = top / len(vocab)
    acc = hits / len(items)
    return {"n": len(items), "top": top, "accuracy": acc, "chance_rate": chance, "ratio_to_chance": acc / chance,
            "items": items}
