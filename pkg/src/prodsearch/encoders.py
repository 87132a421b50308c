"""BiGRU and transformer text encoders built on :mod:`prodsearch.tensor`.

GRU update convention: the update gate weights the *previous* state,
``H_t = Z_t * H_{t-1} + (1 - Z_t) * candidate``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .bpe import PAD_ID
from .container import load_arrays, save_arrays
from .tensor import Tensor


class EncoderError(ValueError):
    pass


# ---------------------------------------------------------------- GRU cell

GATE_NAMES = ("W_xr", "W_xz", "W_xh", "W_hr", "W_hz", "W_hh", "b_r", "b_z", "b_h")


@dataclass
class GruCellParams:
    W_xr: Tensor
    W_xz: Tensor
    W_xh: Tensor
    W_hr: Tensor
    W_hz: Tensor
    W_hh: Tensor
    b_r: Tensor
    b_z: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, d: int, h: int, rng: np.random.Generator, scale: float = 0.1) -> "GruCellParams":
        def u(*shape):
            return Tensor(rng.uniform(-scale, scale, size=shape).astype(np.float32), requires_grad=True)

        return cls(u(d, h), u(d, h), u(d, h), u(h, h), u(h, h), u(h, h), u(1, h), u(1, h), u(1, h))

    @property
    def input_dim(self) -> int:
        return self.W_xr.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W_hr.shape[0]

    def tensors(self) -> list[Tensor]:
        return [getattr(self, n) for n in GATE_NAMES]

    def check(self) -> None:
        d, h = self.input_dim, self.hidden_dim
        want = {"W_xr": (d, h), "W_xz": (d, h), "W_xh": (d, h), "W_hr": (h, h), "W_hz": (h, h),
                "W_hh": (h, h), "b_r": (1, h), "b_z": (1, h), "b_h": (1, h)}
        for name, shape in want.items():
            if getattr(self, name).shape != shape:
                raise T.ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")


def gru_cell_step(p: GruCellParams, X_t: Tensor, H_prev: Tensor) -> Tensor:
    """One GRU step on a minibatch ``X_t`` (n, d) with previous state (n, h)."""
    if X_t.shape[-1] != p.input_dim or H_prev.shape[-1] != p.hidden_dim or X_t.shape[0] != H_prev.shape[0]:
        raise T.ShapeError(f"gru_cell_step: X {X_t.shape}, H {H_prev.shape} vs d={p.input_dim}, h={p.hidden_dim}")
    R = T.sigmoid(X_t @ p.W_xr + H_prev @ p.W_hr + p.b_r)
    Z = T.sigmoid(X_t @ p.W_xz + H_prev @ p.W_hz + p.b_z)
    H_tilde = T.tanh(X_t @ p.W_xh + (R * H_prev) @ p.W_hh + p.b_h)
    return Z * H_prev + (1.0 - Z) * H_tilde


def gru_scan(p: GruCellParams, X: Tensor, mask: np.ndarray, reverse: bool = False) -> Tensor:
    """Run a GRU over ``X`` (n, L, d) as a single tape record.

    ``mask`` (n, L) holds 1 for real tokens; at masked steps the state is
    carried over unchanged, so with right padding the state after the last
    real token survives to ``t = L-1`` (forward) and pads never touch the
    reverse direction. Returns states (n, L, h) in input order.
    """
    n, L, d = X.shape
    h = p.hidden_dim
    if d != p.input_dim or mask.shape != (n, L):
        raise T.ShapeError(f"gru_scan: X {X.shape}, mask {mask.shape}, input dim {p.input_dim}")
    dt = X.dtype
    x = X.data
    m = np.asarray(mask, dtype=dt)
    Whr, Whz, Whh = p.W_hr.data, p.W_hz.data, p.W_hh.data
    XR = x @ p.W_xr.data + p.b_r.data.reshape(-1)
    XZ = x @ p.W_xz.data + p.b_z.data.reshape(-1)
    XH = x @ p.W_xh.data + p.b_h.data.reshape(-1)
    steps = range(L - 1, -1, -1) if reverse else range(L)
    out = np.empty((n, L, h), dtype=dt)
    Hprev = np.empty((n, L, h), dtype=dt)
    Rs = np.empty((n, L, h), dtype=dt)
    Zs = np.empty((n, L, h), dtype=dt)
    Cs = np.empty((n, L, h), dtype=dt)
    H = np.zeros((n, h), dtype=dt)
    for t in steps:
        Hprev[:, t] = H
        r = T._sigmoid_np(XR[:, t] + H @ Whr)
        z = T._sigmoid_np(XZ[:, t] + H @ Whz)
        c = np.tanh(XH[:, t] + (r * H) @ Whh)
        hn = z * H + (1.0 - z) * c
        mt = m[:, t : t + 1]
        H = H + mt * (hn - H)
        out[:, t] = H
        Rs[:, t], Zs[:, t], Cs[:, t] = r, z, c

    def bw(g):
        dAr = np.zeros_like(Rs)
        dAz = np.zeros_like(Zs)
        dAh = np.zeros_like(Cs)
        dH = np.zeros((n, h), dtype=dt)
        for t in reversed(list(steps)):
            dH = dH + g[:, t]
            mt = m[:, t : t + 1]
            Hp, r, z, c = Hprev[:, t], Rs[:, t], Zs[:, t], Cs[:, t]
            dhn = mt * dH
            dprev = (1.0 - mt) * dH + dhn * z
            dz = dhn * (Hp - c)
            dah = dhn * (1.0 - z) * (1.0 - c * c)
            drH = dah @ Whh.T
            dr = drH * Hp
            dprev += drH * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            dprev += daz @ Whz.T + dar @ Whr.T
            dAr[:, t], dAz[:, t], dAh[:, t] = dar, daz, dah
            dH = dprev
        x2 = x.reshape(-1, d)
        hp2 = Hprev.reshape(-1, h)
        rh2 = (Rs * Hprev).reshape(-1, h)
        ar2, az2, ah2 = dAr.reshape(-1, h), dAz.reshape(-1, h), dAh.reshape(-1, h)
        dX = ar2 @ p.W_xr.data.T + az2 @ p.W_xz.data.T + ah2 @ p.W_xh.data.T
        return (dX.reshape(n, L, d),
                x2.T @ ar2, x2.T @ az2, x2.T @ ah2,
                hp2.T @ ar2, hp2.T @ az2, rh2.T @ ah2,
                ar2.sum(0, keepdims=True), az2.sum(0, keepdims=True), ah2.sum(0, keepdims=True))

    return T._op("gru_scan", out, (X, *p.tensors()), bw)


# ---------------------------------------------------------------- batching


def pad_batch(seqs: Sequence[Sequence[int]], max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists to a (B, L) array plus a 0/1 mask; empty rows are rejected."""
    if not seqs:
        raise EncoderError("empty batch")
    lens = [min(len(s), max_len) if max_len else len(s) for s in seqs]
    if min(lens) == 0:
        raise EncoderError("cannot encode an empty token sequence")
    L = max(lens)
    ids = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=np.float32)
    for i, (s, n) in enumerate(zip(seqs, lens)):
        ids[i, :n] = s[:n]
        mask[i, :n] = 1.0
    return ids, mask


class Encoder:
    """Shared surface: named parameters, batch encoding, checkpointing."""

    arch: str = ""
    config: object
    tokenizer_hash: str | None = None

    def named_parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def encode(self, seqs: Sequence[Sequence[int]]) -> Tensor:
        raise NotImplementedError

    @property
    def out_dim(self) -> int:
        return self.config.out_dim

    @property
    def max_len(self) -> int:
        return self.config.max_len

    def arch_hash(self) -> str:
        blob = json.dumps({"arch": self.arch, "config": asdict(self.config)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def meta(self) -> dict:
        return {"arch": self.arch, "config": asdict(self.config), "arch_hash": self.arch_hash(),
                "tokenizer_hash": self.tokenizer_hash, "init": self.init_scheme}

    def save(self, path: str | Path) -> None:
        path = Path(path)
        arrays = {k: v.data for k, v in self.named_parameters().items()}
        save_arrays(path, arrays, self.meta())
        path.with_suffix(".json").write_text(json.dumps(self.meta(), indent=2, sort_keys=True), encoding="utf-8")

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(arrays) != set(params):
            raise EncoderError(f"checkpoint tensors differ: {sorted(set(arrays) ^ set(params))}")
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise EncoderError(f"{k}: checkpoint shape {arrays[k].shape} vs model {t.shape}")
            t.data = arrays[k].astype(t.dtype)

    def bind(self, tensors: dict[str, Tensor]) -> None:
        """Swap in replacement parameter tensors by name (used by gradient checks)."""
        raise NotImplementedError

    def copy(self) -> "Encoder":
        clone = build_encoder(self.arch, self.config, seed=0)
        clone.load_state({k: v.data.copy() for k, v in self.named_parameters().items()})
        clone.tokenizer_hash = self.tokenizer_hash
        return clone


# ---------------------------------------------------------------- BiGRU


@dataclass(frozen=True)
class BiGruConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 64
    out_dim: int = 64
    layers: int = 1
    max_len: int = 64
    init_scale: float = 0.1

    def __post_init__(self):
        if self.layers not in (1, 2):
            raise EncoderError(f"BiGRU supports 1 or 2 layers, got {self.layers}")


def full_scale_bigru_config(vocab_size: int = 30000, layers: int = 1) -> BiGruConfig:
    return BiGruConfig(vocab_size, embed_dim=100, hidden_dim=100, out_dim=100, layers=layers, max_len=512)


class BiGruEncoder(Encoder):
    arch = "bigru"
    init_scheme = "uniform(-init_scale, init_scale)"

    def __init__(self, config: BiGruConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng([seed, 0x6E0])
        s = config.init_scale
        self.embedding = Tensor(rng.uniform(-s, s, (config.vocab_size, config.embed_dim)).astype(np.float32),
                                requires_grad=True)
        self.cells: list[tuple[GruCellParams, GruCellParams]] = []
        d = config.embed_dim
        for _ in range(config.layers):
            self.cells.append((GruCellParams.init(d, config.hidden_dim, rng, s),
                               GruCellParams.init(d, config.hidden_dim, rng, s)))
            d = 2 * config.hidden_dim
        self.dense_w = Tensor(rng.uniform(-s, s, (2 * config.hidden_dim, config.out_dim)).astype(np.float32),
                              requires_grad=True)
        self.dense_b = Tensor(np.zeros(config.out_dim, dtype=np.float32), requires_grad=True)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        for i, (fwd, bwd) in enumerate(self.cells):
            for tag, cell in (("fwd", fwd), ("bwd", bwd)):
                for n in GATE_NAMES:
                    out[f"layer{i}.{tag}.{n}"] = getattr(cell, n)
        out["dense.W"] = self.dense_w
        out["dense.b"] = self.dense_b
        return out

    def bind(self, tensors: dict[str, Tensor]) -> None:
        for key, t in tensors.items():
            if key == "embedding":
                self.embedding = t
            elif key == "dense.W":
                self.dense_w = t
            elif key == "dense.b":
                self.dense_b = t
            else:
                layer, tag, name = key.split(".")
                setattr(self.cells[int(layer[5:])][0 if tag == "fwd" else 1], name, t)

    def final_states(self, ids: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        x = T.embedding_lookup(self.embedding, ids)
        L = ids.shape[1]
        for fwd, bwd in self.cells:
            hf = gru_scan(fwd, x, mask)
            hb = gru_scan(bwd, x, mask, reverse=True)
            x = T.concat([hf, hb], axis=-1)
        return hf[:, L - 1], hb[:, 0]

    def encode_padded(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        hf, hb = self.final_states(ids, mask)
        return T.concat([hf, hb], axis=-1) @ self.dense_w + self.dense_b

    def encode(self, seqs: Sequence[Sequence[int]]) -> Tensor:
        ids, mask = pad_batch(seqs, self.config.max_len)
        return self.encode_padded(ids, mask)


def bigru_encode(model: BiGruEncoder, tokens) -> np.ndarray:
    ids = tokens.ids if hasattr(tokens, "ids") else tokens
    if len(ids) == 0:
        raise EncoderError("cannot encode an empty token sequence")
    with T.no_grad():
        return model.encode([list(ids)]).data[0]


# ---------------------------------------------------------------- transformer


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 64
    out_dim: int = 64
    init_std: float = 0.02
    pooling: str = "mean"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise EncoderError(f"n_heads ({self.n_heads}) must divide d_model ({self.d_model})")
        if self.pooling not in ("mean", "first"):
            raise EncoderError(f"pooling must be 'mean' or 'first', got {self.pooling!r}")


def full_scale_transformer_config(vocab_size: int = 30000) -> TransformerConfig:
    return TransformerConfig(vocab_size, d_model=768, n_layers=6, n_heads=12, d_ff=3072, max_len=512, out_dim=100)


_LAYER_PARAMS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo", "ln1_g", "ln1_b", "W1", "b1", "W2", "b2",
                 "ln2_g", "ln2_b")


@dataclass
class EncodeOutput:
    hidden: Tensor
    mask: np.ndarray
    truncated: bool
    attention: list[np.ndarray]


class TransformerEncoder(Encoder):
    """Post-norm encoder stack with learned positions, an MLM head and a pooled head."""

    arch = "transformer"
    init_scheme = "normal(0, init_std); biases 0; layer-norm gain 1"

    def __init__(self, config: TransformerConfig, seed: int = 0):
        self.config = config
        c = config
        rng = np.random.default_rng([seed, 0x7F0])

        def normal(*shape):
            return Tensor((rng.standard_normal(shape) * c.init_std).astype(np.float32), requires_grad=True)

        def const(value, *shape):
            return Tensor(np.full(shape, value, dtype=np.float32), requires_grad=True)

        self.params: dict[str, Tensor] = {
            "tok_emb": normal(c.vocab_size, c.d_model),
            "pos_emb": normal(c.max_len, c.d_model),
            "emb_ln_g": const(1.0, c.d_model),
            "emb_ln_b": const(0.0, c.d_model),
        }
        for i in range(c.n_layers):
            shapes = {"Wq": (c.d_model, c.d_model), "Wk": (c.d_model, c.d_model), "Wv": (c.d_model, c.d_model),
                      "Wo": (c.d_model, c.d_model), "W1": (c.d_model, c.d_ff), "W2": (c.d_ff, c.d_model)}
            for name in _LAYER_PARAMS:
                key = f"layer{i}.{name}"
                if name in shapes:
                    self.params[key] = normal(*shapes[name])
                elif name.endswith("_g"):
                    self.params[key] = const(1.0, c.d_model)
                elif name == "b1":
                    self.params[key] = const(0.0, c.d_ff)
                else:
                    self.params[key] = const(0.0, c.d_model)
        self.params["mlm.W"] = normal(c.d_model, c.vocab_size)
        self.params["mlm.b"] = const(0.0, c.vocab_size)
        self.params["pool.W"] = normal(c.d_model, c.out_dim)
        self.params["pool.b"] = const(0.0, c.out_dim)

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def bind(self, tensors: dict[str, Tensor]) -> None:
        self.params.update(tensors)

    def _attention(self, x: Tensor, i: int, bias: np.ndarray, keep: list | None) -> Tensor:
        c, P = self.config, self.params
        B, L, d = x.shape
        H, dh = c.n_heads, c.d_model // c.n_heads

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q = heads(x @ P[f"layer{i}.Wq"] + P[f"layer{i}.bq"])
        k = heads(x @ P[f"layer{i}.Wk"] + P[f"layer{i}.bk"])
        v = heads(x @ P[f"layer{i}.Wv"] + P[f"layer{i}.bv"])
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + bias
        probs = T.softmax(scores, axis=-1)
        if keep is not None:
            keep.append(probs.data)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
        return ctx @ P[f"layer{i}.Wo"] + P[f"layer{i}.bo"]

    def forward(self, ids: np.ndarray, mask: np.ndarray, keep_attention: bool = False) -> EncodeOutput:
        c, P = self.config, self.params
        truncated = ids.shape[1] > c.max_len
        if truncated:
            ids, mask = ids[:, : c.max_len], mask[:, : c.max_len]
        B, L = ids.shape
        x = T.embedding_lookup(P["tok_emb"], ids) + T.embedding_lookup(P["pos_emb"], np.broadcast_to(np.arange(L), (B, L)))
        x = T.layer_norm(x, P["emb_ln_g"], P["emb_ln_b"], c.ln_eps)
        bias = np.where(mask[:, None, None, :] > 0, 0.0, -1e9).astype(np.float32)
        bias = np.broadcast_to(bias, (B, c.n_heads, L, L))
        keep: list | None = [] if keep_attention else None
        for i in range(c.n_layers):
            x = T.layer_norm(x + self._attention(x, i, bias, keep), P[f"layer{i}.ln1_g"], P[f"layer{i}.ln1_b"], c.ln_eps)
            ff = T.gelu(x @ P[f"layer{i}.W1"] + P[f"layer{i}.b1"]) @ P[f"layer{i}.W2"] + P[f"layer{i}.b2"]
            x = T.layer_norm(x + ff, P[f"layer{i}.ln2_g"], P[f"layer{i}.ln2_b"], c.ln_eps)
        return EncodeOutput(x, mask, truncated, keep or [])

    def mlm_logits(self, hidden: Tensor, positions: np.ndarray) -> Tensor:
        """Vocabulary logits at flat ``positions`` (rows of the (B*L) token grid)."""
        B, L, d = hidden.shape
        rows = hidden.reshape(B * L, d)[np.asarray(positions, dtype=np.int64)]
        return rows @ self.params["mlm.W"] + self.params["mlm.b"]

    def pool(self, hidden: Tensor, mask: np.ndarray) -> Tensor:
        if self.config.pooling == "first":
            state = hidden[:, 0]
        else:
            state = T.mean_pool(hidden, mask)
        return state @ self.params["pool.W"] + self.params["pool.b"]

    def encode_padded(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        out = self.forward(ids, mask)
        return self.pool(out.hidden, out.mask)

    def encode(self, seqs: Sequence[Sequence[int]]) -> Tensor:
        ids, mask = pad_batch(seqs, self.config.max_len)
        return self.encode_padded(ids, mask)


def transformer_encode(model: TransformerEncoder, tokens, attention_mask=None) -> EncodeOutput:
    ids = np.atleast_2d(np.asarray(tokens.ids if hasattr(tokens, "ids") else tokens, dtype=np.int64))
    mask = np.ones(ids.shape, np.float32) if attention_mask is None else np.atleast_2d(np.asarray(attention_mask, np.float32))
    return model.forward(ids, mask, keep_attention=True)


def mlm_forward(model: TransformerEncoder, ids: np.ndarray, mask: np.ndarray, positions: np.ndarray) -> Tensor:
    out = model.forward(ids, mask)
    return model.mlm_logits(out.hidden, positions)


def pooled_encode(model: TransformerEncoder, tokens) -> np.ndarray:
    ids = tokens.ids if hasattr(tokens, "ids") else tokens
    with T.no_grad():
        return model.encode([list(ids)]).data[0]


# ---------------------------------------------------------------- checkpoints


def build_encoder(arch: str, config, seed: int = 0) -> Encoder:
    if arch == "bigru":
        return BiGruEncoder(config, seed)
    if arch == "transformer":
        return TransformerEncoder(config, seed)
    raise EncoderError(f"unknown architecture {arch!r}")


def load_encoder(path: str | Path) -> Encoder:
    arrays, meta = load_arrays(path)
    cls = BiGruConfig if meta["arch"] == "bigru" else TransformerConfig
    names = {f.name for f in fields(cls)}
    config = cls(**{k: v for k, v in meta["config"].items() if k in names})
    model = build_encoder(meta["arch"], config)
    model.load_state(arrays)
    model.tokenizer_hash = meta.get("tokenizer_hash")
    return model


# ---------------------------------------------------------------- inference


class Embedder:
    """Batched, memoised text embedding under ``no_grad``."""

    def __init__(self, model: Encoder, vocab, batch_size: int = 64):
        self.model, self.vocab, self.batch_size = model, vocab, batch_size
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        todo = sorted({t for t in texts if t not in self._cache})
        with T.no_grad():
            for s in range(0, len(todo), self.batch_size):
                chunk = todo[s : s + self.batch_size]
                seqs = [self.vocab.encode(t, self.model.max_len).ids or (1,) for t in chunk]
                vecs = self.model.encode(seqs).data
                for t, v in zip(chunk, vecs):
                    self._cache[t] = v
        return np.stack([self._cache[t] for t in texts])
