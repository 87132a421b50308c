"""Command-line pipeline: one subcommand per stage plus ``pipeline``.

All stages share a work directory (``--out``). Each stage writes a manifest
under ``manifests/`` recording input hashes, parameters, seed and output
hashes; rerunning a stage whose inputs and parameters are unchanged is a
no-op. Exit codes: 0 success, 1 usage, 2 data contract, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import catalog as cat_mod
from .ann import AnnConfig, EmbeddingIndex
from .bpe import BpeVocab, train_bpe
from .config import PRESETS, ConfigError, RunConfig, dump_config, load_config
from .container import ContainerError, file_sha256
from .encoders import (BiGruConfig, Embedder, EncoderError, TransformerConfig, TransformerEncoder, BiGruEncoder,
                       load_encoder)
from .graphs import (QueryNotFound, QueryProductGraph, ProductProductGraph, QueryClass, QueryType, build_pp_graph,
                     build_qp_graph, classify_all, load_edges, random_walks, save_edges)
from .metrics import (MetricReport, evaluate_ranking, evaluate_retrieval, load_cases, make_ranking_sets,
                      make_retrieval_cases, save_cases)
from .training import (FinetuneConfig, GruTrainConfig, NumericalError, PretrainConfig, RunLog, TokenCache,
                       TokenizerMismatch, fill_mask, fill_mask_accuracy, finetune, pretrain_mlm, train_gru)
from .triplets import SamplerConfig, augment, load_triplet_texts, sample_pp_triplets, sample_qp_triplets, \
    save_triplets, split_queries

log = logging.getLogger("prodsearch")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataContractError(RuntimeError):
    pass


# ---------------------------------------------------------------- workspace and manifests


class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, rel: str) -> Path:
        return self.root / rel

    @property
    def manifests(self) -> Path:
        return self.root / "manifests"

    def rel(self, p: Path) -> str:
        try:
            return str(Path(p).resolve().relative_to(self.root.resolve()))
        except ValueError:
            return str(Path(p).resolve())

    # paths shared across stages
    catalog = property(lambda s: s.path("data/catalog.jsonl"))
    queries = property(lambda s: s.path("data/queries.jsonl"))
    clicklog = property(lambda s: s.path("data/clicklog.jsonl"))
    qp_edges = property(lambda s: s.path("graphs/qp.tsv"))
    pp_edges = property(lambda s: s.path("graphs/pp.tsv"))
    classes = property(lambda s: s.path("graphs/classes.json"))
    walks = property(lambda s: s.path("graphs/walks.json"))
    split = property(lambda s: s.path("triplets/split.json"))
    cases = property(lambda s: s.path("cases/cases.json"))
    vocab = property(lambda s: s.path("tokenizer/vocab.json"))
    pretrained = property(lambda s: s.path("models/transformer-pretrained.psa"))

    def triplets(self, source: str, epoch: int) -> Path:
        return self.path(f"triplets/{source}.e{epoch}.tsv")

    def model(self, name: str) -> Path:
        return self.path(f"models/{name}.psa")

    def index(self, name: str) -> Path:
        return self.path(f"index/{name}.idx")

    def report(self, name: str) -> Path:
        return self.path(f"reports/{name}.json")

    def run_log(self, name: str) -> Path:
        return self.path(f"logs/{name}.jsonl")


def _recorded_hash(ws: Workspace, path: Path) -> str | None:
    """Hash an upstream manifest recorded for ``path``, if any stage produced it."""
    rel = ws.rel(path)
    if not ws.manifests.is_dir():
        return None
    for m in sorted(ws.manifests.glob("*.json")):
        outputs = json.loads(m.read_text(encoding="utf-8")).get("outputs", {})
        if rel in outputs:
            return outputs[rel]
    return None


def run_stage(ws: Workspace, name: str, inputs: Sequence[Path], params: dict, outputs: Sequence[Path],
              fn: Callable[[], None], force: bool = False) -> bool:
    """Run ``fn`` unless the manifest shows identical inputs, params and outputs.

    Returns True when the stage actually ran.
    """
    in_hashes = {}
    for p in inputs:
        if not Path(p).is_file():
            raise DataContractError(f"missing upstream artifact: {p}")
        h = file_sha256(p)
        recorded = _recorded_hash(ws, Path(p))
        if recorded is not None and recorded != h:
            raise DataContractError(f"upstream artifact changed since it was produced: {p}")
        in_hashes[ws.rel(p)] = h
    mpath = ws.manifests / f"{name}.json"
    if mpath.is_file() and not force:
        m = json.loads(mpath.read_text(encoding="utf-8"))
        if (m.get("inputs") == in_hashes and m.get("params") == params
                and all(Path(o).is_file() and m["outputs"].get(ws.rel(o)) == file_sha256(o) for o in outputs)):
            log.info("%s: up to date", name)
            return False
    for o in outputs:
        Path(o).parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    fn()
    missing = [str(o) for o in outputs if not Path(o).is_file()]
    if missing:
        raise DataContractError(f"stage {name} did not produce {missing}")
    ws.manifests.mkdir(parents=True, exist_ok=True)
    manifest = {"stage": name, "inputs": in_hashes, "params": params,
                "outputs": {ws.rel(o): file_sha256(o) for o in outputs}}
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    log.info("%s: done in %.1fs", name, time.perf_counter() - t0)
    return True


def _params(cfg: RunConfig, stage: str, keys: Sequence[str]) -> dict:
    return {"seed": cfg.seed, "stage_seed": cfg.stage_seed(stage), **cfg.subset(keys)}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _read_json(path: Path):
    if not path.is_file():
        raise DataContractError(f"missing upstream artifact: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------- loaders


def _load_data(ws: Workspace):
    catalog = cat_mod.load_catalog(ws.catalog)
    queries = cat_mod.load_queries(ws.queries)
    return catalog, queries


def _load_qp(ws: Workspace) -> QueryProductGraph:
    return QueryProductGraph(load_edges(ws.qp_edges))


def _load_classes(ws: Workspace) -> dict[int, QueryClass]:
    raw = _read_json(ws.classes)
    return {int(q): QueryClass(QueryType(v["kind"]), tuple(v["atg"]) if v["atg"] else None, v["coverage"])
            for q, v in raw.items()}


def _load_vocab(path: Path) -> BpeVocab:
    if not Path(path).is_file():
        raise DataContractError(f"missing tokenizer: {path}")
    return BpeVocab.load(path)


def _load_model(path: Path, vocab: BpeVocab | None = None):
    if not Path(path).is_file():
        raise DataContractError(f"missing checkpoint: {path}")
    model = load_encoder(path)
    if vocab is not None and model.tokenizer_hash not in (None, vocab.hash):
        raise DataContractError(f"checkpoint {path} was trained with a different tokenizer")
    return model


def _default_vocab_for(ckpt: Path) -> Path:
    return Path(ckpt).resolve().parent.parent / "tokenizer" / "vocab.json"


# ---------------------------------------------------------------- stages


def stage_gen_data(cfg: RunConfig, ws: Workspace, force: bool = False) -> bool:
    def run():
        seed = cfg.stage_seed("gen-data")
        catalog = cat_mod.gen_catalog(cat_mod.DEFAULT_VOCAB, cfg.n_products, seed)
        queries, clicks = cat_mod.gen_clicklog(catalog, cfg.n_queries, cfg.n_sessions, seed=seed)
        clicks.validate(catalog, queries)
        cat_mod.save_catalog(catalog, ws.catalog)
        cat_mod.save_queries(queries, ws.queries)
        cat_mod.save_clicklog(clicks, ws.clicklog)

    sidecar = ws.catalog.with_suffix(".vocab.json")
    return run_stage(ws, "gen-data", [], _params(cfg, "gen-data", ["n_products", "n_queries", "n_sessions"]),
                     [ws.catalog, sidecar, ws.queries, ws.clicklog], run, force)


def stage_build_graphs(cfg: RunConfig, ws: Workspace, force: bool = False) -> bool:
    def run():
        catalog, queries = _load_data(ws)
        clicks = cat_mod.load_clicklog(ws.clicklog)
        qp = build_qp_graph(clicks, queries)
        pp = build_pp_graph(clicks, catalog)
        save_edges(qp.edges, ws.qp_edges)
        save_edges(pp.edges, ws.pp_edges)
        classes = classify_all(qp, catalog, broad_threshold=cfg.broad_threshold)
        _write_json(ws.classes, {str(q): {"kind": c.kind.value, "atg": list(c.assigned_atg) if c.assigned_atg else None,
                                          "coverage": c.coverage} for q, c in classes.items()})
        walks = random_walks(pp, cfg.walks_per_node, cfg.walk_length, cfg.stage_seed("build-graphs"))
        _write_json(ws.walks, {str(k): sorted(v) for k, v in walks.items()})

    return run_stage(ws, "build-graphs", [ws.catalog, ws.queries, ws.clicklog],
                     _params(cfg, "build-graphs", ["broad_threshold", "walks_per_node", "walk_length"]),
                     [ws.qp_edges, ws.pp_edges, ws.classes, ws.walks], run, force)


def _triplet_epochs(cfg: RunConfig) -> int:
    return max(cfg.gru_epochs, cfg.ft_epochs, cfg.augmented_epochs, 1)


def _sampler_config(cfg: RunConfig) -> SamplerConfig:
    return SamplerConfig(cfg.broad_same_atg_prob, cfg.narrow_same_atg_prob, cfg.pp_same_atg_prob, cfg.top_k,
                         product_text=cfg.product_text, seed=cfg.stage_seed("sample-triplets"))


def stage_sample_triplets(cfg: RunConfig, ws: Workspace, force: bool = False) -> bool:
    n_epochs = _triplet_epochs(cfg)
    outputs = [ws.split] + [ws.triplets(s, e) for s in ("qp", "augmented") for e in range(n_epochs)]

    def run():
        catalog, queries = _load_data(ws)
        qp = _load_qp(ws)
        classes = _load_classes(ws)
        walks = {int(k): set(v) for k, v in _read_json(ws.walks).items()}
        train, test = split_queries(qp.query_ids, cfg.split_ratio, cfg.stage_seed("split"))
        _write_json(ws.split, {"train": train, "test": test})
        text = {q.query_id: q.text for q in queries}
        scfg = _sampler_config(cfg)
        for e in range(n_epochs):
            qp_t = list(sample_qp_triplets(qp, classes, catalog, text, scfg, train, epoch=e))
            pp_t = list(sample_pp_triplets(walks, catalog, scfg, epoch=e))
            save_triplets(qp_t, ws.triplets("qp", e))
            save_triplets(augment(qp_t, pp_t, seed=scfg.seed + e), ws.triplets("augmented", e))

    keys = ["split_ratio", "broad_same_atg_prob", "narrow_same_atg_prob", "pp_same_atg_prob", "top_k", "product_text",
            "gru_epochs", "ft_epochs", "augmented_epochs"]
    return run_stage(ws, "sample-triplets", [ws.catalog, ws.queries, ws.qp_edges, ws.classes, ws.walks],
                     _params(cfg, "sample-triplets", keys), outputs, run, force)


def stage_make_cases(cfg: RunConfig, ws: Workspace, force: bool = False) -> bool:
    def run():
        catalog, queries = _load_data(ws)
        qp = _load_qp(ws)
        text = {q.query_id: q.text for q in queries}
        test = _read_json(ws.split)["test"]
        sets = make_ranking_sets(test, qp, catalog, text, cfg.stage_seed("make-cases"), cfg.top_k)
        save_cases(sets, make_retrieval_cases(test, qp, catalog, text), ws.cases)

    return run_stage(ws, "make-cases", [ws.catalog, ws.queries, ws.qp_edges, ws.split],
                     _params(cfg, "make-cases", ["top_k"]), [ws.cases], run, force)


def _tokenizer_corpus(ws: Workspace) -> list[str]:
    catalog, queries = _load_data(ws)
    train = set(_read_json(ws.split)["train"])
    return ([p.title for p in catalog.products] + [p.description for p in catalog.products]
            + [q.text for q in queries if q.query_id in train])


def stage_train_tokenizer(cfg: RunConfig, ws: Workspace, force: bool = False) -> bool:
    def run():
        train_bpe(_tokenizer_corpus(ws), cfg.vocab_size, cfg.stage_seed("train-tokenizer"),
                  add_prefix_space=bool(cfg.prefix_space)).save(ws.vocab)

    return run_stage(ws, "train-tokenizer", [ws.catalog, ws.queries, ws.split],
                     _params(cfg, "train-tokenizer", ["vocab_size", "prefix_space"]), [ws.vocab], run, force)


def _transformer_config(cfg: RunConfig, vocab: BpeVocab) -> TransformerConfig:
    return TransformerConfig(len(vocab), cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.max_len, cfg.d_out,
                             pooling=cfg.pooling)


_TRANSFORMER_KEYS = ["d_model", "n_layers", "n_heads", "d_ff", "d_out", "max_len", "pooling"]


def _heldout_queries(ws: Workspace, limit: int) -> list[str]:
    _, queries = _load_data(ws)
    test = set(_read_json(ws.split)["test"])
    return [q.text for q in sorted(queries, key=lambda q: q.query_id) if q.query_id in test][:limit]


def stage_pretrain(cfg: RunConfig, ws: Workspace, force: bool = False) -> bool:
    out_report = ws.report("pretrain")

    def run():
        vocab = _load_vocab(ws.vocab)
        tokens = TokenCache(vocab, cfg.max_len)
        model = TransformerEncoder(_transformer_config(cfg, vocab), seed=cfg.stage_seed("init-transformer"))
        model.tokenizer_hash = vocab.hash
        corpus = [tokens(t) for t in _tokenizer_corpus(ws)]
        heldout = [tokens(t) for t in _heldout_queries(ws, cfg.pre_eval_queries)]
        pcfg = PretrainConfig(cfg.pre_epochs, cfg.pre_batch, cfg.pre_lr, cfg.cut_fraction, cfg.stlr_ratio,
                              cfg.weight_decay, cfg.mask_rate, cfg.pre_evals, cfg.stage_seed("pretrain"))
        res = pretrain_mlm(model, corpus, heldout, pcfg, RunLog(ws.run_log("pretrain")))
        model.save(ws.pretrained)
        _write_json(out_report, {"vocab_size": len(vocab), "steps": res.steps,
                                 "ppl_curve": [[s, p] for s, p in res.ppl_curve],
                                 "final_ppl": res.ppl_curve[-1][1] if res.ppl_curve else None,
                                 "n_eval_sequences": len(heldout)})

    keys = _TRANSFORMER_KEYS + ["pre_epochs", "pre_batch", "pre_lr", "cut_fraction", "stlr_ratio", "weight_decay",
                                "mask_rate", "pre_evals", "pre_eval_queries"]
    return run_stage(ws, "pretrain", [ws.vocab, ws.catalog, ws.queries, ws.split], _params(cfg, "pretrain", keys),
                     [ws.pretrained, out_report], run, force)


def _triplet_source(ws: Workspace, source: str, n_files: int):
    cache: dict[int, list] = {}

    def get(epoch: int):
        e = epoch % n_files
        if e not in cache:
            cache.clear()
            cache[e] = [r[:3] for r in load_triplet_texts(ws.triplets(source, e))]
        return cache[e]

    return get


def stage_finetune(cfg: RunConfig, ws: Workspace, force: bool = False) -> bool:
    if cfg.encoder != "transformer":
        raise ConfigError(f"finetune needs a transformer preset, got {cfg.preset}")
    out = ws.model(cfg.preset)
    files = [ws.triplets(cfg.source, e) for e in range(_triplet_epochs(cfg))]

    def run():
        vocab = _load_vocab(ws.vocab)
        model = _load_model(ws.pretrained)
        expected = TransformerEncoder(_transformer_config(cfg, vocab)).arch_hash()
        fcfg = FinetuneConfig(cfg.train_epochs(cfg.ft_epochs), cfg.ft_batch, cfg.ft_lr, cfg.cut_fraction,
                              cfg.stlr_ratio, cfg.weight_decay, cfg.margin, cfg.stage_seed(f"finetune-{cfg.preset}"))
        finetune(model, TokenCache(vocab, cfg.max_len), _triplet_source(ws, cfg.source, len(files)), fcfg,
                 RunLog(ws.run_log(cfg.preset)), expected_arch_hash=expected)
        model.save(out)

    keys = ["ft_epochs", "augmented_epochs", "ft_batch", "ft_lr", "cut_fraction", "stlr_ratio", "weight_decay",
            "margin"]
    return run_stage(ws, f"finetune-{cfg.preset}", [ws.pretrained, ws.vocab] + files,
                     _params(cfg, f"finetune-{cfg.preset}", keys), [out], run, force)


def stage_untrained(cfg: RunConfig, ws: Workspace, force: bool = False) -> bool:
    """Freshly initialised transformer of the configured architecture (baseline)."""
    out = ws.model("transformer-untrained")

    def run():
        vocab = _load_vocab(ws.vocab)
        model = TransformerEncoder(_transformer_config(cfg, vocab), seed=cfg.stage_seed("init-transformer"))
        model.tokenizer_hash = vocab.hash
        model.save(out)

    return run_stage(ws, "init-untrained", [ws.vocab], _params(cfg, "init-transformer", _TRANSFORMER_KEYS), [out],
                     run, force)


def stage_train_gru(cfg: RunConfig, ws: Workspace, force: bool = False) -> bool:
    if cfg.encoder not in ("gru1", "gru2"):
        raise ConfigError(f"train-gru needs a gru1/gru2 preset, got {cfg.preset}")
    out = ws.model(cfg.preset)
    files = [ws.triplets(cfg.source, e) for e in range(_triplet_epochs(cfg))]

    def run():
        vocab = _load_vocab(ws.vocab)
        layers = 1 if cfg.encoder == "gru1" else 2
        model = BiGruEncoder(BiGruConfig(len(vocab), cfg.gru_dim, cfg.gru_dim, cfg.d_out, layers, cfg.max_len),
                             seed=cfg.stage_seed(f"init-{cfg.preset}"))
        model.tokenizer_hash = vocab.hash
        gcfg = GruTrainConfig(cfg.train_epochs(cfg.gru_epochs), cfg.gru_batch, cfg.gru_lr, cfg.margin,
                              cfg.stage_seed(f"train-{cfg.preset}"))
        train_gru(model, TokenCache(vocab, cfg.max_len), _triplet_source(ws, cfg.source, len(files)), gcfg,
                  RunLog(ws.run_log(cfg.preset)))
        model.save(out)

    keys = ["gru_dim", "d_out", "max_len", "gru_epochs", "augmented_epochs", "gru_batch", "gru_lr", "margin"]
    return run_stage(ws, f"train-{cfg.preset}", [ws.vocab] + files, _params(cfg, f"train-{cfg.preset}", keys), [out],
                     run, force)


def embed_catalog(model_path: Path, catalog_path: Path, out: Path, vocab_path: Path, ann: AnnConfig,
                  product_text: str = "description") -> None:
    vocab = _load_vocab(vocab_path)
    model = _load_model(model_path, vocab)
    catalog = cat_mod.load_catalog(catalog_path)
    ids = catalog.ids
    vecs = Embedder(model, vocab)([catalog.text(int(p), product_text) for p in ids])
    EmbeddingIndex.build((ids, vecs), ann).save(out, {"model_sha256": file_sha256(model_path),
                                                      "model_path": str(Path(model_path).resolve())})


def _ann_config(cfg: RunConfig) -> AnnConfig:
    return AnnConfig(cfg.ann_trees, cfg.ann_leaf, cfg.ann_search_k or None, cfg.stage_seed("embed"))


def stage_embed(cfg: RunConfig, ws: Workspace, name: str, force: bool = False) -> bool:
    model, out = ws.model(name), ws.index(name)
    return run_stage(ws, f"embed-{name}", [model, ws.catalog, ws.vocab],
                     _params(cfg, "embed", ["ann_trees", "ann_leaf", "ann_search_k", "product_text"]), [out],
                     lambda: embed_catalog(model, ws.catalog, out, ws.vocab, _ann_config(cfg), cfg.product_text), force)


def eval_rank_report(model_path: Path, cases_path: Path, vocab_path: Path, catalog_path: Path,
                     product_text: str = "description") -> MetricReport:
    vocab = _load_vocab(vocab_path)
    model = _load_model(model_path, vocab)
    catalog = cat_mod.load_catalog(catalog_path)
    sets, _ = load_cases(cases_path)
    return evaluate_ranking(Embedder(model, vocab), sets.mrr_cases, sets.map_cases,
                            lambda p: catalog.text(p, product_text))


def eval_retrieve_report(model_path: Path, index_path: Path, cases_path: Path, vocab_path: Path, k: int) -> MetricReport:
    vocab = _load_vocab(vocab_path)
    model = _load_model(model_path, vocab)
    index = EmbeddingIndex.load(index_path)
    _, cases = load_cases(cases_path)
    return evaluate_retrieval(Embedder(model, vocab), index, cases, k)


def stage_eval_rank(cfg: RunConfig, ws: Workspace, name: str, force: bool = False) -> bool:
    model, out = ws.model(name), ws.report(f"{name}.rank")
    return run_stage(ws, f"eval-rank-{name}", [model, ws.cases, ws.vocab, ws.catalog],
                     _params(cfg, "eval-rank", ["product_text"]), [out],
                     lambda: eval_rank_report(model, ws.cases, ws.vocab, ws.catalog, cfg.product_text).save(out), force)


def stage_eval_retrieve(cfg: RunConfig, ws: Workspace, name: str, force: bool = False) -> bool:
    model, index, out = ws.model(name), ws.index(name), ws.report(f"{name}.retrieve")
    return run_stage(ws, f"eval-retrieve-{name}", [model, index, ws.cases, ws.vocab],
                     _params(cfg, "eval-retrieve", ["retrieve_k"]), [out],
                     lambda: eval_retrieve_report(model, index, ws.cases, ws.vocab, cfg.retrieve_k).save(out), force)


def stage_fill_mask_eval(cfg: RunConfig, ws: Workspace, force: bool = False) -> bool:
    out = ws.report("fill-mask")

    def run():
        vocab = _load_vocab(ws.vocab)
        model = _load_model(ws.pretrained, vocab)
        catalog, _ = _load_data(ws)
        texts = _heldout_queries(ws, 10 ** 9)
        res = fill_mask_accuracy(model, vocab, texts, catalog.vocab.all_terms(), n=50, top=5,
                                 seed=cfg.stage_seed("fill-mask"))
        _write_json(out, res)

    return run_stage(ws, "fill-mask-eval", [ws.pretrained, ws.vocab, ws.catalog, ws.queries, ws.split],
                     _params(cfg, "fill-mask", []), [out], run, force)


def stage_report(cfg: RunConfig, ws: Workspace, name: str) -> Path:
    out = ws.report(name)

    def run():
        rank = MetricReport.load(ws.report(f"{name}.rank"))
        retr = MetricReport.load(ws.report(f"{name}.retrieve"))
        merged = MetricReport(rank.mrr, rank.map, rank.ndcg, retr.precision_at_k, retr.recall_at_k, retr.k,
                              {**rank.n_cases, **retr.n_cases}, {**rank.per_query, **retr.per_query})
        obj = json.loads(merged.to_json())
        obj["preset"], obj["seed"] = name, cfg.seed
        _write_json(out, obj)

    run_stage(ws, f"report-{name}", [ws.report(f"{name}.rank"), ws.report(f"{name}.retrieve")], {"seed": cfg.seed},
              [out], run)
    return out


def run_pipeline(cfg: RunConfig, ws: Workspace, force: bool = False) -> dict[str, Path]:
    """Every stage needed for ``cfg.preset``; returns the report paths produced."""
    stage_gen_data(cfg, ws, force)
    stage_build_graphs(cfg, ws, force)
    stage_sample_triplets(cfg, ws, force)
    stage_make_cases(cfg, ws, force)
    stage_train_tokenizer(cfg, ws, force)
    names = [cfg.preset]
    reports: dict[str, Path] = {}
    if cfg.encoder == "transformer":
        stage_pretrain(cfg, ws, force)
        stage_untrained(cfg, ws, force)
        stage_finetune(cfg, ws, force)
        stage_fill_mask_eval(cfg, ws, force)
        names.insert(0, "transformer-untrained")
        reports["pretrain"] = ws.report("pretrain")
        reports["fill-mask"] = ws.report("fill-mask")
    else:
        stage_train_gru(cfg, ws, force)
    for name in names:
        stage_embed(cfg, ws, name, force)
        stage_eval_rank(cfg, ws, name, force)
        stage_eval_retrieve(cfg, ws, name, force)
        reports[name] = stage_report(cfg, ws, name)
    return reports


# ---------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_args(p: argparse.ArgumentParser, preset: bool = False) -> None:
    p.add_argument("--config", type=Path, help="key=value configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--seed", type=int, help="master seed (default 1)")
    p.add_argument("--out", type=Path, default=Path("work"), help="work directory (default ./work)")
    p.add_argument("--force", action="store_true", help="rerun even when the manifest is up to date")
    if preset:
        p.add_argument("--preset", choices=PRESETS, help="model preset")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prodsearch", description="Synthetic product-search pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-tokenizer", help="train the BPE vocabulary")
    _add_run_args(p)
    p.add_argument("--corpus", type=Path, help="standalone mode: one text per line; --out is then the vocab file")
    p.add_argument("--vocab-size", type=int, help="standalone mode vocabulary size (default 4000)")

    for name, helptext in [("gen-data", "generate catalog, queries and click log"),
                           ("build-graphs", "build click graphs, query classes and walks"),
                           ("sample-triplets", "split queries and sample per-epoch triplets"),
                           ("make-cases", "build ranking and retrieval test cases"),
                           ("pretrain", "MLM pre-training of the transformer"),
                           ("pipeline", "run every stage for one preset")]:
        _add_run_args(sub.add_parser(name, help=helptext), preset=name == "pipeline")
    _add_run_args(sub.add_parser("finetune", help="triplet fine-tuning of the pre-trained transformer"), preset=True)
    _add_run_args(sub.add_parser("train-gru", help="triplet training of a BiGRU encoder"), preset=True)

    p = sub.add_parser("embed", help="embed catalog products and build an ANN index")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--catalog", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tokenizer", type=Path)
    p.add_argument("--trees", type=int, default=16)
    p.add_argument("--leaf-size", type=int, default=32)
    p.add_argument("--search-k", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--product-text", choices=("description", "title"), default="description")

    p = sub.add_parser("retrieve", help="top-k products for a text query")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--model", type=Path, help="defaults to the model recorded in the index")
    p.add_argument("--tokenizer", type=Path)

    p = sub.add_parser("eval-rank", help="MRR / MAP / NDCG on ranking cases")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--cases", type=Path, required=True)
    p.add_argument("--catalog", type=Path, help="defaults to data/catalog.jsonl next to the cases directory")
    p.add_argument("--tokenizer", type=Path)
    p.add_argument("--report", type=Path, help="write the JSON report here instead of stdout")

    p = sub.add_parser("eval-retrieve", help="precision and recall at k through the ANN index")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--cases", type=Path, required=True)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--tokenizer", type=Path)
    p.add_argument("--report", type=Path)

    p = sub.add_parser("fill-mask", help="top predictions for <mask> tokens")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--tokenizer", type=Path)
    return parser


def _config_from_args(args) -> RunConfig:
    return load_config(args.config, args.overrides, seed=args.seed, preset=getattr(args, "preset", None))


_RUN_STAGES = {
    "gen-data": stage_gen_data,
    "build-graphs": stage_build_graphs,
    "sample-triplets": stage_sample_triplets,
    "make-cases": stage_make_cases,
    "train-tokenizer": stage_train_tokenizer,
    "pretrain": stage_pretrain,
    "finetune": stage_finetune,
    "train-gru": stage_train_gru,
}


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "train-tokenizer" and args.corpus is not None:
        cfg = _config_from_args(args)
        if not args.corpus.is_file():
            raise DataContractError(f"missing corpus: {args.corpus}")
        lines = [ln for ln in args.corpus.read_text(encoding="utf-8").splitlines() if ln.strip()]
        vocab = train_bpe(lines, args.vocab_size or cfg.vocab_size, cfg.stage_seed("train-tokenizer"),
                          add_prefix_space=bool(cfg.prefix_space))
        args.out.parent.mkdir(parents=True, exist_ok=True)
        vocab.save(args.out)
        print(f"{args.out}\t{len(vocab)} tokens")
        return EXIT_OK
    if cmd in _RUN_STAGES or cmd == "pipeline":
        cfg = _config_from_args(args)
        ws = Workspace(args.out)
        ws.root.mkdir(parents=True, exist_ok=True)
        (ws.root / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
        if cmd == "pipeline":
            reports = run_pipeline(cfg, ws, args.force)
            for name, path in reports.items():
                print(f"{name}\t{path}")
            return EXIT_OK
        ran = _RUN_STAGES[cmd](cfg, ws, args.force)
        print(f"{cmd}: {'done' if ran else 'up to date'}")
        return EXIT_OK

    vocab_path = args.tokenizer
    if cmd == "embed":
        vocab_path = vocab_path or _default_vocab_for(args.model)
        embed_catalog(args.model, args.catalog, args.out, vocab_path,
                      AnnConfig(args.trees, args.leaf_size, args.search_k, args.seed), args.product_text)
        print(args.out)
    elif cmd == "retrieve":
        index = EmbeddingIndex.load(args.index)
        from .container import load_arrays
        _, meta = load_arrays(args.index)
        model_path = args.model or Path(meta["model_path"])
        if args.model is None and file_sha256(model_path) != meta["model_sha256"]:
            raise DataContractError(f"model {model_path} changed since the index was built")
        vocab = _load_vocab(vocab_path or _default_vocab_for(model_path))
        model = _load_model(model_path, vocab)
        res = index.query(Embedder(model, vocab)([args.query])[0], args.k)
        if res.k_exceeds_corpus:
            print(f"# k={args.k} exceeds corpus size; returning all {len(index)}", file=sys.stderr)
        for pid, score in zip(res.ids, res.scores):
            print(f"{pid}\t{score:.6f}")
    elif cmd == "eval-rank":
        catalog = args.catalog or Path(args.cases).resolve().parent.parent / "data" / "catalog.jsonl"
        rep = eval_rank_report(args.model, args.cases, vocab_path or _default_vocab_for(args.model), catalog)
        _emit(rep, args.report)
    elif cmd == "eval-retrieve":
        rep = eval_retrieve_report(args.model, args.index, args.cases, vocab_path or _default_vocab_for(args.model),
                                   args.k)
        _emit(rep, args.report)
    elif cmd == "fill-mask":
        vocab = _load_vocab(vocab_path or _default_vocab_for(args.model))
        model = _load_model(args.model, vocab)
        if not isinstance(model, TransformerEncoder):
            raise ConfigError("fill-mask needs a transformer checkpoint")
        for k, row in enumerate(fill_mask(model, vocab, args.text, args.top)):
            for token, prob in row:
                print(f"{k}\t{token.strip()!s}\t{prob:.4f}")
    return EXIT_OK


def _emit(rep: MetricReport, path: Path | None) -> None:
    if path:
        rep.save(path)
        print(path)
    else:
        summary = {k: v for k, v in asdict(rep).items() if k != "per_query"}
        print(json.dumps(summary, sort_keys=True))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataContractError, ContainerError, TokenizerMismatch, EncoderError, QueryNotFound, FileNotFoundError,
            cat_mod.CatalogConfigError, KeyError, json.JSONDecodeError) as exc:
        print(f"data contract violation: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
