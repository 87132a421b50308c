"""Run the pipeline for several presets in one workspace and print a results table.

    python scripts/run_experiments.py --out work
    python scripts/run_experiments.py --out work --presets transformer-qp gru1-qp --set gru_epochs=3
"""

import argparse
import json
import sys
import time
from pathlib import Path

from prodsearch.cli import EXIT_OK, main
from prodsearch.config import PRESETS

DEFAULT = ("transformer-qp", "gru1-qp", "gru2-qp", "gru1-augmented", "gru2-augmented")


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", type=Path, default=Path("work"))
    p.add_argument("--presets", nargs="+", choices=PRESETS, default=list(DEFAULT))
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--config", type=Path)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return p.parse_args(argv)


def run(args) -> int:
    common = ["--out", str(args.out), "--seed", str(args.seed)]
    if args.config:
        common += ["--config", str(args.config)]
    for kv in args.overrides:
        common += ["--set", kv]
    for preset in args.presets:
        t0 = time.perf_counter()
        code = main(["pipeline", *common, "--preset", preset])
        if code != EXIT_OK:
            return code
        print(f"# {preset}: {time.perf_counter() - t0:.0f}s", file=sys.stderr)

    rows = list(args.presets)
    if any(p.startswith("transformer") for p in rows):
        rows.insert(0, "transformer-untrained")
    print(f"{'model':<24}{'MRR':>8}{'MAP':>8}{'NDCG':>8}{'P@k':>8}{'R@k':>8}")
    for name in rows:
        r = json.loads((args.out / "reports" / f"{name}.json").read_text())
        print(f"{name:<24}{r['mrr']:8.4f}{r['map']:8.4f}{r['ndcg']:8.4f}"
              f"{r['precision_at_k']:8.4f}{r['recall_at_k']:8.4f}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(run(parse_args()))
