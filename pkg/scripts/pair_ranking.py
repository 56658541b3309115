"""Correlate surrogate class-pair distance with toy attack success.

Ranks all class pairs of the synthetic taxonomy by surrogate class-center
distance, attacks each pair with its suitable vector, and reports the
Spearman and Kendall correlation between negated distance and ASR.

    python scripts/pair_ranking.py --out runs/pair_ranking
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from badseg.analysis import kendall, spearman
from badseg.experiments import pair_ranking_study


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/pair_ranking")
    ap.add_argument("--rate", type=float, default=0.1)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--intensity", type=float, default=0.6)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--aggregate", choices=["mean", "median"], default="mean")
    args = ap.parse_args()

    rows = pair_ranking_study(
        Path(args.out), args.rate, args.epochs, args.intensity, args.seeds, aggregate=args.aggregate
    )
    neg_d = [-r["distance"] for r in rows]
    asr = [r["asr"] for r in rows]
    for r in rows:
        print(f"{r['victim']:>9} -> {r['target']:<9} {r['vector']:4} d={r['distance']:.3f} asr={r['asr']:.3f}")
    summary = {"spearman": spearman(neg_d, asr), "kendall": kendall(neg_d, asr), "pairs": rows}
    print(f"spearman {summary['spearman']:.3f}  kendall {summary['kendall']:.3f}")
    Path(args.out, "pair_ranking.json").write_text(json.dumps(summary, indent=2, default=float))


if __name__ == "__main__":
    np.seterr(all="ignore")
    main()
