"""Toy backdoor for each coarse attack vector, against a clean baseline.

Trains the tiny model on 500 synthetic 64x64 images at poisoning rate 0.2 for
each of O2O/O2B/B2O/B2B and prints ASR, PBA and CBA per seed plus the median.

    python scripts/toy_backdoor.py --out runs/toy --seeds 0 1 2
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from badseg.experiments import clean_config, toy_config
from badseg.pipeline import run


def eval_of(run_dir: Path) -> dict:
    return json.loads((run_dir / "eval_report.json").read_text())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--vectors", nargs="+", default=["O2O", "O2B", "B2O", "B2B"])
    ap.add_argument("--epochs", type=int, default=25)
    args = ap.parse_args()
    out = Path(args.out)

    clean = []
    for seed in args.seeds:
        cfg = clean_config(seed, epochs=args.epochs)
        run(cfg, out / cfg.name)
        clean.append(eval_of(out / cfg.name)["cba"])
    print(f"clean baseline mIoU: {' '.join(f'{c:.3f}' for c in clean)}  median {np.median(clean):.3f}")

    summary = {"clean_miou": clean}
    for vector in args.vectors:
        reps = []
        for seed in args.seeds:
            cfg = toy_config(vector, seed=seed, epochs=args.epochs)
            run(cfg, out / cfg.name)
            reps.append(eval_of(out / cfg.name))
        asr = [r["asr"] for r in reps]
        cba = [r["cba"] for r in reps]
        pba = [r["pba"] for r in reps]
        print(f"{vector}: ASR {np.median(asr):.3f}  PBA {np.median(pba):.3f}  CBA {np.median(cba):.3f}  (ASR per seed {asr})")
        summary[vector] = {"asr": asr, "pba": pba, "cba": cba}
    (out / "toy_backdoor.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
