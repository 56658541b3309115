"""ASR of the toy O2B backdoor as the poisoning rate grows.

    python scripts/rate_sweep.py --out runs/rates --rates 0.05 0.1 0.2
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from badseg.experiments import toy_config
from badseg.pipeline import run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/rates")
    ap.add_argument("--rates", type=float, nargs="+", default=[0.05, 0.1, 0.2])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--vector", default="O2B")
    args = ap.parse_args()
    out = Path(args.out)

    table = {}
    for rate in args.rates:
        asrs = []
        for seed in args.seeds:
            cfg = toy_config(args.vector, seed=seed, poison_rate=rate, name=f"{args.vector.lower()}_r{rate}_s{seed}")
            run(cfg, out / cfg.name)
            asrs.append(json.loads((out / cfg.name / "eval_report.json").read_text())["asr"])
        table[rate] = asrs
        print(f"rate {rate:<5} ASR median {np.median(asrs):.3f}  per seed {' '.join(f'{a:.3f}' for a in asrs)}")
    (out / "rate_sweep.json").write_text(json.dumps({str(k): v for k, v in table.items()}, indent=2))


if __name__ == "__main__":
    main()
