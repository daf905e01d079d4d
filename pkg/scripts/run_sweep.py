"""One-parameter sweep (k, m or v) on synthetic corpora, averaged over seeds.

    python scripts/run_sweep.py --param k --values 0.2 0.4 0.6 0.8 1.0 --out sweep_k.json
"""

import argparse
import json
import logging
import time
from pathlib import Path

from bigen.experiments import seeded_sweep
from bigen.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/desk.cfg")
    ap.add_argument("--param", choices=["k", "m", "v"], default="k")
    ap.add_argument("--values", type=float, nargs="+", default=[0.2, 0.4, 0.6, 0.8, 1.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--cases", type=int, default=256)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = TrainConfig.from_text(Path(args.config).read_text())
    values = args.values if args.param == "k" else [int(v) for v in args.values]
    t0 = time.time()
    points = seeded_sweep(cfg, args.param, values, args.seeds, args.cases)
    print(f"{args.param:>6} " + " ".join(f"{k:>10}" for k in points[0]["metrics"]))
    for p in points:
        print(f"{p['value']:>6} " + " ".join(f"{v:10.4f}" for v in p["metrics"].values()))
    print(f"elapsed {time.time() - t0:.0f}s")
    if args.out:
        Path(args.out).write_text(json.dumps(points, indent=1))


if __name__ == "__main__":
    main()
