"""Component ablation grid on synthetic corpora, averaged over seeds.

    python scripts/run_ablation.py --config configs/desk.cfg --seeds 0 1 2 --out ablation.json
"""

import argparse
import json
import logging
import time
from pathlib import Path

from bigen.experiments import seeded_ablation
from bigen.trainer import TrainConfig, ablation_table


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/desk.cfg")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--cases", type=int, default=256)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = TrainConfig.from_text(Path(args.config).read_text())
    t0 = time.time()
    res = seeded_ablation(cfg, args.seeds, args.cases)
    print(ablation_table(res))
    print(f"elapsed {time.time() - t0:.0f}s")
    if args.out:
        Path(args.out).write_text(json.dumps(res, indent=1))


if __name__ == "__main__":
    main()
