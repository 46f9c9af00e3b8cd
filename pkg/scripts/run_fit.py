"""Fit a cascade field to the orbiter clip and print held-out metrics.

Example:
    python3 scripts/run_fit.py --profile desk1 --out runs/fit
    python3 scripts/run_fit.py --profile desk1 --mode coarse --out runs/coarse
    python3 scripts/run_fit.py --profile desk1 --no-icl --out runs/noicl
"""

import argparse
import json
from pathlib import Path

import torch

from dynfield.experiments import MODES, run_fit, variant_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profile", default="desk1")
    ap.add_argument("--mode", choices=MODES, default="cascade")
    ap.add_argument("--no-icl", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("runs/fit"))
    args = ap.parse_args()
    torch.set_num_threads(args.threads)
    cfg = variant_config(args.profile, args.mode, not args.no_icl, args.seed)
    metrics, _ = run_fit(cfg, args.out)
    print(json.dumps(metrics, indent=2))


if __name__ == "__main__":
    main()
