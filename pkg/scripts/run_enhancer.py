"""Train the cross-frame enhancer on degraded orbiter triples and report held-out PSNR.

Example:
    python3 scripts/run_enhancer.py --profile desk --out runs/enhancer
"""

import argparse
import json
from pathlib import Path

import torch

from dynfield.enhancer import EnhancerConfig
from dynfield.experiments import run_enhancer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profile", default="desk", choices=["full", "desk", "tiny"])
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("runs/enhancer"))
    args = ap.parse_args()
    torch.set_num_threads(args.threads)
    metrics, _ = run_enhancer(EnhancerConfig.profile(args.profile), args.out)
    print(json.dumps(metrics, indent=2))


if __name__ == "__main__":
    main()
