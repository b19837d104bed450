"""Train the geometry module on one synthetic scene and score guidance on a held-out view.

    python3 scripts/geometry_holdout.py --steps 2000 --lr 1e-3
"""

import argparse
import json

import torch

from sparsenvs.config import GeometryConfig
from sparsenvs.experiments import geometry_holdout


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--radius", type=float, default=0.08)
    args = p.parse_args()
    torch.set_num_threads(1)
    cfg = GeometryConfig(lr=args.lr, radius=args.radius)
    result = geometry_holdout(args.steps, args.size, args.scene_seed, cfg=cfg, on_log=lambda s, m: print(s, m) if s % 250 == 0 else None)
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
