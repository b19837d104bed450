"""Overfit the view generator to 8 fixed (previews, random target tokens) triples.

    python3 scripts/generator_memorize.py --steps 3000
"""

import argparse
import json

import torch

from sparsenvs.config import GeneratorConfig
from sparsenvs.experiments import generator_memorize


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--layers", type=int, default=2, help="encoder and decoder depth")
    args = p.parse_args()
    torch.set_num_threads(1)
    cfg = GeneratorConfig(d_model=args.d_model, enc_layers=args.layers, dec_layers=args.layers, embed_hidden=32, lr=args.lr)
    result = generator_memorize(args.steps, cfg, on_log=lambda s, m: print(s, m) if s % 250 == 0 else None)
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
