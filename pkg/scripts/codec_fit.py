"""Fit the VQ codec to 64 synthetic frames and report round-trip PSNR and codebook usage.

    python3 scripts/codec_fit.py --steps 5000
"""

import argparse
import json

import torch

from sparsenvs.config import CodecConfig
from sparsenvs.experiments import codec_fit


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--codebook-size", type=int, default=512)
    args = p.parse_args()
    torch.set_num_threads(1)
    cfg = CodecConfig(lr=args.lr, hidden=args.hidden, codebook_size=args.codebook_size)
    result = codec_fit(args.steps, cfg, on_log=lambda s, m: print(s, {k: round(v, 5) for k, v in m.items()}) if s % 500 == 0 else None)
    result.pop("params")
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
