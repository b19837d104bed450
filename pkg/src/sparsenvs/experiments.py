"""Small fixed-setup training experiments on synthetic scenes.

Each function builds its data deterministically from seeds, trains one
module, and returns a dict of measurements plus wall time.  They back the
acceptance suite and the scripts in ``scripts/``.
"""

from __future__ import annotations

import time
from dataclasses import replace
from typing import Callable

import numpy as np
import torch

from .codec import encode_images, reconstruct, train_codec
from .config import CodecConfig, GeneratorConfig, GeometryConfig
from .generator import GeneratorExample, LatentContext, ViewGenerator, assemble_previews, sample_tokens, sequence_nll, stack_previews, train_generator
from .geometry import GeometryScene, GuidanceRenderer, NeuralGeometry, RaySamplingConfig, train_geometry
from .metrics import psnr
from .scene import CameraIntrinsics, SceneSpec, generate_synthetic_scene, sample_view_set

Log = Callable[[int, dict], None]


def geometry_holdout(
    steps: int = 2000,
    size: int = 64,
    scene_seed: int = 0,
    observed: tuple[int, ...] = (0, 10, 21, 31),
    held_out: int = 15,
    n_frames: int = 32,
    cfg: GeometryConfig | None = None,
    seed: int = 0,
    on_log: Log | None = None,
) -> dict:
    """Masked PSNR of guidance on a view never used as a target, before and after training."""
    cfg = cfg or GeometryConfig(lr=1e-3)
    intr = CameraIntrinsics.from_fov(size, size, 70.0)
    views = generate_synthetic_scene(SceneSpec.random(scene_seed), n_frames, intrinsics=intr)
    obs = [views[i] for i in observed]
    rcfg = RaySamplingConfig.from_config(cfg)

    def measure(model):
        g = GuidanceRenderer(obs, intr, model, rcfg, cfg.stride).render(views[held_out].pose)
        mask = g.mask.numpy()
        return psnr(g.color.numpy(), views[held_out].image, mask), float(mask.mean())

    torch.manual_seed(seed)
    model = NeuralGeometry.from_config(cfg)
    before, coverage = measure(model)
    t0 = time.perf_counter()
    train_geometry([GeometryScene(views, intr, list(observed), [held_out])], cfg, seed, steps, model, on_log)
    seconds = time.perf_counter() - t0
    after, _ = measure(model)
    return {"psnr_before": before, "psnr_after": after, "gain": after - before, "mask_fraction": coverage, "seconds": seconds}


def codec_frames(n_scenes: int = 4, frames_per_scene: int = 16, size: int = 64, first_seed: int = 100) -> np.ndarray:
    intr = CameraIntrinsics.from_fov(size, size, 70.0)
    images = [v.image for s in range(n_scenes) for v in generate_synthetic_scene(SceneSpec.random(first_seed + s), frames_per_scene, intrinsics=intr)]
    return np.stack(images).astype(np.float32)


def codec_fit(steps: int = 5000, cfg: CodecConfig | None = None, images: np.ndarray | None = None, seed: int = 0, on_log: Log | None = None) -> dict:
    """Round-trip PSNR and codebook usage after fitting the codec to a fixed frame set."""
    cfg = cfg or CodecConfig(lr=1e-3)
    images = codec_frames() if images is None else images
    t0 = time.perf_counter()
    params = train_codec(images, cfg, seed, steps, on_log=on_log)
    seconds = time.perf_counter() - t0
    recon = reconstruct(list(images), params)
    per_image = [psnr(r, x) for r, x in zip(recon, images)]
    tokens = encode_images(images, params)
    return {
        "mean_psnr": float(np.mean(per_image)),
        "min_psnr": float(np.min(per_image)),
        "distinct_tokens": int(len(np.unique(tokens))),
        "n_images": len(images),
        "seconds": seconds,
        "params": params,
    }


def memorization_examples(
    n: int = 8,
    size: int = 64,
    codebook_size: int = 512,
    n_tokens: int = 64,
    n_obs: int = 2,
    n_probed: int = 1,
    seed: int = 0,
) -> list[GeneratorExample]:
    """Fixed (previews, target tokens) triples from synthetic scenes.

    Guidance comes from an untrained geometry module and the targets are
    uniform random token sequences, so nothing but memorisation can fit them.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics.from_fov(size, size, 70.0)
    gcfg = GeometryConfig()
    geometry = NeuralGeometry.from_config(gcfg)
    rcfg = RaySamplingConfig.from_config(gcfg)
    out = []
    for i in range(n):
        views = generate_synthetic_scene(SceneSpec.random(200 + i // 2), 8, intrinsics=intr)
        vs = sample_view_set(views, n_obs, i)
        render = GuidanceRenderer(vs.observed, intr, geometry, rcfg).render
        q = vs.novel_indices[0]
        context, query = assemble_previews(vs, render, intr, n_probed, views[q].pose)
        x, cats = stack_previews(context, query)
        out.append(GeneratorExample(x, cats, rng.integers(codebook_size, size=n_tokens)))
    return out


def generator_memorize(
    steps: int = 3000,
    cfg: GeneratorConfig | None = None,
    examples: list[GeneratorExample] | None = None,
    codebook_size: int = 512,
    seed: int = 0,
    on_log: Log | None = None,
) -> dict:
    """Teacher-forced NLL and exact greedy recall on a fixed set of triples."""
    cfg = cfg or GeneratorConfig(d_model=64, enc_layers=2, dec_layers=2, embed_hidden=32, lr=1e-3)
    examples = memorization_examples(codebook_size=codebook_size) if examples is None else examples
    cfg = replace(cfg, batch_size=len(examples))
    n_tokens = len(examples[0].tokens)
    size = tuple(examples[0].previews.shape[-2:])
    torch.manual_seed(seed)
    params = ViewGenerator.from_config(cfg, codebook_size, n_tokens, size)
    t0 = time.perf_counter()
    train_generator(examples, params, cfg, seed, steps, on_log)
    seconds = time.perf_counter() - t0
    nll, exact = [], 0
    with torch.no_grad():
        for ex in examples:
            h = LatentContext(params.encode(params.embed(ex.previews[None], ex.categories))[0])
            nll.append(sequence_nll(ex.tokens, h, params)["per_token"].item())
            exact += bool(np.array_equal(sample_tokens(h, params, mode="greedy").tokens, ex.tokens))
    return {"nll_per_token": float(np.mean(nll)), "exact": exact, "n_examples": len(examples), "seconds": seconds}
