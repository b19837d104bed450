"""Two-stage training and feed-forward generation on on-disk scenes.

Output directory layout::

    <out>/scene/<name>/...            scenes (see scene.save_scene)
    <out>/checkpoints/<stage>.npz     geometry, codec, generator
    <out>/logs/<stage>.jsonl          append-only loss logs
    <out>/<command>.config.json       resolved config of each run
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ckpt
from .codec import TokenSequence, VQCodec, decode_tokens, encode_images, train_codec
from .config import CodecConfig, GeneratorConfig, GeometryConfig, PipelineConfig, save_config
from .geometry import GeometryScene, GuidanceRenderer, NeuralGeometry, RaySamplingConfig, train_geometry
from .generator import (
    GeneratorExample,
    LatentContext,
    ViewGenerator,
    assemble_previews,
    sample_tokens,
    stack_previews,
    train_generator,
)
from .metrics import MetricReport, evaluate, psnr, ssim
from .scene import (
    CameraIntrinsics,
    CameraPose,
    SceneSpec,
    View,
    ViewSet,
    generate_synthetic_scene,
    load_intrinsics,
    load_scene,
    sample_view_set,
    save_scene,
)

log = logging.getLogger(__name__)

STAGES = ("geometry", "codec", "generator")


class PipelineError(RuntimeError):
    """Error carrying a short machine-readable code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def set_precision(cfg: PipelineConfig) -> torch.dtype:
    dtype = {"float32": torch.float32, "float64": torch.float64}.get(cfg.precision)
    if dtype is None:
        raise PipelineError("config", f"unknown precision {cfg.precision!r}")
    return dtype


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def checkpoint_path(out: Path, stage: str) -> Path:
    return Path(out) / "checkpoints" / f"{stage}.npz"


class LossLog:
    """Append-only JSON-lines log of (step, named scalars)."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, step: int, scalars: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps({"step": step, **scalars}) + "\n")
        log.info("step %d %s", step, " ".join(f"{k}={v:.5g}" for k, v in scalars.items()))


def read_loss_log(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


def cmd_make_scenes(cfg: PipelineConfig, out: Path) -> list[Path]:
    sc = cfg.scene
    intr = CameraIntrinsics.from_fov(sc.width, sc.height, sc.fov_deg)
    root = Path(out) / "scene"
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PipelineError("io", f"cannot create {root}: {exc}") from exc
    dirs = []
    for i in range(sc.n_scenes):
        spec = SceneSpec.random(cfg.seed * 1000 + i, sc.n_objects)
        views = generate_synthetic_scene(spec, sc.n_frames, sc.trajectory, intr)
        path = root / f"scene_{i:03d}"
        save_scene(views, path, intr)
        dirs.append(path)
    return dirs


def find_scenes(out: Path) -> list[Path]:
    root = Path(out) / "scene"
    scenes = sorted(p for p in root.glob("*") if (p / "poses.json").exists()) if root.exists() else []
    if not scenes:
        raise PipelineError("missing-scenes", f"no scenes under {root}; run make-scenes first")
    return scenes


def _load(path: Path) -> tuple[list[View], CameraIntrinsics]:
    return load_scene(path), load_intrinsics(path)


# ---------------------------------------------------------------------------
# Model construction from checkpoints
# ---------------------------------------------------------------------------


def geometry_from_checkpoint(path: Path, dtype=torch.float32) -> tuple[NeuralGeometry, GeometryConfig]:
    c = ckpt.read_checkpoint(path)
    gcfg = GeometryConfig(**c.config)
    model = NeuralGeometry.from_config(gcfg).to(dtype)
    ckpt.load_weights(model, c, "geometry")
    return model.eval(), gcfg


def codec_from_checkpoint(path: Path, dtype=torch.float32) -> tuple[VQCodec, CodecConfig]:
    c = ckpt.read_checkpoint(path)
    ccfg = CodecConfig(**c.config)
    model = VQCodec.from_config(ccfg).to(dtype)
    ckpt.load_weights(model, c, "codec")
    return model.eval(), ccfg


def generator_from_checkpoint(path: Path, dtype=torch.float32) -> tuple[ViewGenerator, GeneratorConfig]:
    c = ckpt.read_checkpoint(path)
    gcfg = GeneratorConfig(**c.config)
    ex = c.extra
    model = ViewGenerator.from_config(gcfg, ex["codebook_size"], ex["n_tokens"], tuple(ex["image_size"])).to(dtype)
    ckpt.load_weights(model, c, "generator")
    return model.eval(), gcfg


def _require(out: Path, stage: str, for_what: str) -> Path:
    path = checkpoint_path(out, stage)
    if not path.exists():
        raise PipelineError("missing-checkpoint", f"{for_what} needs the {stage} checkpoint ({path}); run `train {stage}` first")
    return path


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def cmd_train(stage: str, cfg: PipelineConfig, out: Path, steps: int | None = None) -> Path:
    if stage not in STAGES:
        raise PipelineError("invalid-argument", f"unknown stage {stage!r}")
    out = Path(out)
    dtype = set_precision(cfg)
    seed_everything(cfg.seed)
    logger = LossLog(out / "logs" / f"{stage}.jsonl")
    dest = checkpoint_path(out, stage)

    if stage == "geometry":
        scenes = [GeometryScene(*_load(p)) for p in find_scenes(out)]
        model = NeuralGeometry.from_config(cfg.geometry).to(dtype)

        def save(step, m):
            ckpt.save_checkpoint(dest, "geometry", m, asdict(cfg.geometry), step)

        try:
            train_geometry(scenes, cfg.geometry, cfg.seed, steps, model, logger, save, 500)
        except FloatingPointError as exc:
            raise PipelineError("nan-loss", str(exc)) from exc
        save(cfg.geometry.train_steps if steps is None else steps, model)

    elif stage == "codec":
        images = np.stack([v.image for p in find_scenes(out) for v in load_scene(p)])
        model = VQCodec.from_config(cfg.codec).to(dtype)

        def save(step, m):
            ckpt.save_checkpoint(dest, "codec", m, asdict(cfg.codec), step)

        try:
            train_codec(images, cfg.codec, cfg.seed, steps, model, logger, save, 1000)
        except FloatingPointError as exc:
            raise PipelineError("nan-loss", str(exc)) from exc
        save(cfg.codec.train_steps if steps is None else steps, model)

    else:
        geo_path = _require(out, "geometry", "generator training")
        codec_path = _require(out, "codec", "generator training")
        geometry, gcfg = geometry_from_checkpoint(geo_path, dtype)
        codec, ccfg = codec_from_checkpoint(codec_path, dtype)
        scenes = [_load(p) for p in find_scenes(out)]
        intr = scenes[0][1]
        sampler = ExampleSampler(scenes, geometry, gcfg, codec, cfg.generator, cfg.seed, dtype)
        n_tokens = sampler.n_tokens
        model = ViewGenerator.from_config(cfg.generator, codec.codebook_size, n_tokens, (intr.height, intr.width)).to(dtype)
        extra = {"codebook_size": codec.codebook_size, "n_tokens": n_tokens, "image_size": [intr.height, intr.width]}

        def save(step, m):
            ckpt.save_checkpoint(dest, "generator", m, asdict(cfg.generator), step, extra)

        try:
            train_generator(sampler, model, cfg.generator, cfg.seed, steps, logger, save, 500)
        except FloatingPointError as exc:
            raise PipelineError("nan-loss", str(exc)) from exc
        save(cfg.generator.train_steps if steps is None else steps, model)
    return dest


class CachedRenderer:
    """Memoises guidance renders by pose so repeated previews cost nothing."""

    def __init__(self, renderer: GuidanceRenderer):
        self.renderer = renderer
        self.cache: dict[bytes, object] = {}

    def __call__(self, pose: CameraPose):
        key = pose.matrix.tobytes()
        if key not in self.cache:
            self.cache[key] = self.renderer.render(pose)
        return self.cache[key]


class ExampleSampler:
    """Draws (previews, target tokens) training examples.

    A pool of view sets is sampled per scene up front; guidance renders (frozen
    geometry) and target tokens (frozen codec) are cached, and each draw picks
    a view set, a query among its novel views, and the probed previews.
    """

    def __init__(self, scenes, geometry, gcfg: GeometryConfig, codec, cfg: GeneratorConfig, seed: int, dtype, pool_per_scene: int = 4):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.dtype = dtype
        self.pool = []
        rcfg = RaySamplingConfig.from_config(gcfg)
        for views, intr in scenes:
            n_obs = min(cfg.n_obs, len(views) - 2)
            tokens = encode_images(np.stack([v.image for v in views]), codec).astype(np.int64)
            for _ in range(pool_per_scene):
                vs = sample_view_set(views, n_obs, rng)
                render = CachedRenderer(GuidanceRenderer(vs.observed, intr, geometry, rcfg, gcfg.stride))
                self.pool.append((vs, intr, render, tokens))
        self.n_tokens = self.pool[0][3].shape[1]

    def __call__(self, rng: np.random.Generator) -> GeneratorExample:
        vs, intr, render, tokens = self.pool[rng.integers(len(self.pool))]
        query = int(rng.choice(vs.novel_indices))
        n_probed = min(self.cfg.n_probed, len(vs.novel_indices) - 1)
        context, qp = assemble_previews(vs, render, intr, n_probed, vs.views[query].pose, "novel", query)
        x, cats = stack_previews(context, qp, self.dtype)
        return GeneratorExample(x, cats, tokens[query])


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


@dataclass
class Models:
    geometry: NeuralGeometry
    geometry_cfg: GeometryConfig
    codec: VQCodec
    generator: ViewGenerator
    generator_cfg: GeneratorConfig


def load_models(out: Path, dtype=torch.float32) -> Models:
    geo, gcfg = geometry_from_checkpoint(_require(out, "geometry", "generation"), dtype)
    codec, _ = codec_from_checkpoint(_require(out, "codec", "generation"), dtype)
    gen, gencfg = generator_from_checkpoint(_require(out, "generator", "generation"), dtype)
    return Models(geo, gcfg, codec, gen, gencfg)


def generate_view(
    models: Models,
    view_set: ViewSet,
    intrinsics: CameraIntrinsics,
    render,
    query_pose: CameraPose,
    query_index: int | None,
    cfg: GeneratorConfig,
    seed: int,
) -> tuple[np.ndarray, TokenSequence]:
    """Previews -> latent context -> sampled tokens -> decoded image."""
    n_avail = len(view_set.novel_indices) - (1 if query_index is not None else 0)
    n_probed = min(cfg.n_probed, n_avail) if cfg.probe_source == "novel" else cfg.n_probed
    context, query = assemble_previews(view_set, render, intrinsics, n_probed, query_pose, cfg.probe_source, query_index, seed)
    x, cats = stack_previews(context, query, models.generator.dtype)
    gen = models.generator
    with torch.no_grad():
        h = gen.encode(gen.embed(x[None], cats))[0]
    f = models.codec.downsample
    grid = (intrinsics.height // f, intrinsics.width // f)
    tokens = sample_tokens(LatentContext(h), gen, gen.n_tokens, cfg.mode, cfg.temperature, seed, grid_shape=grid)
    return decode_tokens(tokens, models.codec), tokens


def _save_png(path: Path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr if arr.ndim == 3 else arr, mode="RGB" if arr.ndim == 3 else "L").save(path)


def _observed_split(n_views: int, n_obs: int, target: int | None, seed: int) -> tuple[list[int], list[int]]:
    rng = np.random.default_rng(seed)
    pool = [i for i in range(n_views) if i != target]
    if not 1 <= n_obs <= len(pool) - (0 if target is not None else 1):
        raise PipelineError("invalid-argument", f"n_obs={n_obs} not valid for a scene of {n_views} frames")
    observed = sorted(int(i) for i in rng.choice(pool, size=n_obs, replace=False))
    return observed, [i for i in range(n_views) if i not in set(observed)]


def cmd_generate(
    scene: Path,
    n_obs: int,
    cfg: PipelineConfig,
    out: Path,
    target_frame: int | None = None,
    target_pose: np.ndarray | None = None,
    models: Models | None = None,
) -> dict:
    if (target_frame is None) == (target_pose is None):
        raise PipelineError("invalid-argument", "give exactly one of target_frame / target_pose")
    out = Path(out)
    dtype = set_precision(cfg)
    seed_everything(cfg.seed)
    models = models or load_models(out, dtype)
    try:
        views, intr = _load(scene)
    except Exception as exc:
        raise PipelineError("scene-format", str(exc)) from exc
    if target_frame is not None and not 0 <= target_frame < len(views):
        raise PipelineError("invalid-argument", f"target frame {target_frame} out of range")
    observed, novel = _observed_split(len(views), n_obs, target_frame, cfg.seed)
    vs = ViewSet(views, observed, novel)
    pose = views[target_frame].pose if target_frame is not None else CameraPose.from_matrix(target_pose)
    rcfg = RaySamplingConfig.from_config(models.geometry_cfg)
    render = CachedRenderer(GuidanceRenderer(vs.observed, intr, models.geometry, rcfg, models.geometry_cfg.stride))
    gcfg = _inference_cfg(models.generator_cfg, cfg.generator)
    image, tokens = generate_view(models, vs, intr, render, pose, target_frame, gcfg, cfg.seed)
    guidance = render(pose)
    if guidance.mask.sum() == 0:
        log.warning("target pose sees no neural points; guidance mask is empty")
    dest = out / "generate"
    dest.mkdir(parents=True, exist_ok=True)
    _save_png(dest / "generated.png", image)
    _save_png(dest / "guidance_color.png", guidance.color.numpy())
    Image.fromarray((guidance.mask.numpy() * 255).astype(np.uint8), mode="L").save(dest / "guidance_mask.png")
    result = {
        "scene": str(scene),
        "observed": observed,
        "target_frame": target_frame,
        "tokens": tokens.tokens.tolist(),
        "mask_fraction": float(guidance.mask.mean()),
    }
    if target_frame is not None:
        gt = views[target_frame].image
        p = psnr(image, gt)
        result["psnr"] = None if np.isinf(p) else p
        result["ssim"] = ssim(image, gt, cfg.metrics.ssim_window, cfg.metrics.ssim_c1, cfg.metrics.ssim_c2)
    (dest / "report.json").write_text(json.dumps(result, indent=2))
    save_config(cfg, out / "generate.config.json")
    return result


def _inference_cfg(trained: GeneratorConfig, requested: GeneratorConfig) -> GeneratorConfig:
    """Architecture from the checkpoint, sampling knobs from the run config."""
    merged = GeneratorConfig(**asdict(trained))
    for key in ("temperature", "mode", "n_probed", "probe_source"):
        setattr(merged, key, getattr(requested, key))
    return merged


def cmd_evaluate(scene: Path, n_obs: int, cfg: PipelineConfig, out: Path, predict: str = "model", models: Models | None = None) -> MetricReport:
    """Generate every novel view of one sampled view set and aggregate metrics.

    ``predict="ground-truth"`` pipes the true images through as predictions
    (harness self-test; needs no checkpoints).
    """
    out = Path(out)
    dtype = set_precision(cfg)
    seed_everything(cfg.seed)
    try:
        views, intr = _load(scene)
    except Exception as exc:
        raise PipelineError("scene-format", str(exc)) from exc
    try:
        vs = sample_view_set(views, n_obs, cfg.seed)
    except ValueError as exc:
        raise PipelineError("invalid-argument", str(exc)) from exc
    dest = out / "evaluate"
    dest.mkdir(parents=True, exist_ok=True)
    preds = []
    if predict == "ground-truth":
        preds = [views[i].image for i in vs.novel_indices]
    elif predict == "model":
        models = models or load_models(out, dtype)
        rcfg = RaySamplingConfig.from_config(models.geometry_cfg)
        render = CachedRenderer(GuidanceRenderer(vs.observed, intr, models.geometry, rcfg, models.geometry_cfg.stride))
        gcfg = _inference_cfg(models.generator_cfg, cfg.generator)
        for i in vs.novel_indices:
            image, _ = generate_view(models, vs, intr, render, views[i].pose, i, gcfg, cfg.seed + i)
            _save_png(dest / f"{i:04d}.generated.png", image)
            preds.append(image)
    else:
        raise PipelineError("invalid-argument", f"unknown prediction source {predict!r}")
    m = cfg.metrics
    report = evaluate(
        preds, [views[i] for i in vs.novel_indices], m.ssim_window, m.ssim_c1, m.ssim_c2, view_ids=vs.novel_indices,
        config={"scene": str(scene), "n_obs": n_obs, "seed": cfg.seed, "observed": vs.observed_indices, "predict": predict},
    )
    report.write(dest / "report.json")
    save_config(cfg, out / "evaluate.config.json")
    return report
