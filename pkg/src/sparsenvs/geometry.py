"""Neural point cloud built from observed RGB-D views and rendered by volume rendering.

Each valid-depth pixel of an observed view becomes a world-space point carrying
the feature vector that a small conv net computes at that pixel.  Rendering
marches every camera ray, aggregates neighbouring point features around each
sample, maps them to density and color, and alpha-composites front to back.
Rays that never come near a point are marked invalid in the returned mask.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree
from torch import nn

from .config import GeometryConfig
from .scene import CameraIntrinsics, CameraPose, View, sample_view_set

log = logging.getLogger(__name__)


@dataclass
class NeuralPointCloud:
    positions: np.ndarray  # P x 3
    source: np.ndarray  # P x 2 (view index, flat pixel index)
    features: torch.Tensor | None = None  # P x d

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class RaySamplingConfig:
    steps: int = 48
    near: float = 0.1
    far: float = 6.0
    radius: float = 0.08
    max_neighbors: int = 8
    mask_threshold: int = 1

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError("near must be < far")
        if self.steps < 1 or self.radius <= 0 or self.max_neighbors < 1:
            raise ValueError("invalid ray sampling config")

    @classmethod
    def from_config(cls, cfg: GeometryConfig) -> "RaySamplingConfig":
        return cls(cfg.steps, cfg.near, cfg.far, cfg.radius, cfg.max_neighbors, cfg.mask_threshold)


@dataclass
class RenderedGuidance:
    color: torch.Tensor  # H x W x 3, zero where mask is 0
    mask: torch.Tensor  # H x W in {0, 1}


class FeatureExtractor(nn.Module):
    """Stack of same-resolution convs; the last layer is linear."""

    def __init__(self, out_dim: int = 32, hidden: int = 16, layers: int = 3, kernel: int = 3):
        super().__init__()
        dims = [3] + [hidden] * (layers - 1) + [out_dim]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, kernel, padding=kernel // 2) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = images
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.relu(x)
        return x


class RadianceField(nn.Module):
    """Per-neighbour MLP on (feature, offset), then density and color heads."""

    def __init__(self, feature_dim: int = 32, hidden: int = 32, layers: int = 2):
        super().__init__()
        dims = [feature_dim + 3] + [hidden] * layers
        self.mlp = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.density = nn.Linear(hidden, 1)
        self.color = nn.Linear(hidden, 3)

    def neighbor(self, x: torch.Tensor) -> torch.Tensor:
        for lin in self.mlp:
            x = F.relu(lin(x))
        return x


class NeuralGeometry(nn.Module):
    def __init__(
        self,
        feature_dim: int = 32,
        hidden: int = 32,
        extractor_hidden: int = 16,
        extractor_layers: int = 3,
        extractor_kernel: int = 3,
        field_layers: int = 2,
        density_scale: float = 10.0,
    ):
        super().__init__()
        self.extractor = FeatureExtractor(feature_dim, extractor_hidden, extractor_layers, extractor_kernel)
        self.field = RadianceField(feature_dim, hidden, field_layers)
        self.density_scale = density_scale

    @classmethod
    def from_config(cls, cfg: GeometryConfig) -> "NeuralGeometry":
        return cls(cfg.feature_dim, cfg.hidden, cfg.extractor_hidden, density_scale=cfg.density_scale)


# ---------------------------------------------------------------------------
# Point cloud
# ---------------------------------------------------------------------------


def build_point_cloud(observed: Sequence[View], intrinsics: CameraIntrinsics, stride: int = 1) -> NeuralPointCloud:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    positions, sources = [], []
    h, w = intrinsics.height, intrinsics.width
    for vi, view in enumerate(observed):
        if view.depth is None:
            raise ValueError(f"observed view {vi} has no depth")
        vv, uu = np.mgrid[0:h:stride, 0:w:stride]
        z = view.depth[vv, uu]
        ok = z > 0
        u, v, z = uu[ok], vv[ok], z[ok]
        cam = np.stack([(u + 0.5 - intrinsics.cx) / intrinsics.fx * z, (v + 0.5 - intrinsics.cy) / intrinsics.fy * z, z], -1)
        positions.append(cam @ view.pose.rotation.T + view.pose.translation)
        sources.append(np.stack([np.full(len(u), vi), v * w + u], -1))
    if not positions:
        return NeuralPointCloud(np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64))
    return NeuralPointCloud(np.concatenate(positions), np.concatenate(sources).astype(np.int64))


def extract_point_features(cloud: NeuralPointCloud, observed: Sequence[View], params: NeuralGeometry) -> NeuralPointCloud:
    """Attach features sampled from each point's source pixel (differentiable)."""
    dtype = next(params.parameters()).dtype
    if len(cloud) and (cloud.source[:, 0].max() >= len(observed) or cloud.source[:, 0].min() < 0):
        raise IndexError("point provenance references a missing view")
    images = torch.as_tensor(np.stack([v.image for v in observed]), dtype=dtype).permute(0, 3, 1, 2)
    n, _, h, w = images.shape
    if len(cloud) and (cloud.source[:, 1].max() >= h * w or cloud.source[:, 1].min() < 0):
        raise IndexError("point provenance references a pixel outside the image")
    fmap = params.extractor(images)
    if fmap.shape[-2:] != (h, w):
        fmap = F.interpolate(fmap, size=(h, w), mode="bilinear", align_corners=False)
    flat = fmap.flatten(2)  # V x d x HW
    vi = torch.as_tensor(cloud.source[:, 0])
    pi = torch.as_tensor(cloud.source[:, 1])
    feats = flat[vi, :, pi]
    return NeuralPointCloud(cloud.positions, cloud.source, feats)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def compute_ray_map(pose: CameraPose, intrinsics: CameraIntrinsics) -> np.ndarray:
    """H x W x 6 array of (origin, unit direction) per pixel center."""
    u = np.arange(intrinsics.width) + 0.5
    v = np.arange(intrinsics.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    cam = np.stack([(uu - intrinsics.cx) / intrinsics.fx, (vv - intrinsics.cy) / intrinsics.fy, np.ones_like(uu)], -1)
    dirs = cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.translation, dirs.shape)
    return np.concatenate([origins, dirs], -1)


def sample_distances(cfg: RaySamplingConfig) -> tuple[np.ndarray, float]:
    delta = (cfg.far - cfg.near) / cfg.steps
    return cfg.near + (np.arange(cfg.steps) + 0.5) * delta, delta


class PointIndex:
    """KD-tree over cloud positions; neighbour sets depend on geometry only."""

    def __init__(self, positions: np.ndarray):
        self.positions = positions
        self.tree = cKDTree(positions) if len(positions) else None

    def query(self, points: np.ndarray, radius: float, k: int) -> tuple[np.ndarray, np.ndarray]:
        n = len(points)
        if self.tree is None:
            return np.full((n, k), np.inf), np.zeros((n, k), dtype=np.int64)
        dist, idx = self.tree.query(points, k=k, distance_upper_bound=radius)
        dist = dist.reshape(n, k)
        idx = idx.reshape(n, k)
        idx = np.where(np.isfinite(dist), idx, 0)
        return dist, idx


ROW_BLOCK = 1024


def _rowwise(fn, x: torch.Tensor, block: int = ROW_BLOCK) -> torch.Tensor:
    """Apply ``fn`` to zero-padded blocks of a fixed row count.

    GEMM reduction order and the vectorised/scalar split of some pointwise
    kernels depend on tensor length, so the same sample could get different
    bits in different ray batches.  Fixed-shape blocks keep every row's
    arithmetic identical whatever the batch size.
    """
    n = len(x)
    pad = (-n) % block
    if pad:
        x = torch.cat([x, x.new_zeros(pad, *x.shape[1:])])
    return torch.cat([fn(x[s : s + block]) for s in range(0, len(x), block)])[:n]


def render_rays(
    cloud: NeuralPointCloud,
    origins: np.ndarray,
    dirs: np.ndarray,
    params: NeuralGeometry,
    cfg: RaySamplingConfig,
    index: PointIndex | None = None,
    return_weights: bool = False,
):
    """Volume-render N rays with unit directions; returns (color N x 3, mask N)."""
    dtype = next(params.parameters()).dtype
    n_rays = len(origins)
    t, delta = sample_distances(cfg)
    samples = origins[:, None, :] + t[None, :, None] * dirs[:, None, :]  # N x S x 3
    flat = samples.reshape(-1, 3)
    index = index or PointIndex(cloud.positions)
    dist, idx = index.query(flat, cfg.radius, cfg.max_neighbors)
    hit = np.isfinite(dist)
    counts = hit.sum(1)
    mask_np = (counts.reshape(n_rays, cfg.steps) >= cfg.mask_threshold).any(1)

    n_samples = len(flat)
    sigma = torch.zeros(n_samples, dtype=dtype)
    rgb = torch.zeros(n_samples, 3, dtype=dtype)
    s_idx, k_idx = np.nonzero(hit)
    if len(s_idx):
        p_idx = idx[s_idx, k_idx]
        offsets = (flat[s_idx] - cloud.positions[p_idx]) / cfg.radius
        feats = cloud.features[torch.as_tensor(p_idx)]
        g = _rowwise(params.field.neighbor, torch.cat([feats, torch.as_tensor(offsets, dtype=dtype)], -1))
        w = torch.as_tensor(1.0 / (dist[s_idx, k_idx] + 1e-6), dtype=dtype)
        occupied, inverse = np.unique(s_idx, return_inverse=True)
        inv_t = torch.as_tensor(inverse)
        num = torch.zeros(len(occupied), g.shape[1], dtype=dtype).index_add(0, inv_t, w[:, None] * g)
        den = torch.zeros(len(occupied), dtype=dtype).index_add(0, inv_t, w)
        agg = num / den[:, None]
        occ = torch.as_tensor(occupied)
        sigma = sigma.index_put((occ,), _rowwise(lambda a: F.softplus(params.field.density(a)), agg)[:, 0] * params.density_scale)
        rgb = rgb.index_put((occ,), _rowwise(lambda a: torch.sigmoid(params.field.color(a)), agg))

    sigma = sigma.reshape(n_rays, cfg.steps)
    rgb = rgb.reshape(n_rays, cfg.steps, 3)
    tau = sigma * delta
    alpha = 1.0 - torch.exp(-tau)
    # exclusive prefix sum, shifted rather than subtracted so it stays monotone
    trans = torch.exp(-torch.cat([torch.zeros_like(tau[:, :1]), torch.cumsum(tau, dim=1)[:, :-1]], dim=1))
    weights = trans * alpha
    color = (weights[..., None] * rgb).sum(1)
    mask = torch.as_tensor(mask_np, dtype=dtype)
    color = color * mask[:, None]
    if return_weights:
        return color, mask, trans, weights
    return color, mask


def render_view(
    cloud: NeuralPointCloud,
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    params: NeuralGeometry,
    cfg: RaySamplingConfig,
    chunk: int = 4096,
    index: PointIndex | None = None,
) -> RenderedGuidance:
    rays = compute_ray_map(pose, intrinsics).reshape(-1, 6)
    index = index or PointIndex(cloud.positions)
    colors, masks = [], []
    for start in range(0, len(rays), chunk):
        c, m = render_rays(cloud, rays[start : start + chunk, :3], rays[start : start + chunk, 3:], params, cfg, index)
        colors.append(c)
        masks.append(m)
    h, w = intrinsics.height, intrinsics.width
    return RenderedGuidance(torch.cat(colors).reshape(h, w, 3), torch.cat(masks).reshape(h, w))


def masked_mse_loss(guidance: RenderedGuidance, target: View | np.ndarray | torch.Tensor) -> torch.Tensor:
    """Sum of squared masked color error divided by max(1, number of valid pixels)."""
    image = target.image if isinstance(target, View) else target
    image = torch.as_tensor(image, dtype=guidance.color.dtype)
    if image.shape != guidance.color.shape:
        raise ValueError(f"shape mismatch: rendered {tuple(guidance.color.shape)} vs target {tuple(image.shape)}")
    diff = (guidance.color - image) * guidance.mask[..., None]
    return (diff**2).sum() / torch.clamp(guidance.mask.sum(), min=1.0)


class GuidanceRenderer:
    """Frozen geometry bound to one observed set; renders guidance for any pose."""

    def __init__(self, observed: Sequence[View], intrinsics: CameraIntrinsics, params: NeuralGeometry, cfg: RaySamplingConfig, stride: int = 1):
        self.intrinsics = intrinsics
        self.params = params
        self.cfg = cfg
        with torch.no_grad():
            cloud = build_point_cloud(observed, intrinsics, stride)
            self.cloud = extract_point_features(cloud, observed, params) if len(cloud) else cloud
        self.index = PointIndex(self.cloud.positions)

    def render(self, pose: CameraPose) -> RenderedGuidance:
        if not len(self.cloud):
            h, w = self.intrinsics.height, self.intrinsics.width
            return RenderedGuidance(torch.zeros(h, w, 3), torch.zeros(h, w))
        with torch.no_grad():
            return render_view(self.cloud, pose, self.intrinsics, self.params, self.cfg, index=self.index)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class GeometryScene:
    views: list[View]
    intrinsics: CameraIntrinsics
    fixed_observed: list[int] | None = None
    exclude_targets: list[int] = field(default_factory=list)


def train_geometry(
    scenes: Sequence[GeometryScene],
    cfg: GeometryConfig,
    seed: int = 0,
    steps: int | None = None,
    params: NeuralGeometry | None = None,
    on_log: Callable[[int, dict], None] | None = None,
    on_checkpoint: Callable[[int, NeuralGeometry], None] | None = None,
    checkpoint_every: int = 0,
) -> NeuralGeometry:
    """Adam on the masked color regression over random observed subsets."""
    if not scenes or any(s.views[0].depth is None for s in scenes):
        raise ValueError("geometry training needs at least one scene with depth")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    params = params or NeuralGeometry.from_config(cfg)
    steps = cfg.train_steps if steps is None else steps
    rcfg = RaySamplingConfig.from_config(cfg)
    opt = torch.optim.Adam(params.parameters(), lr=cfg.lr)
    dtype = next(params.parameters()).dtype
    for step in range(1, steps + 1):
        scene = scenes[rng.integers(len(scenes))]
        if scene.fixed_observed is not None:
            obs_idx = list(scene.fixed_observed)
        else:
            obs_idx = sample_view_set(scene.views, min(cfg.n_obs, len(scene.views) - 1), rng).observed_indices
        observed = [scene.views[i] for i in obs_idx]
        cloud = build_point_cloud(observed, scene.intrinsics, cfg.stride)
        if not len(cloud):
            continue
        cloud = extract_point_features(cloud, observed, params)
        index = PointIndex(cloud.positions)
        candidates = [i for i in range(len(scene.views)) if i not in set(scene.exclude_targets)]
        targets = rng.choice(candidates, size=cfg.batch_size, replace=True)
        origins, dirs, colors = [], [], []
        for ti in targets:
            view = scene.views[ti]
            rays = compute_ray_map(view.pose, scene.intrinsics).reshape(-1, 6)
            pix = rng.choice(len(rays), size=cfg.rays_per_view, replace=False)
            origins.append(rays[pix, :3])
            dirs.append(rays[pix, 3:])
            colors.append(view.image.reshape(-1, 3)[pix])
        color, mask = render_rays(cloud, np.concatenate(origins), np.concatenate(dirs), params, rcfg, index)
        target = torch.as_tensor(np.concatenate(colors), dtype=dtype)
        loss = masked_mse_loss(RenderedGuidance(color, mask), target)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite geometry loss at step {step}")
        if not loss.requires_grad:  # no ray in the batch touched a point
            continue
        opt.zero_grad()
        loss.backward()
        opt.step()
        if on_log and (step % cfg.log_every == 0 or step == 1):
            on_log(step, {"loss": loss.item(), "valid_fraction": mask.mean().item()})
        if on_checkpoint and checkpoint_every and step % checkpoint_every == 0:
            on_checkpoint(step, params)
    return params
