"""Preview assembly and the conv + transformer token generator.

Every preview stacks observed image, rendered guidance color, guidance mask,
ray map and an availability flag into 14 channels.  A strided conv net turns
each preview into a grid of patches; a segment embedding marks the preview
category (reference / probed / query).  All patches go through a non-causal
transformer encoder; a causal decoder with cross-attention to the encoder
output predicts the target view's codebook tokens one at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import TokenSequence
from .config import GeneratorConfig
from .geometry import RenderedGuidance, compute_ray_map
from .scene import CameraIntrinsics, CameraPose, ViewSet, interpolate_poses

CATEGORIES = ("reference", "probed", "query")
N_CHANNELS = 14


@dataclass
class Preview:
    guidance: RenderedGuidance
    ray_map: np.ndarray  # H x W x 6
    category: str
    observed_image: np.ndarray | None = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown preview category {self.category!r}")
        if (self.category == "reference") != (self.observed_image is not None):
            raise ValueError("reference previews need an observed image; probed/query previews must not have one")
        hw = tuple(self.guidance.color.shape[:2])
        if tuple(self.guidance.mask.shape) != hw or self.ray_map.shape[:2] != hw:
            raise ValueError("preview channels are not spatially aligned")
        if self.observed_image is not None and self.observed_image.shape[:2] != hw:
            raise ValueError("observed image size differs from guidance size")

    @property
    def availability(self) -> np.ndarray:
        h, w = self.ray_map.shape[:2]
        return np.full((h, w), float(self.observed_image is not None))

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """14 x H x W stack: image(3), guidance(3), mask(1), rays(6), availability(1)."""
        h, w = self.ray_map.shape[:2]
        image = self.observed_image if self.observed_image is not None else np.zeros((h, w, 3))
        parts = [
            torch.as_tensor(image, dtype=dtype),
            self.guidance.color.to(dtype),
            self.guidance.mask.to(dtype)[..., None],
            torch.as_tensor(self.ray_map, dtype=dtype),
            torch.as_tensor(self.availability, dtype=dtype)[..., None],
        ]
        return torch.cat(parts, -1).permute(2, 0, 1)


@dataclass
class PatchGroup:
    patches: torch.Tensor  # n_p x d_model
    category: str


@dataclass
class LatentContext:
    hidden: torch.Tensor  # M x d_model, or B x M x d_model


# ---------------------------------------------------------------------------
# Preview assembly
# ---------------------------------------------------------------------------


def probe_poses_between(observed_poses: Sequence[CameraPose], n_probed: int, seed: int = 0) -> list[CameraPose]:
    """Spread ``n_probed`` poses uniformly over consecutive observed-pose pairs.

    With a single observation the probes are small yaw/translation jitters of it.
    """
    if n_probed < 0:
        raise ValueError("n_probed must be >= 0")
    if n_probed == 0:
        return []
    if len(observed_poses) == 1:
        rng = np.random.default_rng(seed)
        base = observed_poses[0]
        out = []
        for _ in range(n_probed):
            yaw = rng.uniform(-0.2, 0.2)
            c, s = math.cos(yaw), math.sin(yaw)
            rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
            out.append(CameraPose(rz @ base.rotation, base.translation + rng.normal(0, 0.05, 3)))
        return out
    pairs = len(observed_poses) - 1
    counts = [n_probed // pairs + (1 if i < n_probed % pairs else 0) for i in range(pairs)]
    out = []
    for i, count in enumerate(counts):
        if count:
            out += interpolate_poses(observed_poses[i], observed_poses[i + 1], count)
    return out


def assemble_previews(
    view_set: ViewSet,
    render: Callable[[CameraPose], RenderedGuidance],
    intrinsics: CameraIntrinsics,
    n_probed: int,
    query_pose: CameraPose,
    probe_source: str = "interpolate",
    query_index: int | None = None,
    seed: int = 0,
) -> tuple[list[Preview], Preview]:
    """Reference previews for observed views, ``n_probed`` probed previews, one query.

    ``probe_source="novel"`` takes the probed poses from the novel views other
    than ``query_index`` (in index order) instead of interpolating.
    """
    if n_probed < 0:
        raise ValueError("n_probed must be >= 0")
    context = []
    for i in view_set.observed_indices:
        view = view_set.views[i]
        context.append(Preview(render(view.pose), compute_ray_map(view.pose, intrinsics), "reference", view.image))
    if probe_source == "interpolate":
        poses = probe_poses_between([v.pose for v in view_set.observed], n_probed, seed)
    elif probe_source == "novel":
        pool = [i for i in view_set.novel_indices if i != query_index]
        if len(pool) < n_probed:
            raise ValueError(f"only {len(pool)} novel poses available for {n_probed} probes")
        poses = [view_set.views[i].pose for i in pool[:n_probed]]
    else:
        raise ValueError(f"unknown probe source {probe_source!r}")
    for pose in poses:
        context.append(Preview(render(pose), compute_ray_map(pose, intrinsics), "probed"))
    query = Preview(render(query_pose), compute_ray_map(query_pose, intrinsics), "query")
    return context, query


def stack_previews(context: Sequence[Preview], query: Preview, dtype=torch.float32) -> tuple[torch.Tensor, list[int]]:
    """(P x 14 x H x W tensor, category ids) with the query last."""
    previews = list(context) + [query]
    x = torch.stack([p.to_tensor(dtype) for p in previews])
    return x, [CATEGORIES.index(p.category) for p in previews]


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class Attention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ValueError("d_model must be divisible by heads")
        self.heads = heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x, context=None, causal=False, return_weights=False):
        context = x if context is None else context
        b, n, d = x.shape
        m = context.shape[1]
        hd = d // self.heads
        q = self.q(x).view(b, n, self.heads, hd).transpose(1, 2)
        k = self.k(context).view(b, m, self.heads, hd).transpose(1, 2)
        v = self.v(context).view(b, m, self.heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if causal:
            blocked = torch.ones(n, m, dtype=torch.bool).triu(1)
            scores = scores.masked_fill(blocked, float("-inf"))
        weights = scores.softmax(-1)
        out = self.out((weights @ v).transpose(1, 2).reshape(b, n, d))
        return (out, weights) if return_weights else out


class FeedForward(nn.Sequential):
    def __init__(self, d_model: int, mult: int):
        super().__init__(nn.Linear(d_model, d_model * mult), nn.GELU(), nn.Linear(d_model * mult, d_model))


class EncoderLayer(nn.Module):
    def __init__(self, d_model, heads, ff_mult):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, ff_mult)

    def forward(self, x, return_weights=False):
        a, w = self.attn(self.norm1(x), return_weights=True)
        x = x + a
        x = x + self.ff(self.norm2(x))
        return (x, w) if return_weights else x


class DecoderLayer(nn.Module):
    def __init__(self, d_model, heads, ff_mult):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = Attention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = Attention(d_model, heads)
        self.norm3 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, ff_mult)

    def forward(self, x, h):
        x = x + self.self_attn(self.norm1(x), causal=True)
        x = x + self.cross_attn(self.norm2(x), context=h)
        return x + self.ff(self.norm3(x))


class PatchEmbedder(nn.Module):
    """Strided convs, each halving resolution; output cell = one patch.

    ``kernel`` is 4 (overlapping, padding 1) or 2 (non-overlapping).
    """

    def __init__(self, d_model: int, hidden: int, stride: int, kernel: int = 4):
        super().__init__()
        n = int(round(math.log2(stride)))
        if 2**n != stride or n < 1:
            raise ValueError("patch stride must be a power of two >= 2")
        if kernel not in (2, 4):
            raise ValueError("patch kernel must be 2 or 4")
        dims = [N_CHANNELS] + [hidden] * (n - 1) + [d_model]
        pad = (kernel - 2) // 2
        self.convs = nn.ModuleList(nn.Conv2d(a, b, kernel, stride=2, padding=pad) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.relu(x)
        return x


class ViewGenerator(nn.Module):
    def __init__(
        self,
        codebook_size: int,
        n_tokens: int,
        image_size: tuple[int, int] = (64, 64),
        d_model: int = 128,
        enc_layers: int = 4,
        dec_layers: int = 6,
        heads: int = 4,
        ff_mult: int = 4,
        embed_hidden: int = 64,
        patch_stride: int = 8,
        patch_kernel: int = 4,
    ):
        super().__init__()
        h, w = image_size
        if h % patch_stride or w % patch_stride:
            raise ValueError(f"image size {image_size} not divisible by patch stride {patch_stride}")
        self.image_size = (h, w)
        self.patch_stride = patch_stride
        self.n_patches = (h // patch_stride) * (w // patch_stride)
        self.codebook_size = codebook_size
        self.n_tokens = n_tokens
        self.embedder = PatchEmbedder(d_model, embed_hidden, patch_stride, patch_kernel)
        self.segment = nn.Parameter(torch.randn(3, d_model) * 0.02)
        self.patch_pos = nn.Parameter(torch.randn(self.n_patches, d_model) * 0.02)
        self.encoder = nn.ModuleList(EncoderLayer(d_model, heads, ff_mult) for _ in range(enc_layers))
        self.enc_norm = nn.LayerNorm(d_model)
        self.token_embed = nn.Embedding(codebook_size, d_model)
        self.sos = nn.Parameter(torch.randn(d_model) * 0.02)
        self.token_pos = nn.Parameter(torch.randn(n_tokens, d_model) * 0.02)
        self.decoder = nn.ModuleList(DecoderLayer(d_model, heads, ff_mult) for _ in range(dec_layers))
        self.dec_norm = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, codebook_size)

    @classmethod
    def from_config(cls, cfg: GeneratorConfig, codebook_size: int, n_tokens: int, image_size: tuple[int, int]) -> "ViewGenerator":
        return cls(
            codebook_size, n_tokens, image_size, cfg.d_model, cfg.enc_layers, cfg.dec_layers,
            cfg.heads, cfg.ff_mult, cfg.embed_hidden, cfg.patch_stride, cfg.patch_kernel,
        )

    @property
    def dtype(self):
        return self.segment.dtype

    def conv_patches(self, x: torch.Tensor) -> torch.Tensor:
        """N x 14 x H x W -> N x n_p x d (no embeddings added)."""
        return self.embedder(x).flatten(2).transpose(1, 2)

    def embed(self, previews: torch.Tensor, categories: Sequence[int]) -> torch.Tensor:
        """B x P x 14 x H x W -> B x (P * n_p) x d with segment and position embeddings."""
        b, p = previews.shape[:2]
        patches = self.conv_patches(previews.flatten(0, 1)).view(b, p, -1, self.segment.shape[1])
        seg = self.segment[torch.as_tensor(list(categories))]
        patches = patches + seg[None, :, None, :] + self.patch_pos[None, None]
        return patches.flatten(1, 2)

    def encode(self, patches: torch.Tensor, return_attention: bool = False):
        x = patches
        attn = []
        for layer in self.encoder:
            x, w = layer(x, return_weights=True)
            attn.append(w)
        x = self.enc_norm(x)
        return (x, attn) if return_attention else x

    def decode_logits(self, prefix: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        """Logits for positions 1..L+1 given prefix tokens (B x L, may be empty)."""
        b = h.shape[0]
        x = self.sos.expand(b, 1, -1)
        if prefix.shape[1]:
            x = torch.cat([x, self.token_embed(prefix)], 1)
        x = x + self.token_pos[: x.shape[1]]
        for layer in self.decoder:
            x = layer(x, h)
        return self.head(self.dec_norm(x))

    def forward(self, previews, categories, tokens):
        h = self.encode(self.embed(previews, categories))
        return self.decode_logits(tokens[:, :-1], h)


# ---------------------------------------------------------------------------
# Functional surface
# ---------------------------------------------------------------------------


def embed_preview(preview: Preview, params: ViewGenerator) -> PatchGroup:
    x = preview.to_tensor(params.dtype)
    if tuple(x.shape[1:]) != params.image_size:
        raise ValueError(f"preview size {tuple(x.shape[1:])} does not match generator size {params.image_size}")
    patches = params.embed(x[None, None], [CATEGORIES.index(preview.category)])[0]
    return PatchGroup(patches, preview.category)


def encode_context(groups: Sequence[PatchGroup], params: ViewGenerator, return_attention: bool = False):
    if not groups:
        raise ValueError("need at least one patch group")
    n_query = sum(g.category == "query" for g in groups)
    if n_query != 1:
        raise ValueError(f"expected exactly one query group, got {n_query}")
    seq = torch.cat([g.patches for g in groups])[None]
    out = params.encode(seq, return_attention=return_attention)
    if return_attention:
        h, attn = out
        return LatentContext(h[0]), attn
    return LatentContext(out[0])


def _batched(tokens, h: LatentContext, params: ViewGenerator) -> tuple[torch.Tensor, torch.Tensor, bool]:
    if isinstance(tokens, TokenSequence):
        tokens = tokens.tokens
    tok = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    hid = h.hidden if isinstance(h, LatentContext) else h
    single = tok.ndim == 1
    if single:
        tok = tok[None]
    if hid.ndim == 2:
        hid = hid[None].expand(tok.shape[0], -1, -1)
    if tok.numel() and (tok.min() < 0 or tok.max() >= params.codebook_size):
        raise ValueError(f"token out of range [0, {params.codebook_size})")
    if tok.shape[1] > params.n_tokens:
        raise ValueError(f"sequence longer than {params.n_tokens} tokens")
    return tok, hid, single


def token_logprobs(tokens, h: LatentContext, params: ViewGenerator) -> torch.Tensor:
    """T x K log-probabilities; row t is log p(. | s_<t, h)."""
    tok, hid, single = _batched(tokens, h, params)
    logits = params.decode_logits(tok[:, :-1], hid)
    out = logits.log_softmax(-1)
    return out[0] if single else out


def sequence_nll(tokens, h: LatentContext, params: ViewGenerator) -> dict[str, torch.Tensor]:
    tok, hid, _ = _batched(tokens, h, params)
    logp = token_logprobs(tok, LatentContext(hid), params)
    picked = logp.gather(-1, tok[..., None])[..., 0]
    total = -picked.sum(-1)
    return {"sum": total.sum(), "per_token": total.sum() / tok.numel(), "per_sequence": total}


def sample_tokens(
    h: LatentContext,
    params: ViewGenerator,
    T: int | None = None,
    mode: str = "multinomial",
    temperature: float = 1.0,
    seed: int = 0,
    n_samples: int | None = None,
    grid_shape: tuple[int, int] | None = None,
):
    """Draw token sequences autoregressively.

    With a single context and ``n_samples=None`` returns a TokenSequence;
    otherwise an (n, T) int64 array, one row per draw.
    """
    if mode not in ("greedy", "multinomial"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if mode == "multinomial" and not temperature > 0:
        raise ValueError("temperature must be > 0")
    T = params.n_tokens if T is None else T
    hid = h.hidden if isinstance(h, LatentContext) else h
    if hid.ndim == 2:
        hid = hid[None]
    if n_samples is not None:
        hid = hid.expand(n_samples, -1, -1) if hid.shape[0] == 1 else hid
    gen = torch.Generator().manual_seed(seed)
    b = hid.shape[0]
    seq = torch.zeros(b, 0, dtype=torch.long)
    with torch.no_grad():
        for _ in range(T):
            logits = params.decode_logits(seq, hid)[:, -1]
            if mode == "greedy":
                nxt = logits.argmax(-1)
            else:
                probs = (logits.double() / temperature).softmax(-1)
                nxt = torch.multinomial(probs, 1, generator=gen)[:, 0]
            seq = torch.cat([seq, nxt[:, None]], 1)
    out = seq.numpy()
    if n_samples is None and b == 1:
        side = int(math.isqrt(T))
        grid = grid_shape or ((side, side) if side * side == T else (1, T))
        return TokenSequence(out[0], grid)
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class GeneratorExample:
    previews: torch.Tensor  # P x 14 x H x W, query last
    categories: list[int]
    tokens: np.ndarray  # (T,)


def train_generator(
    examples: Sequence[GeneratorExample] | Callable[[np.random.Generator], GeneratorExample],
    params: ViewGenerator,
    cfg: GeneratorConfig,
    seed: int = 0,
    steps: int | None = None,
    on_log: Callable[[int, dict], None] | None = None,
    on_checkpoint: Callable[[int, ViewGenerator], None] | None = None,
    checkpoint_every: int = 0,
) -> ViewGenerator:
    """Teacher-forced NLL minimisation with Adam.

    ``examples`` is either a fixed list (batches drawn without replacement) or a callable
    drawing a fresh example from the given RNG.  Every example in one batch
    must have the same preview categories.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    steps = cfg.train_steps if steps is None else steps
    opt = torch.optim.Adam(params.parameters(), lr=cfg.lr)
    for step in range(1, steps + 1):
        if callable(examples):
            batch = [examples(rng) for _ in range(cfg.batch_size)]
        else:
            idx = rng.choice(len(examples), size=min(cfg.batch_size, len(examples)), replace=False)
            batch = [examples[i] for i in idx]
        cats = batch[0].categories
        if any(ex.categories != cats for ex in batch):
            raise ValueError("batch mixes different preview layouts")
        x = torch.stack([ex.previews for ex in batch]).to(params.dtype)
        tok = torch.as_tensor(np.stack([ex.tokens for ex in batch]), dtype=torch.long)
        h = params.encode(params.embed(x, cats))
        nll = sequence_nll(tok, LatentContext(h), params)
        loss = nll["per_token"]
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite generator loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if on_log and (step % cfg.log_every == 0 or step == 1):
            on_log(step, {"nll_per_token": loss.item()})
        if on_checkpoint and checkpoint_every and step % checkpoint_every == 0:
            on_checkpoint(step, params)
    return params
