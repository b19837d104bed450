"""VQ autoencoder mapping images to grids of codebook tokens and back.

Plain VQ-VAE objective (reconstruction + codebook + commitment) with a
straight-through estimator across the nearest-codeword lookup.  Codebook
entries left unused for a whole epoch are re-seeded from encoder outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import CodecConfig


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (T,) int64
    grid_shape: tuple[int, int]

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if len(self.tokens) != self.grid_shape[0] * self.grid_shape[1]:
            raise ValueError(f"{len(self.tokens)} tokens do not fill a {self.grid_shape} grid")

    def __len__(self) -> int:
        return len(self.tokens)

    def validate(self, codebook_size: int) -> None:
        if len(self.tokens) and (self.tokens.min() < 0 or self.tokens.max() >= codebook_size):
            raise ValueError(f"token out of range [0, {codebook_size})")


def _n_down(factor: int) -> int:
    n = int(round(math.log2(factor)))
    if 2**n != factor or n < 0:
        raise ValueError(f"downsampling factor must be a power of two, got {factor}")
    return n


class Encoder(nn.Module):
    def __init__(self, hidden: int, code_dim: int, downsample: int):
        super().__init__()
        layers: list[nn.Module] = []
        c = 3
        for _ in range(_n_down(downsample)):
            layers += [nn.Conv2d(c, hidden, 4, stride=2, padding=1), nn.ReLU()]
            c = hidden
        layers += [nn.Conv2d(c, hidden, 3, padding=1), nn.ReLU(), nn.Conv2d(hidden, code_dim, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, hidden: int, code_dim: int, downsample: int):
        super().__init__()
        n = _n_down(downsample)
        layers: list[nn.Module] = [nn.Conv2d(code_dim, hidden, 3, padding=1), nn.ReLU()]
        for i in range(n):
            last = i == n - 1
            layers.append(nn.ConvTranspose2d(hidden, 3 if last else hidden, 4, stride=2, padding=1))
            if not last:
                layers.append(nn.ReLU())
        if n == 0:
            layers.append(nn.Conv2d(hidden, 3, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return torch.sigmoid(self.net(z))


class VQCodec(nn.Module):
    def __init__(self, codebook_size: int = 512, code_dim: int = 64, downsample: int = 8, hidden: int = 64, beta: float = 0.25):
        super().__init__()
        if codebook_size < 2:
            raise ValueError("codebook needs at least 2 entries")
        self.downsample = downsample
        self.beta = beta
        self.encoder = Encoder(hidden, code_dim, downsample)
        self.decoder = Decoder(hidden, code_dim, downsample)
        self.codebook = nn.Parameter(torch.empty(codebook_size, code_dim).uniform_(-1 / codebook_size, 1 / codebook_size))

    @classmethod
    def from_config(cls, cfg: CodecConfig) -> "VQCodec":
        return cls(cfg.codebook_size, cfg.code_dim, cfg.downsample, cfg.hidden, cfg.beta)

    @property
    def codebook_size(self) -> int:
        return self.codebook.shape[0]

    def encode_latents(self, images: torch.Tensor) -> torch.Tensor:
        """B x 3 x H x W -> B x h x w x d."""
        h, w = images.shape[-2:]
        f = self.downsample
        if h % f or w % f:
            pad_h, pad_w = (-h) % f, (-w) % f
            raise ValueError(f"image size {h}x{w} not divisible by {f}; pad by ({pad_h}, {pad_w}) pixels")
        return self.encoder(images).permute(0, 2, 3, 1)

    def decode_latents(self, z: torch.Tensor) -> torch.Tensor:
        """B x h x w x d -> B x 3 x H x W."""
        return self.decoder(z.permute(0, 3, 1, 2))


def quantize(latents: torch.Tensor, codebook: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest codeword per row of ``latents`` (..., d).

    Returns (tokens, quantized) where ``quantized`` carries the straight-through
    gradient: its value is the codeword, its gradient flows to ``latents``.
    Exact ties resolve to the lowest index.
    """
    flat = latents.reshape(-1, latents.shape[-1])
    dist = torch.cdist(flat.detach(), codebook.detach(), compute_mode="donot_use_mm_for_euclid_dist")
    tokens = torch.argmin(dist, dim=1)
    codes = codebook[tokens].reshape(latents.shape)
    quantized = latents + (codes - latents).detach()
    return tokens.reshape(latents.shape[:-1]), quantized


def _image_tensor(image, dtype) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image), dtype=dtype)
    if x.ndim == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2)


def encode_image(image: np.ndarray, params: VQCodec) -> TokenSequence:
    """H x W x 3 image -> tokens on an (H/f, W/f) grid."""
    dtype = params.codebook.dtype
    with torch.no_grad():
        z = params.encode_latents(_image_tensor(image, dtype))
        tokens, _ = quantize(z, params.codebook)
    grid = tuple(tokens.shape[1:])
    return TokenSequence(tokens[0].reshape(-1).numpy(), grid)


def encode_images(images: np.ndarray, params: VQCodec) -> np.ndarray:
    """Batch version: N x H x W x 3 -> N x T token array."""
    with torch.no_grad():
        z = params.encode_latents(_image_tensor(images, params.codebook.dtype))
        tokens, _ = quantize(z, params.codebook)
    return tokens.reshape(len(images), -1).numpy()


def decode_tokens(tokens: TokenSequence, params: VQCodec) -> np.ndarray:
    tokens.validate(params.codebook_size)
    with torch.no_grad():
        idx = torch.as_tensor(tokens.tokens).reshape(1, *tokens.grid_shape)
        out = params.decode_latents(params.codebook[idx])
    return out[0].permute(1, 2, 0).numpy()


def codec_loss(images, params: VQCodec) -> dict[str, torch.Tensor]:
    """Reconstruction + codebook + beta * commitment, each a mean squared error."""
    x = images if isinstance(images, torch.Tensor) else _image_tensor(images, params.codebook.dtype)
    z_e = params.encode_latents(x)
    tokens, z_st = quantize(z_e, params.codebook)
    z_q = params.codebook[tokens]
    recon = params.decoder(z_st.permute(0, 3, 1, 2))
    rec = F.mse_loss(recon, x)
    cb = F.mse_loss(z_q, z_e.detach())
    commit = params.beta * F.mse_loss(z_e, z_q.detach())
    return {"loss": rec + cb + commit, "recon": rec, "codebook": cb, "commitment": commit, "tokens": tokens}


def train_codec(
    images: np.ndarray,
    cfg: CodecConfig,
    seed: int = 0,
    steps: int | None = None,
    params: VQCodec | None = None,
    on_log: Callable[[int, dict], None] | None = None,
    on_checkpoint: Callable[[int, VQCodec], None] | None = None,
    checkpoint_every: int = 0,
) -> VQCodec:
    images = np.asarray(images)
    if len(images) < 1:
        raise ValueError("codec training needs at least one image")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    params = params or VQCodec.from_config(cfg)
    steps = cfg.train_steps if steps is None else steps
    dtype = params.codebook.dtype
    data = _image_tensor(images, dtype)
    opt = torch.optim.Adam(params.parameters(), lr=cfg.lr)
    batch = min(cfg.batch_size, len(images))
    epoch_len = max(1, math.ceil(len(images) / batch))
    usage = torch.zeros(params.codebook_size, dtype=torch.long)
    for step in range(1, steps + 1):
        idx = rng.choice(len(images), size=batch, replace=len(images) < batch)
        out = codec_loss(data[idx], params)
        loss = out["loss"]
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite codec loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        usage += torch.bincount(out["tokens"].reshape(-1), minlength=params.codebook_size)
        if step % epoch_len == 0:
            dead = torch.nonzero(usage == 0)[:, 0]
            if len(dead):
                with torch.no_grad():
                    z = params.encode_latents(data[idx]).reshape(-1, params.codebook.shape[1])
                    pick = torch.as_tensor(rng.integers(len(z), size=len(dead)))
                    params.codebook[dead] = z[pick] + 1e-3 * torch.randn(len(dead), z.shape[1], dtype=dtype)
            usage.zero_()
        if on_log and (step % cfg.log_every == 0 or step == 1):
            on_log(step, {k: v.item() for k, v in out.items() if k != "tokens"})
        if on_checkpoint and checkpoint_every and step % checkpoint_every == 0:
            on_checkpoint(step, params)
    return params


def reconstruct(images: Sequence[np.ndarray], params: VQCodec) -> np.ndarray:
    """encode -> decode round trip for a batch of H x W x 3 images."""
    with torch.no_grad():
        z = params.encode_latents(_image_tensor(np.stack(images), params.codebook.dtype))
        _, zq = quantize(z, params.codebook)
        return params.decode_latents(zq).permute(0, 2, 3, 1).numpy()
