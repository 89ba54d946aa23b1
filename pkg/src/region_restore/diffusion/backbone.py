"""Toy latent-diffusion backbone: text embedder, latent codec, and U-Net.

The U-Net runs at three resolutions (latent, /2, /4) with one cross-attention
layer per stage and exposes one injection site per decoder input: the middle
block output plus every encoder skip, coarse to fine. A control branch can
supply per-site addends through a caller-provided fusion rule; with no rule
the decoder consumes the base features unchanged.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    """Input dimensions incompatible with the model configuration."""


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    latent_channels: int = 8
    channels: tuple = (48, 64, 96)
    text_dim: int = 48
    n_tokens: int = 8
    vocab_size: int = 512
    time_dim: int = 128
    groups: int = 8

    @property
    def latent_size(self) -> int:
        return self.image_size // 4

    @property
    def n_levels(self) -> int:
        return len(self.channels)

    @property
    def n_sites(self) -> int:
        return self.n_levels + 1

    def site_shapes(self, latent_hw: Optional[tuple] = None) -> list:
        """(channels, H, W) per injection site, coarse to fine."""
        h, w = latent_hw or (self.latent_size, self.latent_size)
        n = self.n_levels
        shapes = [(self.channels[-1], h >> (n - 1), w >> (n - 1))]  # middle block
        for i in reversed(range(n)):  # encoder skips, coarse to fine
            shapes.append((self.channels[i], h >> i, w >> i))
        return shapes

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "latent_channels": self.latent_channels,
            "channels": list(self.channels),
            "text_dim": self.text_dim,
            "n_tokens": self.n_tokens,
            "vocab_size": self.vocab_size,
            "time_dim": self.time_dim,
            "groups": self.groups,
        }

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return BackboneConfig(**d)


PAD_TOKEN_ID = 0


def hash_token(token: str, vocab_size: int) -> int:
    """Stable token id in [1, vocab_size); 0 is reserved for padding."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % (vocab_size - 1) + 1


class TextEmbedder(nn.Module):
    """Whitespace tokenizer + hashed vocabulary lookup with fixed length."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.table = nn.Embedding(cfg.vocab_size, cfg.text_dim)

    def token_ids(self, prompt: str) -> torch.Tensor:
        toks = prompt.lower().split()[: self.cfg.n_tokens]
        ids = [hash_token(t, self.cfg.vocab_size) for t in toks]
        ids += [PAD_TOKEN_ID] * (self.cfg.n_tokens - len(ids))
        return torch.tensor(ids, dtype=torch.long)

    def forward(self, prompt: str) -> torch.Tensor:
        """(n_tokens, text_dim) embedding, deterministic for a given prompt."""
        ids = self.token_ids(prompt).to(self.table.weight.device)
        return self.table(ids)


class LatentCodec(nn.Module):
    """4x spatial-reduction convolutional autoencoder, deterministic encode."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.latent_channels
        g = cfg.groups
        self.enc = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.GroupNorm(g, 32), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.GroupNorm(g, 64), nn.SiLU(),
            nn.Conv2d(64, 64, 3, padding=1), nn.GroupNorm(g, 64), nn.SiLU(),
            nn.Conv2d(64, c, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(c, 64, 3, padding=1), nn.GroupNorm(g, 64), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(64, 64, 3, padding=1), nn.GroupNorm(g, 64), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(64, 32, 3, padding=1), nn.GroupNorm(g, 32), nn.SiLU(),
            nn.Conv2d(32, 3, 3, padding=1),
        )
        # Set after codec training so latents are roughly unit variance.
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape[-1] % 4 or image.shape[-2] % 4:
            raise ShapeError(f"image dims must be divisible by 4, got {tuple(image.shape)}")
        return self.enc(image) * self.latent_scale

    def decode(self, z: torch.Tensor, clip: bool = True) -> torch.Tensor:
        out = self.dec(z / self.latent_scale)
        return out.clamp(0.0, 1.0) if clip else out


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal embedding of integer timesteps (float64, cast by caller)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, device=t.device, dtype=torch.float64)
        / max(half - 1, 1)
    )
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin, cout, time_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Single-head cross-attention from pixels to text tokens.

    Returns the residual-updated features and the per-pixel softmax over
    tokens, shape (B, H, W, n_tokens), for attention-pyramid consumers.
    """

    def __init__(self, channels, text_dim, groups):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(text_dim, channels, bias=False)
        self.v = nn.Linear(text_dim, channels, bias=False)
        self.out = nn.Linear(channels, channels)
        self.scale = channels ** -0.5

    def forward(self, x, text):
        b, c, h, w = x.shape
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))        # (B, HW, C)
        k = self.k(text)                                            # (B, L, C)
        v = self.v(text)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)  # (B, HW, L)
        o = self.out(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + o, attn.reshape(b, h, w, -1)


class EncoderStage(nn.Module):
    def __init__(self, cin, cout, cfg: BackboneConfig):
        super().__init__()
        self.res = ResBlock(cin, cout, cfg.time_dim, cfg.groups)
        self.attn = CrossAttention(cout, cfg.text_dim, cfg.groups)

    def forward(self, x, temb, text):
        h, attn = self.attn(self.res(x, temb), text)
        return h, attn


FuseFn = Callable[[int, torch.Tensor], torch.Tensor]


class UNetBackbone(nn.Module):
    """Noise predictor with per-site feature injection in the decoder.

    ``forward`` returns the noise estimate and the base (pre-fusion) decoder
    features at every injection site, ordered coarse to fine: middle block
    output first, then encoder skips from deepest to shallowest.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim),
        )
        self.conv_in = nn.Conv2d(cfg.latent_channels, ch[0], 3, padding=1)
        self.enc = nn.ModuleList(
            [EncoderStage(ch[max(i - 1, 0)], ch[i], cfg) for i in range(len(ch))]
        )
        self.downs = nn.ModuleList(
            [nn.Conv2d(ch[i], ch[i], 3, stride=2, padding=1) for i in range(len(ch) - 1)]
        )
        self.mid1 = ResBlock(ch[-1], ch[-1], cfg.time_dim, cfg.groups)
        self.mid_attn = CrossAttention(ch[-1], cfg.text_dim, cfg.groups)
        self.mid2 = ResBlock(ch[-1], ch[-1], cfg.time_dim, cfg.groups)
        dec = []
        ups = []
        h_ch = ch[-1]
        for i in reversed(range(len(ch))):
            dec.append(EncoderStage(h_ch + ch[i], ch[i], cfg))
            h_ch = ch[i]
            if i > 0:
                ups.append(nn.Conv2d(ch[i], ch[i], 3, padding=1))
        self.dec = nn.ModuleList(dec)
        self.ups = nn.ModuleList(ups)
        self.norm_out = nn.GroupNorm(cfg.groups, ch[0])
        self.conv_out = nn.Conv2d(ch[0], cfg.latent_channels, 3, padding=1)

    def encode_stages(self, z, t, text):
        """Shared layout with the control branch clone: conv_in + encoder + middle.

        Returns (middle output, [skip_1..skip_n], time embedding).
        """
        if z.ndim != 4 or z.shape[1] != self.cfg.latent_channels:
            raise ShapeError(f"latent must be (B,{self.cfg.latent_channels},H,W), got {tuple(z.shape)}")
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(z.dtype))
        h = self.conv_in(z)
        skips = []
        for i, stage in enumerate(self.enc):
            h, _ = stage(h, temb, text)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        h, _ = self.mid_attn(self.mid1(h, temb), text)
        h = self.mid2(h, temb)
        return h, skips, temb

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        text: torch.Tensor,
        fuse_fn: Optional[FuseFn] = None,
    ):
        if text.ndim == 2:
            text = text[None].expand(z.shape[0], -1, -1)
        if not torch.is_tensor(t):
            t = torch.full((z.shape[0],), int(t), dtype=torch.long, device=z.device)
        mid, skips, temb = self.encode_stages(z, t, text)

        sites = [mid] + skips[::-1]
        fused = list(sites) if fuse_fn is None else [fuse_fn(i, f) for i, f in enumerate(sites)]

        h = fused[0]
        for j, stage in enumerate(self.dec):
            h, _ = stage(torch.cat([h, fused[j + 1]], dim=1), temb, text)
            if j < len(self.ups):
                h = self.ups[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        eps_hat = self.conv_out(F.silu(self.norm_out(h)))
        return eps_hat, sites
