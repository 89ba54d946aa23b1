"""Trainable control branch, cross-attention mask decoder, and feature fusion.

The control branch is a trainable copy of the backbone's conditioning
pathway (input conv, encoder stages, middle block). A small convolutional
stem folds the degraded image into the noisy-latent pathway at the first
block; zero-initialized per-site projections make the branch a no-op at the
start of training. Cross-attention maps from every stage feed a pyramidal
mask decoder; per-site modulation maps blend the user's two fidelity scales
inside/outside the predicted region before additive fusion.
"""

from __future__ import annotations

import copy
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion.backbone import BackboneConfig, ShapeError, UNetBackbone
from .imaging import resize_bilinear


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


class ControlBranch(nn.Module):
    """Copy of the backbone encoder + middle with an LQ stem and output taps.

    ``forward`` returns per-site conditional features (middle first, then
    encoder skips coarse to fine, matching the backbone's injection sites)
    and the softmax cross-attention pyramid from every stage, coarse to fine.
    """

    def __init__(self, backbone: UNetBackbone):
        super().__init__()
        cfg = backbone.cfg
        self.cfg = cfg
        self.time_mlp = copy.deepcopy(backbone.time_mlp)
        self.conv_in = copy.deepcopy(backbone.conv_in)
        self.enc = copy.deepcopy(backbone.enc)
        self.downs = copy.deepcopy(backbone.downs)
        self.mid1 = copy.deepcopy(backbone.mid1)
        self.mid_attn = copy.deepcopy(backbone.mid_attn)
        self.mid2 = copy.deepcopy(backbone.mid2)
        ch = cfg.channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(16, ch[0], 3, stride=2, padding=1), nn.SiLU(),
            zero_module(nn.Conv2d(ch[0], ch[0], 3, padding=1)),
        )
        site_ch = [ch[-1]] + list(reversed(ch))
        self.taps = nn.ModuleList([zero_module(nn.Conv2d(c, c, 1)) for c in site_ch])

    def forward(
        self,
        lq: torch.Tensor,
        control_text: torch.Tensor,
        z_t: torch.Tensor,
        t,
    ) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
        from .diffusion.backbone import timestep_embedding

        if lq.ndim != 4 or lq.shape[1] != 3:
            raise ShapeError(f"lq must be (B,3,H,W), got {tuple(lq.shape)}")
        if lq.shape[-2] != z_t.shape[-2] * 4 or lq.shape[-1] != z_t.shape[-1] * 4:
            raise ShapeError(
                f"lq spatial dims {tuple(lq.shape[-2:])} must be 4x latent {tuple(z_t.shape[-2:])}"
            )
        if control_text.ndim == 2:
            control_text = control_text[None].expand(z_t.shape[0], -1, -1)
        if not torch.is_tensor(t):
            t = torch.full((z_t.shape[0],), int(t), dtype=torch.long, device=z_t.device)
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(z_t.dtype))

        h = self.conv_in(z_t) + self.stem(lq)
        skips = []
        attns = []
        for i, stage in enumerate(self.enc):
            h, attn = stage(h, temb, control_text)
            skips.append(h)
            attns.append(attn)
            if i < len(self.downs):
                h = self.downs[i](h)
        h, mid_attn = self.mid_attn(self.mid1(h, temb), control_text)
        h = self.mid2(h, temb)

        sites = [h] + skips[::-1]
        features = [tap(f) for tap, f in zip(self.taps, sites)]
        pyramid = [mid_attn] + attns[::-1]
        return features, pyramid


class ConvGNReLU(nn.Module):
    def __init__(self, cin, cout, groups=8):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = nn.GroupNorm(groups, cout)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class MaskDecoder(nn.Module):
    """Pyramidal decoder over cross-attention maps, coarse to fine.

    Each scale runs two Conv-GN-ReLU blocks, upsamples, concatenates the next
    scale's raw attention maps, and merges them with one more block; a
    1-channel projection at the finest scale yields the mask logits.
    """

    def __init__(self, n_scales: int, n_tokens: int, hidden: int = 32, groups: int = 8):
        super().__init__()
        if n_scales < 2:
            raise ValueError("mask decoder needs at least 2 pyramid scales")
        self.pre = nn.ModuleList()
        self.merge = nn.ModuleList()
        for l in range(n_scales - 1):
            cin = n_tokens if l == 0 else hidden
            self.pre.append(
                nn.Sequential(ConvGNReLU(cin, hidden, groups), ConvGNReLU(hidden, hidden, groups))
            )
            self.merge.append(ConvGNReLU(hidden + n_tokens, hidden, groups))
        self.proj = nn.Conv2d(hidden, 1, 1)

    @staticmethod
    def _chw(attn: torch.Tensor) -> torch.Tensor:
        return attn.permute(0, 3, 1, 2)  # (B,H,W,L) -> (B,L,H,W)

    def forward(self, pyramid: Sequence[torch.Tensor]) -> torch.Tensor:
        x = self._chw(pyramid[0])
        for l in range(len(self.pre)):
            nxt = self._chw(pyramid[l + 1])
            x = self.pre[l](x)
            if x.shape[-2:] != nxt.shape[-2:]:
                x = F.interpolate(x, size=nxt.shape[-2:], mode="nearest")
            x = self.merge[l](torch.cat([x, nxt], dim=1))
        return self.proj(x)


def resize_mask(mask, target_hw):
    """Bilinear resize of a [0,1] map to (H, W), clipped back to [0,1].

    Accepts a 2-D numpy array or a (B,1,H,W)/(H,W) torch tensor and returns
    the same kind. Resizing to the current size is the identity.
    """
    th, tw = int(target_hw[0]), int(target_hw[1])
    if th < 1 or tw < 1:
        raise ValueError(f"target dims must be >= 1, got {(th, tw)}")
    if torch.is_tensor(mask):
        squeeze = mask.ndim == 2
        m = mask[None, None] if squeeze else mask
        if m.shape[-2:] != (th, tw):
            m = F.interpolate(m, size=(th, tw), mode="bilinear", align_corners=False)
            m = m.clamp(0.0, 1.0)
        else:
            m = m.clone()
        return m[0, 0] if squeeze else m
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"numpy mask must be 2-D, got shape {arr.shape}")
    if arr.shape == (th, tw):
        return arr.copy()
    return np.clip(resize_bilinear(arr, th, tw), 0.0, 1.0)


def modulation_map(mask_l, s1: float, s2: float):
    """Blend the two fidelity scales: s1 inside the mask, s2 outside.

    The affine blend is clamped to [min(s1, s2), max(s1, s2)] so the bound
    holds exactly despite rounding.
    """
    lo, hi = (s1, s2) if s1 <= s2 else (s2, s1)
    if torch.is_tensor(mask_l):
        out = s1 * mask_l + s2 * (1.0 - mask_l)
        return out.clamp(lo, hi)
    m = np.asarray(mask_l, dtype=np.float64)
    return np.clip(s1 * m + s2 * (1.0 - m), lo, hi)


def fuse(f_sd, f_cond, mod):
    """F_out = F_sd + mod * F_cond, with ``mod`` broadcast over channels."""
    if tuple(f_sd.shape) != tuple(f_cond.shape):
        raise ShapeError(f"feature shapes differ: {tuple(f_sd.shape)} vs {tuple(f_cond.shape)}")
    if torch.is_tensor(mod) and mod.shape[-2:] != f_sd.shape[-2:]:
        raise ShapeError(
            f"modulation spatial dims {tuple(mod.shape[-2:])} != features {tuple(f_sd.shape[-2:])}"
        )
    return f_sd + mod * f_cond


def make_fuse_fn(features: Sequence[torch.Tensor], modulations) -> callable:
    """Backbone fusion closure for one step.

    ``modulations`` is a per-site sequence of maps/scalars, or a single
    scalar applied everywhere (training uses 1.0).
    """
    if not isinstance(modulations, (list, tuple)):
        modulations = [modulations] * len(features)

    def fuse_fn(site: int, f_sd: torch.Tensor) -> torch.Tensor:
        return fuse(f_sd, features[site], modulations[site])

    return fuse_fn
