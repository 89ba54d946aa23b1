"""Backbone pretraining: codec reconstruction, then latent diffusion.

Produces the frozen checkpoint every later stage builds on. Phase A trains
the autoencoder with plain reconstruction MSE; a scalar latent scale is then
fit so latents are roughly unit variance; phase B trains the U-Net and text
embedding with the standard noise-prediction loss on frozen-codec latents.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .backbone import BackboneConfig, LatentCodec, TextEmbedder, UNetBackbone
from .schedule import forward_noise, make_cosine_schedule

BACKBONE_FORMAT = "region-restore-backbone/v1"


class DivergenceDetected(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class PretrainConfig:
    model: BackboneConfig = field(default_factory=BackboneConfig)
    T: int = 1000
    codec_steps: int = 3500
    diffusion_steps: int = 2000
    batch_size: int = 16
    codec_lr: float = 2e-3
    # (step, lr) pairs applied in order while the codec phase runs
    codec_lr_decay: tuple = ((1500, 5e-4), (2800, 2e-4))
    diffusion_lr: float = 1e-3
    ema_decay: float = 0.98


def _to_batch(dataset, idx, device=None) -> torch.Tensor:
    imgs = np.stack([np.asarray(dataset[i].image, dtype=np.float32) for i in idx])
    return torch.from_numpy(imgs).permute(0, 3, 1, 2)


def _embed_prompts(embedder: TextEmbedder, prompts: Sequence[str]) -> torch.Tensor:
    return torch.stack([embedder(p) for p in prompts])


def pretrain_backbone(dataset, config: PretrainConfig, seed: int) -> dict:
    """Train codec + text embedding + U-Net on HQ images; returns a checkpoint dict.

    ``dataset`` is any indexable of records with ``.image`` (H, W, 3 floats in
    [0, 1]) and ``.caption`` attributes.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    cfg = config.model

    codec = LatentCodec(cfg)
    embedder = TextEmbedder(cfg)
    unet = UNetBackbone(cfg)
    schedule = make_cosine_schedule(config.T)

    # Phase A: codec reconstruction.
    opt = torch.optim.Adam(codec.parameters(), lr=config.codec_lr)
    decay = {int(s): lr for s, lr in config.codec_lr_decay}
    codec_curve = []
    for step in range(config.codec_steps):
        if step in decay:
            for group in opt.param_groups:
                group["lr"] = decay[step]
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        x = _to_batch(dataset, idx)
        recon = codec.dec(codec.enc(x))
        loss = torch.mean((recon - x) ** 2)
        if not torch.isfinite(loss):
            raise DivergenceDetected(f"codec loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 10 == 0:
            codec_curve.append(float(loss.detach()))

    # Fit the latent scale on a sample so diffusion sees ~unit-variance latents.
    with torch.no_grad():
        idx = rng.integers(0, len(dataset), size=min(len(dataset), 256))
        z_raw = codec.enc(_to_batch(dataset, idx))
        codec.latent_scale.fill_(1.0 / max(float(z_raw.std()), 1e-8))
    codec.requires_grad_(False)
    codec.eval()

    # Phase B: noise prediction on frozen-codec latents.
    opt = torch.optim.AdamW(
        list(unet.parameters()) + list(embedder.parameters()), lr=config.diffusion_lr
    )
    ema = None
    first_ema = None
    diff_curve = []
    for step in range(config.diffusion_steps):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        x = _to_batch(dataset, idx)
        with torch.no_grad():
            z0 = codec.encode(x)
        t = torch.from_numpy(rng.integers(0, config.T, size=config.batch_size))
        eps = torch.randn_like(z0)
        z_t = forward_noise(z0, t.numpy(), eps, schedule)
        text = _embed_prompts(embedder, [dataset[i].caption for i in idx])
        eps_hat, _ = unet(z_t, t, text)
        loss = torch.mean((eps - eps_hat) ** 2)
        if not torch.isfinite(loss):
            raise DivergenceDetected(f"diffusion loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        val = float(loss.detach())
        ema = val if ema is None else config.ema_decay * ema + (1 - config.ema_decay) * val
        if first_ema is None and step == min(24, config.diffusion_steps - 1):
            first_ema = ema
        if step % 10 == 0:
            diff_curve.append(ema)

    return {
        "format": BACKBONE_FORMAT,
        "config": cfg.to_dict(),
        "T": config.T,
        "alpha_bar": schedule.alpha_bar,
        "seed": seed,
        "state": {
            "codec": codec.state_dict(),
            "text": embedder.state_dict(),
            "unet": unet.state_dict(),
        },
        "curves": {
            "codec": codec_curve,
            "diffusion_ema": diff_curve,
            "diffusion_initial_ema": first_ema,
            "diffusion_final_ema": ema,
        },
    }


def save_backbone(ckpt: dict, path) -> None:
    torch.save(ckpt, path)


def load_backbone(path) -> tuple:
    """Returns (codec, embedder, unet, schedule, raw checkpoint dict), frozen."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != BACKBONE_FORMAT:
        raise ValueError(f"not a backbone checkpoint: {ckpt.get('format')!r}")
    return instantiate_backbone(ckpt)


def instantiate_backbone(ckpt: dict) -> tuple:
    from .schedule import NoiseSchedule

    cfg = BackboneConfig.from_dict(ckpt["config"])
    codec, embedder, unet = LatentCodec(cfg), TextEmbedder(cfg), UNetBackbone(cfg)
    codec.load_state_dict(ckpt["state"]["codec"])
    embedder.load_state_dict(ckpt["state"]["text"])
    unet.load_state_dict(ckpt["state"]["unet"])
    for m in (codec, embedder, unet):
        m.requires_grad_(False)
        m.eval()
    if "alpha_bar" in ckpt:
        schedule = NoiseSchedule(T=ckpt["T"], alpha_bar=ckpt["alpha_bar"])
    else:
        schedule = make_cosine_schedule(ckpt["T"])
    return codec, embedder, unet, schedule, ckpt


def backbone_param_digest(ckpt_or_state: dict) -> str:
    """Order-independent digest of all backbone parameter bytes."""
    state = ckpt_or_state.get("state", ckpt_or_state)
    h = hashlib.sha256()
    for part in sorted(state):
        sd = state[part]
        for name in sorted(sd):
            h.update(name.encode())
            h.update(sd[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()
