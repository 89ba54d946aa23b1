"""Control-branch training: combined loss, mixed two-stage loop, checkpoints.

The backbone stays frozen throughout; only the control branch and the mask
decoder receive gradients. Injection during training always uses the
constant-1 modulation. All randomness (sample choice, degradation seeds,
timesteps, noise, stage-2 source draws) flows from one numpy generator so a
saved checkpoint resumes bit-compatibly in single-threaded mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .control import ControlBranch, MaskDecoder, make_fuse_fn, resize_mask
from .degradation import DegradationConfig, degrade
from .diffusion.backbone import TextEmbedder
from .diffusion.pretrain import backbone_param_digest, instantiate_backbone
from .diffusion.schedule import forward_noise
from .instruction import Task, render_training_instruction

CONTROL_FORMAT = "region-restore-control/v1"


class NonFiniteLoss(RuntimeError):
    pass


class DivergenceDetected(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 16
    lambda_mask: float = 0.5
    stage1_steps: int = 4000
    stage2_steps: int = 1000
    stage2_mix: float = 0.25  # probability of drawing a general-task sample
    seed: int = 0
    grad_clip: float = 1.0
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    mask_decoder_hidden: int = 32
    checkpoint_every: int = 1000
    log_every: int = 25
    deterministic: bool = True  # pin torch to one thread

    def __post_init__(self):
        if not 0.0 <= self.stage2_mix <= 1.0:
            raise ValueError(f"stage2_mix must be a probability, got {self.stage2_mix}")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.lambda_mask < 0:
            raise ValueError("lambda_mask must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["degradation"] = self.degradation.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "degradation" in d and isinstance(d["degradation"], dict):
            d["degradation"] = DegradationConfig.from_dict(d["degradation"])
        return TrainConfig(**d)

    @staticmethod
    def from_json_file(path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return TrainConfig.from_dict(json.load(fh))


def training_loss(eps, eps_hat, mask_logits, gt_mask, lambda_mask: float):
    """total = mean((eps - eps_hat)^2) + lambda * BCE(sigmoid(logits), gt).

    ``gt_mask`` must already live at the logits resolution with hard {0,1}
    values. Returns (total, diffusion_term, mask_term).
    """
    diffusion_term = torch.mean((eps - eps_hat) ** 2)
    mask_term = F.binary_cross_entropy_with_logits(mask_logits, gt_mask.to(mask_logits.dtype))
    total = diffusion_term + lambda_mask * mask_term
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"total={float(total.detach())}")
    return total, diffusion_term, mask_term


def draw_stage2_sources(rng: np.random.Generator, n: int, mix: float) -> np.ndarray:
    """Per-sample Bernoulli draw; True selects the general-task dataset."""
    return rng.random(n) < mix


def backbone_prompt_for(task: Task, caption: str) -> str:
    if task is Task.BOKEH_RESTORE:
        return f"{caption} in front of bokeh background"
    return caption


class Trainer:
    """Owns the trainable modules, optimizer, RNG, and metrics log."""

    def __init__(self, backbone_ckpt: dict, config: TrainConfig, metrics_path=None):
        if config.deterministic:
            torch.set_num_threads(1)
        self.config = config
        self.codec, self.embedder, self.backbone, self.schedule, _ = instantiate_backbone(
            backbone_ckpt
        )
        self.backbone_digest = backbone_param_digest(backbone_ckpt)
        torch.manual_seed(config.seed)
        self.control = ControlBranch(self.backbone)
        self.mask_decoder = MaskDecoder(
            self.backbone.cfg.n_sites,
            self.backbone.cfg.n_tokens,
            hidden=config.mask_decoder_hidden,
            groups=min(8, config.mask_decoder_hidden),
        )
        self.opt = torch.optim.AdamW(
            list(self.control.parameters()) + list(self.mask_decoder.parameters()),
            lr=config.learning_rate,
        )
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.bad_streak = 0
        self._embed_cache: dict = {}
        self.metrics_path = Path(metrics_path) if metrics_path else None
        if self.metrics_path:
            self.metrics_path.parent.mkdir(parents=True, exist_ok=True)

    # -- batch assembly ----------------------------------------------------

    def _embed(self, prompt: str) -> torch.Tensor:
        if prompt not in self._embed_cache:
            with torch.no_grad():
                self._embed_cache[prompt] = self.embedder(prompt)
        return self._embed_cache[prompt]

    def assemble_batch(self, triplets: Sequence, tasks: Sequence[Task]) -> dict:
        imgs = np.stack([np.asarray(t.image, dtype=np.float32) for t in triplets])
        masks = np.stack([t.mask.astype(np.float32) for t in triplets])
        lq = np.stack(
            [
                degrade(t.image, self.config.degradation, seed=int(self.rng.integers(0, 2**31)))
                for t in triplets
            ]
        )
        hq_t = torch.from_numpy(imgs).permute(0, 3, 1, 2)
        lq_t = torch.from_numpy(lq).permute(0, 3, 1, 2)
        with torch.no_grad():
            z0 = self.codec.encode(hq_t)
        t_idx = self.rng.integers(0, self.schedule.T, size=len(triplets))
        eps = torch.from_numpy(
            self.rng.standard_normal(size=tuple(z0.shape), dtype=np.float32)
        )
        z_t = forward_noise(z0, t_idx, eps, self.schedule)
        back_text = torch.stack(
            [self._embed(backbone_prompt_for(task, t.caption)) for task, t in zip(tasks, triplets)]
        )
        ctrl_text = torch.stack(
            [
                self._embed(render_training_instruction(task, t.caption))
                for task, t in zip(tasks, triplets)
            ]
        )
        gt_small = torch.stack(
            [
                (resize_mask(torch.from_numpy(m)[None, None], z0.shape[-2:])[0] >= 0.5).float()
                for m in masks
            ]
        )
        return {
            "lq": lq_t,
            "z0": z0,
            "t": torch.from_numpy(t_idx),
            "z_t": z_t,
            "eps": eps,
            "back_text": back_text,
            "ctrl_text": ctrl_text,
            "gt_mask_small": gt_small,
        }

    # -- optimization ------------------------------------------------------

    def train_step(self, batch: dict) -> dict:
        cfg = self.config
        feats, pyramid = self.control(batch["lq"], batch["ctrl_text"], batch["z_t"], batch["t"])
        logits = self.mask_decoder(pyramid)
        eps_hat, _ = self.backbone(
            batch["z_t"], batch["t"], batch["back_text"], fuse_fn=make_fuse_fn(feats, 1.0)
        )
        try:
            total, dterm, mterm = training_loss(
                batch["eps"], eps_hat, logits, batch["gt_mask_small"], cfg.lambda_mask
            )
        except NonFiniteLoss:
            self.bad_streak += 1
            if self.bad_streak >= 3:
                raise DivergenceDetected(f"3 consecutive non-finite losses at step {self.step}")
            self.step += 1
            return {"step": self.step, "skipped": True}
        self.bad_streak = 0
        self.opt.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(
            list(self.control.parameters()) + list(self.mask_decoder.parameters()), cfg.grad_clip
        )
        self.opt.step()
        with torch.no_grad():
            pred = (torch.sigmoid(logits) >= 0.5).float()
            gt = batch["gt_mask_small"]
            inter = (pred * gt).sum()
            union = ((pred + gt) > 0).float().sum()
            iou = float(inter / union) if float(union) > 0 else 1.0
        self.step += 1
        return {
            "step": self.step,
            "total": float(total.detach()),
            "diffusion_term": float(dterm.detach()),
            "mask_term": float(mterm.detach()),
            "mask_iou_estimate": iou,
        }

    def _log(self, record: dict) -> None:
        if self.metrics_path:
            with open(self.metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

    def run(
        self,
        general_ds: Sequence,
        bokeh_ds: Optional[Sequence],
        out_path=None,
        total_steps: Optional[int] = None,
    ) -> dict:
        """Stage 1 on the general set, then the stage-2 mixture; returns the
        final checkpoint dict (also written to ``out_path`` when given)."""
        cfg = self.config
        if len(general_ds) == 0:
            raise ValueError("general dataset is empty")
        if cfg.stage2_steps > 0 and (bokeh_ds is None or len(bokeh_ds) == 0):
            raise ValueError("stage 2 requested but bokeh dataset is empty")
        target = cfg.stage1_steps + cfg.stage2_steps if total_steps is None else total_steps
        while self.step < target:
            stage = 1 if self.step < cfg.stage1_steps else 2
            if stage == 1:
                idx = self.rng.integers(0, len(general_ds), size=cfg.batch_size)
                triplets = [general_ds[i] for i in idx]
                tasks = [Task.LOCAL_RESTORE] * cfg.batch_size
            else:
                use_general = draw_stage2_sources(self.rng, cfg.batch_size, cfg.stage2_mix)
                triplets, tasks = [], []
                for g in use_general:
                    ds = general_ds if g else bokeh_ds
                    triplets.append(ds[int(self.rng.integers(0, len(ds)))])
                    tasks.append(Task.LOCAL_RESTORE if g else Task.BOKEH_RESTORE)
            metrics = self.train_step(self.assemble_batch(triplets, tasks))
            metrics["stage"] = stage
            if metrics["step"] % cfg.log_every == 0 or metrics.get("skipped"):
                self._log(metrics)
            if out_path and cfg.checkpoint_every and metrics["step"] % cfg.checkpoint_every == 0:
                save_checkpoint(self.to_checkpoint(), out_path)
        ckpt = self.to_checkpoint()
        if out_path:
            save_checkpoint(ckpt, out_path)
        return ckpt

    # -- persistence ---------------------------------------------------------

    def to_checkpoint(self) -> dict:
        return {
            "format": CONTROL_FORMAT,
            "step": self.step,
            "config": self.config.to_dict(),
            "backbone_digest": self.backbone_digest,
            "state": {
                "control": self.control.state_dict(),
                "mask_decoder": self.mask_decoder.state_dict(),
            },
            "optimizer": self.opt.state_dict(),
            "rng_state": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }

    @staticmethod
    def resume(ckpt: dict, backbone_ckpt: dict, metrics_path=None) -> "Trainer":
        if ckpt.get("format") != CONTROL_FORMAT:
            raise ValueError(f"not a control checkpoint: {ckpt.get('format')!r}")
        trainer = Trainer(backbone_ckpt, TrainConfig.from_dict(ckpt["config"]), metrics_path)
        if ckpt["backbone_digest"] != trainer.backbone_digest:
            raise ValueError("checkpoint was trained against a different backbone")
        trainer.control.load_state_dict(ckpt["state"]["control"])
        trainer.mask_decoder.load_state_dict(ckpt["state"]["mask_decoder"])
        trainer.opt.load_state_dict(ckpt["optimizer"])
        trainer.rng.bit_generator.state = ckpt["rng_state"]
        torch.set_rng_state(ckpt["torch_rng"])
        trainer.step = ckpt["step"]
        return trainer


def save_checkpoint(ckpt: dict, path) -> None:
    torch.save(ckpt, path)


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CONTROL_FORMAT:
        raise ValueError(f"not a control checkpoint: {ckpt.get('format')!r}")
    return ckpt


def train_loop(
    general_ds: Sequence,
    bokeh_ds: Optional[Sequence],
    config: TrainConfig,
    backbone_ckpt: dict,
    out_path=None,
    metrics_path=None,
) -> dict:
    """Convenience wrapper: fresh trainer, full two-stage schedule."""
    trainer = Trainer(backbone_ckpt, config, metrics_path)
    return trainer.run(general_ds, bokeh_ds, out_path=out_path)
