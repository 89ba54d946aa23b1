"""User-facing restore pipeline: parse -> prompts -> mask -> modulated
sampling -> decode.

The region mask is predicted once at the first (largest) sampling step and
its per-site modulation maps are reused for the whole trajectory; pass
``mask_per_step=True`` to recompute both every step. Everything is
deterministic given the request seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch

from .control import ControlBranch, MaskDecoder, make_fuse_fn, modulation_map, resize_mask
from .diffusion.backbone import ShapeError
from .diffusion.pretrain import backbone_param_digest, instantiate_backbone
from .diffusion.sampler import ddim_sample, strided_timesteps
from .instruction import Instruction, PromptPair, derive_prompts, parse_inference_instruction
from .training import CONTROL_FORMAT, TrainConfig


class CheckpointMismatch(RuntimeError):
    pass


@dataclass
class RestoreRequest:
    lq_image: np.ndarray  # (H, W, 3) in [0, 1], dims divisible by 4
    instruction_text: str
    steps: int = 50
    seed: int = 0
    mask_per_step: bool = False
    mask_override: Optional[np.ndarray] = None  # [0,1] map, any resolution


@dataclass
class RestoreResult:
    output_image: np.ndarray
    predicted_mask: np.ndarray  # input resolution, [0, 1]
    prompts: PromptPair
    instruction: Instruction
    modulation_stats: List[dict]
    seed: int
    steps: int


class RestorePipeline:
    """Loads one backbone + control checkpoint pair and serves requests."""

    def __init__(self, backbone_ckpt: dict, control_ckpt: dict):
        self.codec, self.embedder, self.backbone, self.schedule, _ = instantiate_backbone(
            backbone_ckpt
        )
        if control_ckpt.get("format") != CONTROL_FORMAT:
            raise CheckpointMismatch(f"not a control checkpoint: {control_ckpt.get('format')!r}")
        digest = backbone_param_digest(backbone_ckpt)
        if control_ckpt["backbone_digest"] != digest:
            raise CheckpointMismatch("control checkpoint references a different backbone")
        self.config = TrainConfig.from_dict(control_ckpt["config"])
        self.control = ControlBranch(self.backbone)
        self.control.load_state_dict(control_ckpt["state"]["control"])
        self.mask_decoder = MaskDecoder(
            self.backbone.cfg.n_sites,
            self.backbone.cfg.n_tokens,
            hidden=self.config.mask_decoder_hidden,
            groups=min(8, self.config.mask_decoder_hidden),
        )
        self.mask_decoder.load_state_dict(control_ckpt["state"]["mask_decoder"])
        for m in (self.control, self.mask_decoder):
            m.requires_grad_(False)
            m.eval()
        self.checkpoint_id = control_ckpt["backbone_digest"][:12] + f"-{control_ckpt['step']}"

    # ------------------------------------------------------------------

    def _check_image(self, img: np.ndarray) -> torch.Tensor:
        arr = np.asarray(img, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[-1] != 3:
            raise ShapeError(f"expected (H,W,3) image, got {arr.shape}")
        if arr.shape[0] % 4 or arr.shape[1] % 4:
            raise ShapeError(f"image dims must be divisible by 4, got {arr.shape[:2]}")
        if float(arr.min()) < 0.0 or float(arr.max()) > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        return torch.from_numpy(arr).permute(2, 0, 1)[None]

    def _init_latent(self, hw, seed: int) -> torch.Tensor:
        shape = (1, self.backbone.cfg.latent_channels, hw[0] // 4, hw[1] // 4)
        gen = torch.Generator().manual_seed(int(seed))
        return torch.randn(shape, generator=gen, dtype=torch.float32)

    def _predict_mask(self, lq_t, ctrl_text, z, t) -> torch.Tensor:
        feats, pyramid = self.control(lq_t, ctrl_text, z, t)
        logits = self.mask_decoder(pyramid)
        return torch.sigmoid(logits)

    def _site_modulations(self, mask_latent: torch.Tensor, s1: float, s2: float, latent_hw):
        mods = []
        for _, h, w in self.backbone.cfg.site_shapes(latent_hw):
            m = resize_mask(mask_latent, (h, w))
            mods.append(modulation_map(m, s1, s2))
        return mods

    # ------------------------------------------------------------------

    def restore(self, req: RestoreRequest) -> RestoreResult:
        instr = parse_inference_instruction(req.instruction_text)
        prompts = derive_prompts(instr)
        lq_t = self._check_image(req.lq_image)
        h, w = lq_t.shape[-2:]
        latent_hw = (h // 4, w // 4)
        with torch.no_grad():
            back_text = self.embedder(prompts.backbone_prompt)
            ctrl_text = self.embedder(prompts.control_prompt)
            taus = strided_timesteps(self.schedule.T, req.steps)
            t_first = int(taus[-1])

            if req.mask_override is not None:
                override = resize_mask(
                    np.clip(np.asarray(req.mask_override, dtype=np.float64), 0.0, 1.0), latent_hw
                )
                mask_latent = torch.from_numpy(override).float()[None, None]
            else:
                mask_latent = self._predict_mask(
                    lq_t, ctrl_text, self._init_latent((h, w), req.seed), t_first
                )
            mods = self._site_modulations(mask_latent, instr.s1, instr.s2, latent_hw)

            state = {"mods": mods, "mask": mask_latent}

            def hook(z, t):
                feats, pyramid = self.control(lq_t, ctrl_text, z, t)
                if req.mask_per_step and req.mask_override is None:
                    state["mask"] = torch.sigmoid(self.mask_decoder(pyramid))
                    state["mods"] = self._site_modulations(
                        state["mask"], instr.s1, instr.s2, latent_hw
                    )
                return make_fuse_fn(feats, state["mods"])

            z_out = ddim_sample(
                self.backbone,
                back_text,
                self.schedule,
                (1, self.backbone.cfg.latent_channels, *latent_hw),
                steps=req.steps,
                seed=req.seed,
                control_hook=hook,
            )
            out = self.codec.decode(z_out, clip=True)[0].permute(1, 2, 0).numpy()
        mask_full = resize_mask(state["mask"][0, 0].numpy().astype(np.float64), (h, w))
        stats = [
            {"site": i, "min": float(m.min()), "max": float(m.max())} for i, m in enumerate(mods)
        ]
        return RestoreResult(
            output_image=out.astype(np.float32),
            predicted_mask=mask_full,
            prompts=prompts,
            instruction=instr,
            modulation_stats=stats,
            seed=req.seed,
            steps=req.steps,
        )

    def restore_batch(self, reqs: List[RestoreRequest]) -> List[RestoreResult]:
        """Batched variant of ``restore`` for evaluation sweeps.

        Same computation stacked along the batch axis with per-request seeds,
        so outputs match per-request ``restore`` up to batched-kernel float
        noise. All requests must share step count and image size; per-step
        mask recomputation and mask overrides are not supported here.
        """
        if not reqs:
            return []
        if any(r.mask_per_step or r.mask_override is not None for r in reqs):
            raise ValueError("restore_batch handles plain requests only")
        if len({r.steps for r in reqs}) != 1:
            raise ValueError("all batched requests must share steps")
        instrs = [parse_inference_instruction(r.instruction_text) for r in reqs]
        prompt_pairs = [derive_prompts(i) for i in instrs]
        lq_t = torch.cat([self._check_image(r.lq_image) for r in reqs])
        h, w = lq_t.shape[-2:]
        latent_hw = (h // 4, w // 4)
        steps = reqs[0].steps
        with torch.no_grad():
            back_text = torch.stack([self.embedder(p.backbone_prompt) for p in prompt_pairs])
            ctrl_text = torch.stack([self.embedder(p.control_prompt) for p in prompt_pairs])
            z0 = torch.cat([self._init_latent((h, w), r.seed) for r in reqs])
            taus = strided_timesteps(self.schedule.T, steps)
            masks = self._predict_mask(lq_t, ctrl_text, z0, int(taus[-1]))
            mods = []
            for _, sh, sw in self.backbone.cfg.site_shapes(latent_hw):
                per_site = resize_mask(masks, (sh, sw))
                blended = torch.cat(
                    [
                        modulation_map(per_site[i : i + 1], instr.s1, instr.s2)
                        for i, instr in enumerate(instrs)
                    ]
                )
                mods.append(blended)

            def hook(z, t):
                feats, _ = self.control(lq_t, ctrl_text, z, t)
                return make_fuse_fn(feats, mods)

            z_out = ddim_sample(
                self.backbone,
                back_text,
                self.schedule,
                tuple(z0.shape),
                steps=steps,
                seed=0,
                control_hook=hook,
                z_init=z0,
            )
            outs = self.codec.decode(z_out, clip=True).permute(0, 2, 3, 1).numpy()
        results = []
        for i, (req, instr, prompts) in enumerate(zip(reqs, instrs, prompt_pairs)):
            mask_full = resize_mask(masks[i, 0].numpy().astype(np.float64), (h, w))
            stats = [
                {"site": s, "min": float(m[i].min()), "max": float(m[i].max())}
                for s, m in enumerate(mods)
            ]
            results.append(
                RestoreResult(
                    output_image=outs[i].astype(np.float32),
                    predicted_mask=mask_full,
                    prompts=prompts,
                    instruction=instr,
                    modulation_stats=stats,
                    seed=req.seed,
                    steps=steps,
                )
            )
        return results

    def preview_mask(self, req: RestoreRequest) -> np.ndarray:
        """Mask-only path; identical to the mask a full restore would use."""
        instr = parse_inference_instruction(req.instruction_text)
        prompts = derive_prompts(instr)
        lq_t = self._check_image(req.lq_image)
        h, w = lq_t.shape[-2:]
        with torch.no_grad():
            ctrl_text = self.embedder(prompts.control_prompt)
            taus = strided_timesteps(self.schedule.T, req.steps)
            mask_latent = self._predict_mask(
                lq_t, ctrl_text, self._init_latent((h, w), req.seed), int(taus[-1])
            )
        return resize_mask(mask_latent[0, 0].numpy().astype(np.float64), (h, w))
