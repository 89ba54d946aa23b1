"""Command-line interface: data generation, training, restoration, serving."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

BUNDLE_FORMAT = "region-restore-bundle/v1"


def save_bundle(backbone_ckpt: dict, control_ckpt: dict, path) -> None:
    torch.save(
        {"format": BUNDLE_FORMAT, "backbone": backbone_ckpt, "control": control_ckpt}, path
    )


def load_bundle(path) -> tuple:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"not a checkpoint bundle: {blob.get('format')!r}")
    return blob["backbone"], blob["control"]


def _cmd_gen_data(args) -> int:
    from .data_engine import build_synthetic_corpus, write_dataset

    try:
        corpus = build_synthetic_corpus(args.n, image_size=args.size, seed=args.seed, bokeh=args.bokeh)
        write_dataset(corpus.triplets, args.out)
    except OSError as exc:
        print(f"error: cannot write dataset: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(corpus.triplets)} triplets ({len(corpus.scenes)} images) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .data_engine import read_dataset
    from .diffusion import PretrainConfig, pretrain_backbone, load_backbone
    from .diffusion.backbone import BackboneConfig
    from .training import DivergenceDetected, Trainer, TrainConfig, load_checkpoint

    config = TrainConfig.from_json_file(args.config) if args.config else TrainConfig()
    general = read_dataset(args.general)
    bokeh = read_dataset(args.bokeh) if args.bokeh else None
    metrics_path = args.metrics or (str(args.out) + ".metrics.jsonl")

    try:
        if args.backbone:
            backbone_ckpt = torch.load(args.backbone, map_location="cpu", weights_only=False)
        else:
            pretrain_cfg = PretrainConfig()
            if args.pretrain_config:
                with open(args.pretrain_config, encoding="utf-8") as fh:
                    raw = json.load(fh)
                model = BackboneConfig.from_dict(raw.pop("model")) if "model" in raw else BackboneConfig()
                pretrain_cfg = PretrainConfig(model=model, **raw)
            print("pretraining backbone ...")
            backbone_ckpt = pretrain_backbone(general, pretrain_cfg, seed=config.seed)
            if args.save_backbone:
                torch.save(backbone_ckpt, args.save_backbone)

        if args.resume:
            _, prev = load_bundle(args.resume)
            trainer = Trainer.resume(prev, backbone_ckpt, metrics_path=metrics_path)
            print(f"resumed at step {trainer.step}")
        else:
            trainer = Trainer(backbone_ckpt, config, metrics_path=metrics_path)
        control_ckpt = trainer.run(general, bokeh)
    except DivergenceDetected as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    save_bundle(backbone_ckpt, control_ckpt, args.out)
    print(f"checkpoint written to {args.out} (step {control_ckpt['step']})")
    return 0


def _cmd_restore(args) -> int:
    from .imaging import load_png, save_png
    from .inference import RestorePipeline, RestoreRequest
    from .instruction import MalformedInstruction

    backbone_ckpt, control_ckpt = load_bundle(args.ckpt)
    pipeline = RestorePipeline(backbone_ckpt, control_ckpt)
    img = load_png(args.infile)
    try:
        result = pipeline.restore(
            RestoreRequest(
                lq_image=img,
                instruction_text=args.instruction,
                steps=args.steps,
                seed=args.seed,
                mask_per_step=args.mask_per_step,
            )
        )
    except MalformedInstruction as exc:
        print(f"error: malformed instruction: {exc}", file=sys.stderr)
        return 3
    save_png(result.output_image, args.out)
    if args.mask_out:
        save_png(result.predicted_mask, args.mask_out)
    print(f"restored {args.infile} -> {args.out}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app

    ckpt = os.environ.get("REGION_RESTORE_CKPT", args.ckpt)
    if not ckpt:
        print("error: no checkpoint (use --ckpt or REGION_RESTORE_CKPT)", file=sys.stderr)
        return 2
    cfg = ServiceConfig(
        checkpoint_path=ckpt, host=args.host, port=args.port, max_image_side=args.max_side,
        static_dir=args.static,
    )
    app = create_app(cfg)
    app.state.load()
    uvicorn.run(app, host=cfg.host, port=cfg.port, timeout_keep_alive=int(cfg.request_timeout_s))
    return 0


def _cmd_golden_vectors(args) -> int:
    """Instruction-template vectors consumed by the studio UI tests."""
    from .instruction import Instruction, Task, render_inference_instruction

    rng = np.random.default_rng(args.seed)
    captions = [
        "the dog on the sand beach", "flower", "sign", "pagoda", "cat",
        "the bush in front of sign", "red striped disk", "green solid triangle",
        "blue checkered square", "the leaves", "old building", "a person walking",
    ]
    vectors = []
    for i in range(args.n):
        task = Task.BOKEH_RESTORE if rng.random() < 0.5 else Task.LOCAL_RESTORE
        caption = captions[int(rng.integers(0, len(captions)))]
        s1 = round(float(rng.integers(0, 41)) / 20.0, 2)
        s2 = round(float(rng.integers(0, 41)) / 20.0, 2)
        instr = Instruction(task, caption, s1, s2)
        vectors.append(
            {
                "task": task.value,
                "caption": caption,
                "s1": instr.s1,
                "s2": instr.s2,
                "rendered": render_inference_instruction(instr),
            }
        )
    payload = json.dumps(vectors, indent=2)
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
    else:
        print(payload)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="region-restore", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="build the synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--bokeh", action="store_true")
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="pretrain (if needed) and train the control branch")
    t.add_argument("--config", default=None, help="TrainConfig JSON file")
    t.add_argument("--general", required=True, help="general-task dataset dir")
    t.add_argument("--bokeh", default=None, help="bokeh-task dataset dir")
    t.add_argument("--out", required=True, help="output checkpoint bundle")
    t.add_argument("--backbone", default=None, help="reuse a pretrained backbone checkpoint")
    t.add_argument("--save-backbone", default=None, help="save the pretrained backbone here")
    t.add_argument("--pretrain-config", default=None, help="PretrainConfig JSON file")
    t.add_argument("--resume", default=None, help="resume from a checkpoint bundle")
    t.add_argument("--metrics", default=None, help="metrics JSONL path")
    t.set_defaults(fn=_cmd_train)

    r = sub.add_parser("restore", help="restore one image from an instruction")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--in", dest="infile", required=True)
    r.add_argument("--instruction", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--steps", type=int, default=50)
    r.add_argument("--out", required=True)
    r.add_argument("--mask-out", default=None)
    r.add_argument("--mask-per-step", action="store_true")
    r.set_defaults(fn=_cmd_restore)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--ckpt", default=None)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--max-side", type=int, default=512)
    s.add_argument("--static", default=None, help="studio UI dist directory")
    s.set_defaults(fn=_cmd_serve)

    v = sub.add_parser("golden-vectors", help="emit instruction-template test vectors")
    v.add_argument("--out", default=None)
    v.add_argument("--n", type=int, default=25)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=_cmd_golden_vectors)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen-data" and args.n < 1:
        parser.error("--n must be >= 1")
    if args.command == "serve" and not (1 <= args.port <= 65535):
        parser.error("--port must be in [1, 65535]")
    if args.command == "serve" and args.max_side % 4:
        parser.error("--max-side must be a multiple of 4")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
