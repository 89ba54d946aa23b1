"""HTTP service: restore, mask preview, health, and metric evaluation.

Single loaded checkpoint shared read-only across requests; PNG is the only
image wire format and seeds are client-supplied, so repeated identical
requests return byte-identical payloads.
"""

from __future__ import annotations

import base64
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .diffusion.backbone import ShapeError
from .evaluation import EmptyMask, PSNR_CAP_DB, psnr_y, ssim_y
from .imaging import decode_png_bytes, encode_png_bytes
from .inference import RestorePipeline, RestoreRequest
from .instruction import MalformedInstruction, derive_prompts, parse_inference_instruction


@dataclass
class ServiceConfig:
    checkpoint_path: Optional[str] = None
    host: str = "127.0.0.1"
    port: int = 8000
    max_image_side: int = 512
    request_timeout_s: float = 120.0
    max_concurrent_restores: int = 2
    static_dir: Optional[str] = None

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")
        if self.max_image_side % 4:
            raise ValueError("max_image_side must be a multiple of 4")
        if self.max_concurrent_restores < 1:
            raise ValueError("max_concurrent_restores must be >= 1")


class RestoreBody(BaseModel):
    image: str  # base64 PNG
    instruction: str
    seed: int
    steps: int = 50


class EvaluateBody(BaseModel):
    image: str
    reference: str
    mask: Optional[str] = None


def _bad_request(detail: str, status: int = 400) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": "bad_request", "detail": detail})


def _decode_image(b64: str) -> np.ndarray:
    try:
        return decode_png_bytes(base64.b64decode(b64, validate=True))
    except Exception as exc:  # noqa: BLE001 - wire boundary
        raise ValueError(f"not a decodable base64 PNG: {exc}") from exc


def _encode_image(img: np.ndarray) -> str:
    return base64.b64encode(encode_png_bytes(img)).decode("ascii")


def create_app(config: ServiceConfig) -> FastAPI:
    app = FastAPI(title="region-restore")
    app.state.config = config
    app.state.pipeline = None
    restore_slots = threading.Semaphore(config.max_concurrent_restores)

    def load() -> None:
        from .cli import load_bundle

        backbone_ckpt, control_ckpt = load_bundle(config.checkpoint_path)
        app.state.pipeline = RestorePipeline(backbone_ckpt, control_ckpt)

    app.state.load = load

    def _pipeline_or_503():
        if app.state.pipeline is None:
            return None, JSONResponse(
                status_code=503, content={"status": "loading", "detail": "checkpoint not loaded"}
            )
        return app.state.pipeline, None

    def _checked_image(b64: str):
        img = _decode_image(b64)
        h, w = img.shape[:2]
        if max(h, w) > config.max_image_side:
            return None, JSONResponse(
                status_code=413,
                content={
                    "error": "image_too_large",
                    "detail": f"max side {config.max_image_side}, got {max(h, w)}",
                },
            )
        return img, None

    @app.get("/api/health")
    def health():
        if app.state.pipeline is None:
            return JSONResponse(status_code=503, content={"status": "loading"})
        return {"status": "ok", "checkpoint_id": app.state.pipeline.checkpoint_id}

    @app.post("/api/restore")
    def restore(body: RestoreBody):
        pipeline, err = _pipeline_or_503()
        if err:
            return err
        try:
            img, err = _checked_image(body.image)
            if err:
                return err
            t0 = time.perf_counter()
            with restore_slots:  # bounds concurrent heavy work
                result = pipeline.restore(
                    RestoreRequest(
                        lq_image=img,
                        instruction_text=body.instruction,
                        steps=body.steps,
                        seed=body.seed,
                    )
                )
            elapsed = (time.perf_counter() - t0) * 1000.0
        except (MalformedInstruction, ShapeError, ValueError) as exc:
            return _bad_request(str(exc))
        return {
            "image": _encode_image(result.output_image),
            "mask": _encode_image(result.predicted_mask),
            "prompts": {
                "backbone": result.prompts.backbone_prompt,
                "control": result.prompts.control_prompt,
            },
            "timings_ms": elapsed,
        }

    @app.post("/api/preview-mask")
    def preview_mask(body: RestoreBody):
        pipeline, err = _pipeline_or_503()
        if err:
            return err
        try:
            img, err = _checked_image(body.image)
            if err:
                return err
            mask = pipeline.preview_mask(
                RestoreRequest(
                    lq_image=img,
                    instruction_text=body.instruction,
                    steps=body.steps,
                    seed=body.seed,
                )
            )
            prompts = derive_prompts(parse_inference_instruction(body.instruction))
        except (MalformedInstruction, ShapeError, ValueError) as exc:
            return _bad_request(str(exc))
        return {
            "mask": _encode_image(mask),
            "prompts": {"backbone": prompts.backbone_prompt, "control": prompts.control_prompt},
        }

    @app.post("/api/evaluate")
    def evaluate(body: EvaluateBody):
        try:
            img = _decode_image(body.image)
            ref = _decode_image(body.reference)
            mask = None
            if body.mask is not None:
                mask = np.asarray(_decode_image(body.mask))
                mask = (mask if mask.ndim == 2 else mask[..., 0]) >= 0.5
            out = {
                "psnr_y_full": psnr_y(img, ref),
                "ssim_y_full": ssim_y(img, ref),
                "psnr_cap_db": PSNR_CAP_DB,
            }
            if mask is not None:
                out["psnr_y_target"] = psnr_y(img, ref, mask)
                try:
                    out["ssim_y_target"] = ssim_y(img, ref, mask)
                except Exception:  # noqa: BLE001 - tiny masks have no windowed interior
                    out["ssim_y_target"] = None
                out["mask_area_fraction"] = float(mask.mean())
        except (EmptyMask, ValueError) as exc:
            return _bad_request(str(exc))
        return out

    if config.static_dir and Path(config.static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=config.static_dir, html=True), name="studio")

    return app
