"""Blind degradation synthesis and toy bokeh-background rendering.

The degradation chain is the canonical first-order blur -> downscale ->
noise -> JPEG sequence (with an optional second pass), always resized back
to the input size. Parameters are drawn once per call from the configured
ranges using the given seed, so outputs are bit-reproducible.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .imaging import luma, resize_image, to_uint8


class InvalidConfig(ValueError):
    pass


class MaskShapeMismatch(ValueError):
    pass


def _check_range(name, rng_pair, lo_bound=None, hi_bound=None):
    lo, hi = rng_pair
    if not (lo <= hi):
        raise InvalidConfig(f"{name} range is empty: {rng_pair}")
    if lo_bound is not None and lo < lo_bound:
        raise InvalidConfig(f"{name} lower bound {lo} < {lo_bound}")
    if hi_bound is not None and hi > hi_bound:
        raise InvalidConfig(f"{name} upper bound {hi} > {hi_bound}")


@dataclass(frozen=True)
class DegradationConfig:
    blur_sigma_range: tuple = (0.2, 2.0)
    downscale_range: tuple = (0.25, 1.0)
    noise_sigma_range: tuple = (0.0, 0.06)
    jpeg_quality_range: tuple = (40, 95)
    second_order: bool = False

    def __post_init__(self):
        _check_range("blur_sigma", self.blur_sigma_range, 0.0)
        _check_range("downscale", self.downscale_range, 1e-3, 1.0)
        _check_range("noise_sigma", self.noise_sigma_range, 0.0)
        _check_range("jpeg_quality", self.jpeg_quality_range, 30, 95)

    def to_dict(self) -> dict:
        return {
            "blur_sigma_range": list(self.blur_sigma_range),
            "downscale_range": list(self.downscale_range),
            "noise_sigma_range": list(self.noise_sigma_range),
            "jpeg_quality_range": list(self.jpeg_quality_range),
            "second_order": self.second_order,
        }

    @staticmethod
    def from_dict(d: dict) -> "DegradationConfig":
        return DegradationConfig(
            blur_sigma_range=tuple(d.get("blur_sigma_range", (0.2, 2.0))),
            downscale_range=tuple(d.get("downscale_range", (0.25, 1.0))),
            noise_sigma_range=tuple(d.get("noise_sigma_range", (0.0, 0.06))),
            jpeg_quality_range=tuple(d.get("jpeg_quality_range", (40, 95))),
            second_order=bool(d.get("second_order", False)),
        )


IDENTITY_DEGRADATION = DegradationConfig(
    blur_sigma_range=(0.0, 0.0),
    downscale_range=(1.0, 1.0),
    noise_sigma_range=(0.0, 0.0),
    jpeg_quality_range=(95, 95),
    second_order=False,
)


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """In-memory JPEG encode/decode; the artifact's own compression reference."""
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as im:
        out = np.array(im.convert("RGB"), dtype=np.float32)
    return out / np.float32(255.0)


def _degrade_once(img: np.ndarray, cfg: DegradationConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    sigma = rng.uniform(*cfg.blur_sigma_range)
    scale = rng.uniform(*cfg.downscale_range)
    noise_sigma = rng.uniform(*cfg.noise_sigma_range)
    quality = int(rng.integers(cfg.jpeg_quality_range[0], cfg.jpeg_quality_range[1] + 1))

    out = img.astype(np.float64)
    if sigma > 0:
        out = np.stack(
            [ndimage.gaussian_filter(out[..., c], sigma, mode="reflect") for c in range(3)],
            axis=-1,
        )
    if scale < 1.0:
        th, tw = max(1, round(h * scale)), max(1, round(w * scale))
        out = resize_image(out, th, tw)
    if noise_sigma > 0:
        out = out + rng.normal(0.0, noise_sigma, size=out.shape)
    out = np.clip(out, 0.0, 1.0)
    out = jpeg_roundtrip(out, quality)
    if out.shape[:2] != (h, w):
        out = resize_image(out.astype(np.float64), h, w)
    return np.clip(out, 0.0, 1.0)


def degrade(hq: np.ndarray, cfg: DegradationConfig, seed: int) -> np.ndarray:
    """Synthesize a low-quality counterpart of ``hq`` ([0,1], (H,W,3))."""
    hq = np.asarray(hq, dtype=np.float32)
    if hq.ndim != 3 or hq.shape[-1] != 3:
        raise ValueError(f"expected (H,W,3) image, got {hq.shape}")
    rng = np.random.default_rng(seed)
    out = _degrade_once(hq, cfg, rng)
    if cfg.second_order:
        out = _degrade_once(out, cfg, rng)
    return out.astype(np.float32)


@dataclass(frozen=True)
class BokehSynthConfig:
    disk_radius: int = 5
    highlight_boost: float = 1.5
    edge_feather: float = 2.0

    def __post_init__(self):
        if self.disk_radius < 1:
            raise InvalidConfig(f"disk_radius must be >= 1, got {self.disk_radius}")
        if self.highlight_boost < 1.0:
            raise InvalidConfig(f"highlight_boost must be >= 1, got {self.highlight_boost}")
        if self.edge_feather < 0.0:
            raise InvalidConfig(f"edge_feather must be >= 0, got {self.edge_feather}")


def disk_kernel(radius: int) -> np.ndarray:
    """Normalized disk; radius 1 degenerates to the identity kernel."""
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = (yy * yy + xx * xx <= (r - 0.5) ** 2).astype(np.float64)
    if k.sum() == 0:
        k[r, r] = 1.0
    return k / k.sum()


def synth_bokeh(
    hq: np.ndarray, background_mask: np.ndarray, cfg: BokehSynthConfig, seed: int
) -> np.ndarray:
    """Blur the masked background with a disk kernel, boosting highlights first.

    Foreground pixels strictly outside mask + feather band are returned
    bit-identical to the input.
    """
    hq = np.asarray(hq, dtype=np.float32)
    mask = np.asarray(background_mask).astype(bool)
    if mask.shape != hq.shape[:2]:
        raise MaskShapeMismatch(f"mask shape {mask.shape} != image {hq.shape[:2]}")
    if not mask.any():
        return hq.copy()

    rng = np.random.default_rng(seed)
    img = hq.astype(np.float64)
    y = luma(img)
    thresh = rng.uniform(0.7, 0.8)
    highlight = np.clip((y - thresh) / max(1.0 - thresh, 1e-6), 0.0, 1.0)
    boosted = img * (1.0 + (cfg.highlight_boost - 1.0) * highlight)[..., None]

    k = disk_kernel(cfg.disk_radius)
    blurred = np.stack(
        [ndimage.convolve(boosted[..., c], k, mode="reflect") for c in range(3)], axis=-1
    )
    blurred = np.clip(blurred, 0.0, 1.0)

    if cfg.edge_feather > 0:
        dist = ndimage.distance_transform_edt(~mask)
        weight = np.clip(1.0 - dist / cfg.edge_feather, 0.0, 1.0)
        weight[mask] = 1.0
    else:
        weight = mask.astype(np.float64)

    out = hq.copy()
    band = weight > 0
    w = weight[band][:, None]
    out[band] = ((1.0 - w) * img[band] + w * blurred[band]).astype(np.float32)
    return np.clip(out, 0.0, 1.0)
