"""Small shared image helpers: resizing, luma, sharpness, PNG I/O."""

from __future__ import annotations

import io

import numpy as np
from PIL import Image
from scipy import ndimage

LAPLACIAN_KERNEL = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


def luma(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of an (H, W, 3) image; 2-D input passes through."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[-1] == 3:
        return arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114
    raise ValueError(f"expected (H,W) or (H,W,3) image, got shape {arr.shape}")


def laplacian_variance(img: np.ndarray) -> float:
    """Variance of the 4-neighbour Laplacian of the luma channel."""
    y = luma(img)
    lap = ndimage.convolve(y, LAPLACIAN_KERNEL, mode="reflect")
    return float(lap.var())


def sharpness_score(img: np.ndarray, scale: float = 0.01) -> float:
    """Monotone Laplacian-variance sharpness proxy mapped into [0, 100]."""
    v = laplacian_variance(img)
    return 100.0 * v / (v + scale)


def resize_bilinear(arr: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Plain bilinear resize of a 2-D float array (half-pixel centers)."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    if (h, w) == (th, tw):
        return arr.copy()
    ys = (np.arange(th, dtype=np.float64) + 0.5) * (h / th) - 0.5
    xs = (np.arange(tw, dtype=np.float64) + 0.5) * (w / tw) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = (1.0 - fx) * arr[y0][:, x0] + fx * arr[y0][:, x1]
    bot = (1.0 - fx) * arr[y1][:, x0] + fx * arr[y1][:, x1]
    return (1.0 - fy) * top + fy * bot


def resize_image(img: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Channel-wise bilinear resize of an (H, W, 3) image."""
    return np.stack([resize_bilinear(img[..., c], th, tw) for c in range(img.shape[-1])], axis=-1)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float32) / np.float32(255.0)


def save_png(img: np.ndarray, path) -> None:
    """Write a [0,1] float image (RGB or grayscale) as 8-bit PNG."""
    u8 = to_uint8(img)
    mode = "RGB" if u8.ndim == 3 else "L"
    Image.fromarray(u8, mode=mode).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    return from_uint8(arr)


def encode_png_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    u8 = to_uint8(img)
    mode = "RGB" if u8.ndim == 3 else "L"
    Image.fromarray(u8, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def decode_png_bytes(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        im = im.convert("RGB") if im.mode not in ("RGB", "L") else im
        arr = np.array(im)
    return from_uint8(arr)
