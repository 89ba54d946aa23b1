"""Region-masked reference metrics, masked no-reference scoring, blur
detection, bokeh IoU, and the dataset-level evaluation harness.

PSNR/SSIM run on the BT.601 luma channel of [0,1] images. Masked SSIM only
averages pixels whose full 11x11 window lies inside the mask (erosion by the
window radius, with off-image neighbours treated as mask interior so an
all-ones mask reproduces the unmasked value). Learned no-reference scorers
plug in through a registry; the built-in "sharpness" entry is a Laplacian
variance proxy.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .imaging import laplacian_variance, luma, sharpness_score

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class EmptyMask(ValueError):
    pass


class TooSmall(ValueError):
    pass


class UnknownScorer(KeyError):
    pass


class AlignmentError(ValueError):
    pass


def _as_mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    if m.shape != shape:
        raise ValueError(f"mask shape {m.shape} != image shape {shape}")
    if not m.any():
        raise EmptyMask("mask has no positive pixels")
    return m


def psnr_y(img: np.ndarray, ref: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Luma PSNR in dB over masked pixels; zero-MSE returns the 99 dB cap."""
    a, b = luma(img), luma(ref)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    se = (a - b) ** 2
    if mask is not None:
        m = _as_mask(mask, a.shape)
        mse = float(se[m].mean())
    else:
        mse = float(se.mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = size // 2
    xs = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(xs**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim_map_y(img: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Per-pixel structural similarity on luma, reflect-padded."""
    a, b = luma(img), luma(ref)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise TooSmall(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    k = _gaussian_window()
    flt = lambda x: ndimage.correlate(x, k, mode="reflect")
    mu_a, mu_b = flt(a), flt(b)
    var_a = flt(a * a) - mu_a**2
    var_b = flt(b * b) - mu_b**2
    cov = flt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim_y(img: np.ndarray, ref: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    smap = ssim_map_y(img, ref)
    if mask is None:
        return float(smap.mean())
    m = _as_mask(mask, smap.shape)
    r = SSIM_WINDOW // 2
    eroded = ndimage.binary_erosion(m, structure=np.ones((SSIM_WINDOW, SSIM_WINDOW)), border_value=1)
    if not eroded.any():
        raise TooSmall("mask interior vanishes after window erosion")
    return float(smap[eroded].mean())


# ---------------------------------------------------------------------------
# no-reference scoring

_SCORERS: Dict[str, Callable[[np.ndarray], float]] = {}


def register_scorer(name: str, fn: Callable[[np.ndarray], float]) -> None:
    _SCORERS[name] = fn


register_scorer("sharpness", sharpness_score)


def masked_noref(img: np.ndarray, mask: np.ndarray, scorer="sharpness") -> float:
    """Apply a no-reference scorer with pixels outside the mask zeroed."""
    if callable(scorer):
        fn = scorer
    else:
        try:
            fn = _SCORERS[scorer]
        except KeyError:
            raise UnknownScorer(f"no scorer registered under {scorer!r}") from None
    img = np.asarray(img, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    if m.shape != img.shape[:2]:
        raise ValueError(f"mask shape {m.shape} != image shape {img.shape[:2]}")
    zeroed = img * m[..., None] if img.ndim == 3 else img * m
    return float(fn(zeroed))


# ---------------------------------------------------------------------------
# blur detection + bokeh IoU

BLUR_VARIANCE_FLOOR = 1e-4  # local luma std below 1% marks degenerate flatness
BLUR_BIMODAL_RATIO = 4.0  # Otsu split accepted when class means differ this much


def _otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    hist, edges = np.histogram(values, bins=bins)
    centers = (edges[:-1] + edges[1:]) / 2.0
    total = hist.sum()
    w0 = np.cumsum(hist)
    w1 = total - w0
    m0 = np.cumsum(hist * centers)
    m_total = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (m_total - m0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -1.0
    return float(centers[int(np.argmax(between))])


def detect_blur_background(img: np.ndarray, window: int = 7) -> np.ndarray:
    """Mark pixels whose local luma variance falls below an adaptive threshold.

    Degenerate maps (flat images) are entirely blurred; when the variance map
    shows no usable two-class split (uniformly sharp content), only pixels
    below an absolute floor are marked.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    y = luma(img)
    mean = ndimage.uniform_filter(y, size=window, mode="reflect")
    mean_sq = ndimage.uniform_filter(y * y, size=window, mode="reflect")
    vmap = np.maximum(mean_sq - mean * mean, 0.0)
    if float(vmap.max()) < BLUR_VARIANCE_FLOOR:
        return np.ones_like(vmap, dtype=bool)
    thresh = _otsu_threshold(vmap)
    below = vmap < thresh
    if not below.any() or below.all():
        return vmap < BLUR_VARIANCE_FLOOR
    mu_low = float(vmap[below].mean())
    mu_high = float(vmap[~below].mean())
    if mu_high < BLUR_BIMODAL_RATIO * max(mu_low, 1e-12):
        return vmap < BLUR_VARIANCE_FLOOR
    return below


def bokeh_iou(pred_bg: np.ndarray, gt_bg: np.ndarray) -> float:
    """Intersection-over-union of two binary masks; 1.0 when both are empty."""
    p = np.asarray(pred_bg).astype(bool)
    g = np.asarray(gt_bg).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


# ---------------------------------------------------------------------------
# dataset harness

REPORT_COLUMNS = [
    "image_id",
    "task",
    "psnr_y_full",
    "psnr_y_full_capped",
    "ssim_y_full",
    "psnr_y_target",
    "psnr_y_target_capped",
    "ssim_y_target",
    "noref_target",
    "mask_area_fraction",
    "psnr_y_background",
    "ssim_y_background",
    "bokeh_iou",
    "bokeh_iou_gt_region",
]


@dataclass
class MetricReport:
    rows: List[dict]
    aggregates: Dict[str, Optional[float]]
    scorer: str = "sharpness"

    def to_json(self) -> str:
        return json.dumps(
            {"scorer": self.scorer, "rows": self.rows, "aggregates": self.aggregates}, indent=2
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: row.get(k) for k in REPORT_COLUMNS})
        return buf.getvalue()


def _aggregate(rows: Sequence[dict], keys: Sequence[str]) -> Dict[str, Optional[float]]:
    out: Dict[str, Optional[float]] = {}
    for key in keys:
        vals = [r[key] for r in rows if isinstance(r.get(key), (int, float)) and r[key] is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out


def evaluate_dataset(results: Sequence[dict], triplets: Sequence, scorer="sharpness") -> MetricReport:
    """Metric families per image plus arithmetic-mean aggregates.

    ``results`` rows need ``image_id`` and ``output`` ((H,W,3) in [0,1]);
    they are matched 1:1 against ``triplets`` in order. Bokeh-tagged triplets
    get background metrics; blur-layout IoU is measured against the detected
    blur of the reference, and also against the GT background region.
    """
    if len(results) != len(triplets):
        raise AlignmentError(f"{len(results)} results vs {len(triplets)} triplets")
    rows = []
    for res, trip in zip(results, triplets):
        if res["image_id"] != trip.image_id:
            raise AlignmentError(f"result {res['image_id']!r} misaligned with {trip.image_id!r}")
        out = np.asarray(res["output"], dtype=np.float64)
        ref = np.asarray(trip.image, dtype=np.float64)
        mask = trip.mask.astype(bool)
        task = "bokeh" if "bokeh" in trip.task_tags else "local"
        p_full = psnr_y(out, ref)
        p_tgt = psnr_y(out, ref, mask)
        row = {
            "image_id": trip.image_id,
            "task": task,
            "psnr_y_full": p_full,
            "psnr_y_full_capped": p_full >= PSNR_CAP_DB,
            "ssim_y_full": ssim_y(out, ref),
            "psnr_y_target": p_tgt,
            "psnr_y_target_capped": p_tgt >= PSNR_CAP_DB,
            "ssim_y_target": _try_masked_ssim(out, ref, mask),
            "noref_target": masked_noref(out, mask, scorer),
            "mask_area_fraction": float(mask.mean()),
            "psnr_y_background": None,
            "ssim_y_background": None,
            "bokeh_iou": None,
            "bokeh_iou_gt_region": None,
        }
        if task == "bokeh":
            bg = ~mask
            if bg.any():
                row["psnr_y_background"] = psnr_y(out, ref, bg)
                row["ssim_y_background"] = _try_masked_ssim(out, ref, bg)
                row["bokeh_iou"] = bokeh_iou(detect_blur_background(out), detect_blur_background(ref))
                row["bokeh_iou_gt_region"] = bokeh_iou(detect_blur_background(out), bg)
        rows.append(row)
    agg_keys = [c for c in REPORT_COLUMNS if c not in ("image_id", "task") and not c.endswith("_capped")]
    return MetricReport(rows=rows, aggregates=_aggregate(rows, agg_keys), scorer=str(scorer))


def _try_masked_ssim(out, ref, mask) -> Optional[float]:
    try:
        return ssim_y(out, ref, mask)
    except (TooSmall, EmptyMask):
        return None
