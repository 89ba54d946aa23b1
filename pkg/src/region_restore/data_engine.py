"""Training-triplet production: annotation backends, caption refinement,
subject merging, the synthetic desk-scale corpus, and dataset I/O.

Heavy annotation models (segmentation, region captioning, LLM caption
refinement, learned quality scoring) sit behind small interfaces with
deterministic stubs so the whole pipeline runs self-contained.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .degradation import BokehSynthConfig, synth_bokeh
from .imaging import laplacian_variance, load_png, luma, save_png, sharpness_score, to_uint8

log = logging.getLogger(__name__)

MIN_AREA_FRACTION = 0.005  # masks below 0.5% of the image are dropped


class BackendFailure(RuntimeError):
    pass


class CorruptDataset(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# domain records


@dataclass
class RegionAnnotation:
    mask: np.ndarray  # (H, W) bool
    raw_caption: str

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        if not self.mask.any():
            raise ValueError("annotation mask has no positive pixels")
        if not self.raw_caption.strip():
            raise ValueError("annotation caption is empty")


@dataclass
class RefinedRegion:
    noun_phrase: str
    subject: str
    source: RegionAnnotation


@dataclass
class Triplet:
    image_id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) bool
    caption: str
    subject: str
    task_tags: Tuple[str, ...] = ("local",)


# ---------------------------------------------------------------------------
# pluggable backends


class Segmenter(Protocol):
    def segment(self, image: np.ndarray) -> List[np.ndarray]: ...


class RegionCaptioner(Protocol):
    def caption(self, image: np.ndarray, mask: np.ndarray) -> str: ...


class CaptionRefiner(Protocol):
    strength: str

    def refine(self, raw_caption: str) -> Tuple[str, str]:
        """Returns (subject, noun_phrase)."""
        ...


class QualityScorer(Protocol):
    def score(self, image: np.ndarray) -> float: ...


class SharpnessScorer:
    """Laplacian-variance sharpness proxy in [0, 100]; stands in for learned IQA."""

    def score(self, image: np.ndarray) -> float:
        return sharpness_score(image)


class ComponentSegmenter:
    """Quantized-luma connected components; a crude generic stub."""

    def __init__(self, levels: int = 4, min_area_fraction: float = MIN_AREA_FRACTION):
        self.levels = levels
        self.min_area_fraction = min_area_fraction

    def segment(self, image: np.ndarray) -> List[np.ndarray]:
        y = luma(image)
        q = np.clip((y * self.levels).astype(int), 0, self.levels - 1)
        masks = []
        floor = self.min_area_fraction * y.size
        for level in range(self.levels):
            labels, n = ndimage.label(q == level)
            for i in range(1, n + 1):
                m = labels == i
                if m.sum() >= floor:
                    masks.append(m)
        return masks


class MeanColorCaptioner:
    """Names a region by its dominant primary; deterministic filler text."""

    _names = ["dark", "red", "green", "blue", "bright"]

    def caption(self, image: np.ndarray, mask: np.ndarray) -> str:
        mean = image[mask].mean(axis=0)
        if mean.max() < 0.25:
            name = "dark"
        elif mean.min() > 0.75:
            name = "bright"
        else:
            name = ["red", "green", "blue"][int(np.argmax(mean))]
        return f"the {name} region"


class RuleRefiner:
    """Whitespace/punctuation cleanup with the final word as head noun."""

    def __init__(self, strength: str = "base"):
        self.strength = strength

    def refine(self, raw_caption: str) -> Tuple[str, str]:
        phrase = " ".join(raw_caption.strip().rstrip(".").split())
        words = phrase.split()
        if not words:
            raise BackendFailure("empty caption after cleanup")
        return words[-1].lower(), phrase


@dataclass
class SceneRegion:
    mask: np.ndarray
    caption: str
    subject: str


@dataclass
class SceneRecord:
    """Ground truth for one rendered image, for oracle backends and tests."""

    image_id: str
    image: np.ndarray
    regions: List[SceneRegion]


def _image_key(image: np.ndarray) -> str:
    return hashlib.sha256(to_uint8(image).tobytes()).hexdigest()


class OracleSegmenter:
    """Returns the renderer's exact shape rasters for known corpus images."""

    def __init__(self, scenes: Sequence[SceneRecord]):
        self._by_key = {_image_key(s.image): s for s in scenes}

    def segment(self, image: np.ndarray) -> List[np.ndarray]:
        scene = self._by_key.get(_image_key(image))
        if scene is None:
            raise BackendFailure("image not in oracle corpus")
        return [r.mask.copy() for r in scene.regions]


class OracleCaptioner:
    """Looks up the rendered caption of the best-overlapping known region."""

    def __init__(self, scenes: Sequence[SceneRecord]):
        self._by_key = {_image_key(s.image): s for s in scenes}

    def caption(self, image: np.ndarray, mask: np.ndarray) -> str:
        scene = self._by_key.get(_image_key(image))
        if scene is None:
            raise BackendFailure("image not in oracle corpus")
        best, best_iou = None, -1.0
        for r in scene.regions:
            inter = float(np.logical_and(r.mask, mask).sum())
            union = float(np.logical_or(r.mask, mask).sum())
            iou = inter / union if union else 0.0
            if iou > best_iou:
                best, best_iou = r, iou
        return best.caption


# ---------------------------------------------------------------------------
# pipeline operations


def filter_image(image: np.ndarray, scorer: QualityScorer, min_side: int, min_score: float) -> bool:
    """Quality gate: shorter side and quality score must both clear thresholds."""
    h, w = np.asarray(image).shape[:2]
    if min(h, w) < min_side:
        return False
    return scorer.score(image) >= min_score


def annotate_image(
    image: np.ndarray,
    segmenter: Segmenter,
    captioner: RegionCaptioner,
    min_area_fraction: float = MIN_AREA_FRACTION,
    image_id: str = "<unknown>",
) -> List[RegionAnnotation]:
    """One annotation per sufficiently large segmenter mask."""
    h, w = np.asarray(image).shape[:2]
    floor = min_area_fraction * h * w
    try:
        masks = segmenter.segment(image)
    except Exception as exc:  # noqa: BLE001 - backend boundary
        raise BackendFailure(f"segmenter failed on {image_id}: {exc}") from exc
    annotations = []
    for m in masks:
        m = np.asarray(m).astype(bool)
        if m.sum() < floor:
            continue
        try:
            cap = captioner.caption(image, m)
        except Exception as exc:  # noqa: BLE001
            raise BackendFailure(f"captioner failed on {image_id}: {exc}") from exc
        annotations.append(RegionAnnotation(mask=m, raw_caption=cap))
    return annotations


def refine_captions(
    annotations: Sequence[RegionAnnotation],
    refiner_tiers: Sequence[CaptionRefiner],
    top_k: int = 200,
    rounds: int = 3,
) -> List[RefinedRegion]:
    """Iterative refinement with batch-frequency flagging.

    Round 1 refines everything with the first tier. After each round the
    subject frequencies over the whole batch are ranked; items whose subject
    ranks beyond ``top_k`` are redone with the next (stronger) tier. Items
    still flagged after the final round are excluded and logged.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if not refiner_tiers:
        raise ValueError("refiner_tiers is empty")

    refined: List[Optional[RefinedRegion]] = [None] * len(annotations)
    flagged = list(range(len(annotations)))
    for r in range(rounds):
        tier = refiner_tiers[min(r, len(refiner_tiers) - 1)]
        for i in flagged:
            subject, phrase = tier.refine(annotations[i].raw_caption)
            refined[i] = RefinedRegion(noun_phrase=phrase, subject=subject, source=annotations[i])
        counts = {}
        for item in refined:
            counts[item.subject] = counts.get(item.subject, 0) + 1
        ranked = sorted(counts, key=lambda s: (-counts[s], s))
        rank_of = {s: i + 1 for i, s in enumerate(ranked)}
        flagged = [i for i, item in enumerate(refined) if rank_of[item.subject] > top_k]
        if not flagged:
            break
    if flagged:
        dropped = {refined[i].subject for i in flagged}
        log.warning("refinement exhausted for %d regions (subjects: %s)", len(flagged), sorted(dropped))
    keep = set(range(len(annotations))) - set(flagged)
    return [refined[i] for i in sorted(keep)]


def merge_by_subject(
    regions: Sequence[RefinedRegion], image_id: str, image: np.ndarray
) -> List[Triplet]:
    """Union masks of same-subject regions; caption from the largest member."""
    groups: dict = {}
    order = []
    for reg in regions:
        if reg.subject not in groups:
            groups[reg.subject] = []
            order.append(reg.subject)
        groups[reg.subject].append(reg)
    out = []
    for subject in order:
        members = groups[subject]
        mask = np.zeros_like(members[0].source.mask, dtype=bool)
        for m in members:
            mask |= m.source.mask
        largest = max(members, key=lambda m: int(m.source.mask.sum()))
        out.append(
            Triplet(
                image_id=image_id,
                image=image,
                mask=mask,
                caption=largest.noun_phrase,
                subject=subject,
            )
        )
    return out


# ---------------------------------------------------------------------------
# synthetic corpus

COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.2),
    "blue": (0.2, 0.3, 0.85),
    "yellow": (0.9, 0.85, 0.15),
    "magenta": (0.85, 0.2, 0.8),
    "cyan": (0.15, 0.8, 0.85),
}
FILLS = ("solid", "striped", "checkered")
SHAPES = ("disk", "rectangle", "triangle")


def caption_vocabulary() -> List[str]:
    return [f"{c} {f} {s}" for c in COLORS for f in FILLS for s in SHAPES]


def _shape_mask(kind: str, size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    if kind == "rectangle":
        return (np.abs(yy - cy) <= 0.75 * radius) & (np.abs(xx - cx) <= radius)
    if kind == "triangle":
        # upright triangle: apex at cy - radius, base at cy + radius
        inside = (yy >= cy - radius) & (yy <= cy + radius)
        half_width = (yy - (cy - radius)) / 2.0
        return inside & (np.abs(xx - cx) <= half_width)
    raise ValueError(f"unknown shape {kind!r}")


def _fill_pattern(fill: str, color: tuple, size: int, phase: int) -> np.ndarray:
    base = np.ones((size, size, 3), dtype=np.float64) * np.asarray(color)
    dark = np.asarray(color) * 0.35
    if fill == "solid":
        return base
    yy, xx = np.mgrid[0:size, 0:size]
    if fill == "striped":
        stripes = ((xx + phase) // 4) % 2 == 0
        base[stripes] = dark
        return base
    checker = (((yy + phase) // 4) + ((xx + phase) // 4)) % 2 == 0
    base[checker] = dark
    return base


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    from .imaging import resize_bilinear

    coarse = rng.uniform(0.25, 0.75, size=(6, 6, 3))
    bg = np.stack([resize_bilinear(coarse[..., c], size, size) for c in range(3)], axis=-1)
    bg += rng.normal(0.0, 0.01, size=bg.shape)
    return np.clip(bg, 0.0, 1.0)


@dataclass
class SyntheticCorpus:
    triplets: List[Triplet]
    scenes: List[SceneRecord]

    def __len__(self) -> int:
        return len(self.triplets)

    def __getitem__(self, i: int) -> Triplet:
        return self.triplets[i]


def build_synthetic_corpus(
    n_images: int,
    image_size: int = 64,
    seed: int = 0,
    bokeh: bool = False,
    bokeh_cfg: Optional[BokehSynthConfig] = None,
) -> SyntheticCorpus:
    """Render textured shapes on smooth noise backgrounds with exact masks.

    With ``bokeh=True`` one region per image is kept sharp and the rest of
    the frame is bokeh-blurred; triplets then carry the "bokeh" task tag.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    rng = np.random.default_rng(seed)
    bokeh_cfg = bokeh_cfg or BokehSynthConfig()
    triplets: List[Triplet] = []
    scenes: List[SceneRecord] = []
    for idx in range(n_images):
        image_id = f"{'bokeh' if bokeh else 'img'}{idx:05d}"
        img = _smooth_background(rng, image_size)
        n_shapes = int(rng.integers(1, 4))
        kinds = [str(k) for k in rng.permutation(SHAPES)[:n_shapes]]
        regions: List[SceneRegion] = []
        occupied = np.zeros((image_size, image_size), dtype=bool)
        for kind in kinds:
            placed = False
            for _ in range(12):
                radius = rng.uniform(0.16, 0.24) * image_size
                cy = rng.uniform(radius + 1, image_size - radius - 1)
                cx = rng.uniform(radius + 1, image_size - radius - 1)
                mask = _shape_mask(kind, image_size, cy, cx, radius)
                if not np.logical_and(mask, occupied).any():
                    placed = True
                    break
            if not placed:
                continue
            color_name = str(rng.choice(list(COLORS)))
            fill = str(rng.choice(FILLS))
            phase = int(rng.integers(0, 4))
            pattern = _fill_pattern(fill, COLORS[color_name], image_size, phase)
            img[mask] = pattern[mask]
            occupied |= mask
            regions.append(
                SceneRegion(mask=mask, caption=f"{color_name} {fill} {kind}", subject=kind)
            )
        if not regions:  # extremely unlikely; keep ids stable by re-rolling center
            mask = _shape_mask("disk", image_size, image_size / 2, image_size / 2, image_size / 4)
            img[mask] = COLORS["red"]
            regions = [SceneRegion(mask=mask, caption="red solid disk", subject="disk")]
            occupied = mask.copy()

        tags = ("local",)
        if bokeh:
            fg = max(regions, key=lambda r: int(r.mask.sum()))
            img = synth_bokeh(
                img.astype(np.float32), ~fg.mask, bokeh_cfg, seed=int(rng.integers(0, 2**31))
            ).astype(np.float64)
            regions = [fg]
            tags = ("bokeh",)

        img = (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)
        scenes.append(SceneRecord(image_id=image_id, image=img, regions=regions))
        for r in regions:
            triplets.append(
                Triplet(
                    image_id=image_id,
                    image=img,
                    mask=r.mask,
                    caption=r.caption,
                    subject=r.subject,
                    task_tags=tags,
                )
            )
    return SyntheticCorpus(triplets=triplets, scenes=scenes)


# ---------------------------------------------------------------------------
# dataset I/O
#
# root/images/{image_id}.png          8-bit RGB
# root/masks/{image_id}/{k}.png       8-bit grayscale, 0/255
# root/index.jsonl                    one JSON object per triplet


def write_dataset(triplets: Sequence[Triplet], root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    per_image_counter: dict = {}
    written_images = set()
    with open(root / "index.jsonl", "w", encoding="utf-8") as fh:
        for t in triplets:
            if t.image_id not in written_images:
                save_png(t.image, root / "images" / f"{t.image_id}.png")
                written_images.add(t.image_id)
            k = per_image_counter.get(t.image_id, 0)
            per_image_counter[t.image_id] = k + 1
            mask_rel = f"masks/{t.image_id}/{k}.png"
            (root / "masks" / t.image_id).mkdir(parents=True, exist_ok=True)
            save_png(t.mask.astype(np.float64), root / mask_rel)
            fh.write(
                json.dumps(
                    {
                        "image_id": t.image_id,
                        "mask_file": mask_rel,
                        "caption": t.caption,
                        "subject": t.subject,
                        "task_tags": list(t.task_tags),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_dataset(root) -> List[Triplet]:
    root = Path(root)
    index = root / "index.jsonl"
    if not index.exists():
        raise CorruptDataset(f"missing index: {index}")
    images: dict = {}
    triplets = []
    with open(index, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptDataset(f"bad index line {line_no}: {exc}") from exc
            image_id = rec["image_id"]
            if image_id not in images:
                path = root / "images" / f"{image_id}.png"
                if not path.exists():
                    raise CorruptDataset(f"missing image for {image_id}")
                images[image_id] = load_png(path)
            mask_path = root / rec["mask_file"]
            if not mask_path.exists():
                raise CorruptDataset(f"missing mask for {image_id}: {rec['mask_file']}")
            mask = load_png(mask_path)
            triplets.append(
                Triplet(
                    image_id=image_id,
                    image=images[image_id],
                    mask=mask >= 0.5,
                    caption=rec["caption"],
                    subject=rec["subject"],
                    task_tags=tuple(rec.get("task_tags", ("local",))),
                )
            )
    return triplets
