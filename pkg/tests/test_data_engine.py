import itertools
import os

import numpy as np
import pytest

from region_restore.data_engine import (
    COLORS,
    FILLS,
    SHAPES,
    BackendFailure,
    ComponentSegmenter,
    CorruptDataset,
    MeanColorCaptioner,
    OracleCaptioner,
    OracleSegmenter,
    RegionAnnotation,
    RuleRefiner,
    SharpnessScorer,
    annotate_image,
    build_synthetic_corpus,
    caption_vocabulary,
    filter_image,
    merge_by_subject,
    read_dataset,
    refine_captions,
    write_dataset,
)


class FixedScorer:
    def __init__(self, value):
        self.value = value

    def score(self, image):
        return self.value


def test_filter_image_thresholds():
    big = np.zeros((600, 800, 3), np.float32)
    small = np.zeros((500, 800, 3), np.float32)
    assert filter_image(big, FixedScorer(65.0), min_side=512, min_score=60.0)
    assert not filter_image(small, FixedScorer(65.0), min_side=512, min_score=60.0)
    assert not filter_image(big, FixedScorer(10.0), min_side=512, min_score=60.0)
    # boundary convention: score exactly at the threshold passes
    assert filter_image(big, FixedScorer(60.0), min_side=512, min_score=60.0)


def test_sharpness_scorer_orders_blur():
    rng = np.random.default_rng(0)
    sharp = rng.random((64, 64, 3))
    flat = np.full((64, 64, 3), 0.5)
    s = SharpnessScorer()
    assert s.score(sharp) > s.score(flat)
    assert 0.0 <= s.score(sharp) <= 100.0


class TwoMaskSegmenter:
    def segment(self, image):
        h, w = image.shape[:2]
        a = np.zeros((h, w), bool)
        a[: h // 2] = True
        return [a, ~a]


class TinyMaskSegmenter:
    def segment(self, image):
        m = np.zeros(image.shape[:2], bool)
        m[0, :3] = True  # 3 pixels on a 256x256 image: below the area floor
        return [m]


class EchoCaptioner:
    def caption(self, image, mask):
        return f"region of {int(mask.sum())} pixels"


def test_annotate_counts_masks():
    img = np.zeros((64, 64, 3), np.float32)
    anns = annotate_image(img, TwoMaskSegmenter(), EchoCaptioner())
    assert len(anns) == 2


def test_annotate_drops_tiny_masks():
    img = np.zeros((256, 256, 3), np.float32)
    assert annotate_image(img, TinyMaskSegmenter(), EchoCaptioner()) == []


def test_annotate_oracle_segmenter_matches_scene_count():
    corpus = build_synthetic_corpus(10, 64, seed=8)
    seg = OracleSegmenter(corpus.scenes)
    cap = OracleCaptioner(corpus.scenes)
    for scene in corpus.scenes:
        anns = annotate_image(scene.image, seg, cap, image_id=scene.image_id)
        assert len(anns) == len(scene.regions)
        assert sorted(a.raw_caption for a in anns) == sorted(r.caption for r in scene.regions)


def test_annotate_wraps_backend_failures():
    class Boom:
        def segment(self, image):
            raise RuntimeError("no backend")

    with pytest.raises(BackendFailure, match="img7"):
        annotate_image(np.zeros((16, 16, 3)), Boom(), EchoCaptioner(), image_id="img7")


class TierStub:
    """Scripted refiner: maps captions via a dict, defaults to identity."""

    def __init__(self, mapping, strength):
        self.mapping = mapping
        self.strength = strength
        self.calls = 0

    def refine(self, raw_caption):
        self.calls += 1
        phrase = raw_caption.strip().rstrip(".")
        subject = self.mapping.get(phrase, phrase.split()[-1].lower())
        return subject, phrase


def _ann(caption):
    return RegionAnnotation(mask=np.ones((4, 4), bool), raw_caption=caption)


def test_refine_uses_stronger_tier_for_rare_subjects():
    anns = [_ann("the dog"), _ann("the dog"), _ann("a small dogg")]
    tier1 = TierStub({"a small dogg": "dogg"}, "7b")
    tier2 = TierStub({"a small dogg": "dog"}, "72b")
    out = refine_captions(anns, [tier1, tier2], top_k=1, rounds=3)
    assert [r.subject for r in out] == ["dog", "dog", "dog"]


def test_refine_fixed_point_stops_early():
    anns = [_ann("the dog"), _ann("the cat")]
    tier1 = TierStub({}, "7b")
    tier2 = TierStub({}, "72b")
    out = refine_captions(anns, [tier1, tier2], top_k=200, rounds=3)
    assert len(out) == 2
    assert tier2.calls == 0  # rounds 2-3 were no-ops


def test_refine_excludes_exhausted_items():
    anns = [_ann("the dog"), _ann("the dog"), _ann("gibberish blob")]
    stubborn = TierStub({"gibberish blob": "zzz-unfixable"}, "7b")
    out = refine_captions(anns, [stubborn], top_k=1, rounds=2)
    assert len(out) == 2
    assert all(r.subject == "dog" for r in out)


def test_refine_validates_args():
    with pytest.raises(ValueError):
        refine_captions([], [], top_k=10, rounds=1)
    with pytest.raises(ValueError):
        refine_captions([], [TierStub({}, "7b")], top_k=10, rounds=0)


def _region(mask, phrase, subject):
    return type(
        "R", (), {"noun_phrase": phrase, "subject": subject, "source": type("S", (), {"mask": mask})()}
    )()


def test_merge_disjoint_union():
    a = np.zeros((8, 8), bool)
    a[:2] = True
    b = np.zeros((8, 8), bool)
    b[6:] = True
    img = np.zeros((8, 8, 3), np.float32)
    out = merge_by_subject([_region(a, "a leaf", "leaf"), _region(b, "the leaf", "leaf")], "x", img)
    assert len(out) == 1
    assert out[0].mask.sum() == a.sum() + b.sum()
    assert np.array_equal(out[0].mask, a | b)


def test_merge_single_passthrough():
    a = np.ones((4, 4), bool)
    out = merge_by_subject([_region(a, "one tree", "tree")], "x", np.zeros((4, 4, 3)))
    assert len(out) == 1 and out[0].caption == "one tree"


def test_merge_groups_match_bruteforce():
    masks = [np.zeros((6, 6), bool) for _ in range(3)]
    for i, m in enumerate(masks):
        m[i * 2 : i * 2 + 2] = True
    regions = [
        _region(masks[0], "tall tree", "tree"),
        _region(masks[1], "short tree", "tree"),
        _region(masks[2], "blue sky", "sky"),
    ]
    out = merge_by_subject(regions, "x", np.zeros((6, 6, 3)))
    assert len(out) == len({r.subject for r in regions}) == 2
    merged_tree = next(t for t in out if t.subject == "tree")
    assert np.array_equal(merged_tree.mask, masks[0] | masks[1])


def test_merge_caption_from_largest_member():
    small = np.zeros((8, 8), bool)
    small[0, 0] = True
    big = np.zeros((8, 8), bool)
    big[2:7] = True
    out = merge_by_subject(
        [_region(small, "tiny bush", "bush"), _region(big, "big bush", "bush")],
        "x",
        np.zeros((8, 8, 3)),
    )
    assert out[0].caption == "big bush"


def test_corpus_deterministic():
    a = build_synthetic_corpus(12, 64, seed=21)
    b = build_synthetic_corpus(12, 64, seed=21)
    assert len(a.triplets) == len(b.triplets)
    for ta, tb in zip(a.triplets, b.triplets):
        assert ta.image_id == tb.image_id and ta.caption == tb.caption
        assert np.array_equal(ta.image, tb.image)
        assert np.array_equal(ta.mask, tb.mask)


def test_corpus_masks_match_renderer_exactly():
    corpus = build_synthetic_corpus(10, 64, seed=4)
    by_image = {}
    for t in corpus.triplets:
        by_image.setdefault(t.image_id, []).append(t)
    for scene in corpus.scenes:
        for region, triplet in zip(scene.regions, by_image[scene.image_id]):
            inter = np.logical_and(region.mask, triplet.mask).sum()
            union = np.logical_or(region.mask, triplet.mask).sum()
            assert inter == union  # IoU exactly 1.0


def test_corpus_caption_vocabulary_size():
    vocab = caption_vocabulary()
    assert len(vocab) == len(COLORS) * len(FILLS) * len(SHAPES)
    corpus = build_synthetic_corpus(60, 64, seed=13)
    assert {t.caption for t in corpus.triplets}.issubset(set(vocab))


def test_corpus_bokeh_tags():
    corpus = build_synthetic_corpus(5, 64, seed=6, bokeh=True)
    assert all(t.task_tags == ("bokeh",) for t in corpus.triplets)
    assert len(corpus.triplets) == 5  # one foreground region per bokeh image


def test_dataset_round_trip(tmp_path):
    corpus = build_synthetic_corpus(6, 64, seed=9)
    write_dataset(corpus.triplets, tmp_path)
    back = read_dataset(tmp_path)
    assert len(back) == len(corpus.triplets)
    for a, b in zip(corpus.triplets, back):
        assert a.image_id == b.image_id
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)
        assert a.caption == b.caption and a.subject == b.subject and a.task_tags == b.task_tags


def test_dataset_missing_mask_is_corrupt(tmp_path):
    corpus = build_synthetic_corpus(3, 64, seed=10)
    write_dataset(corpus.triplets, tmp_path)
    victim = corpus.triplets[0].image_id
    os.remove(tmp_path / "masks" / victim / "0.png")
    with pytest.raises(CorruptDataset, match=victim):
        read_dataset(tmp_path)


def test_dataset_index_row_count(tmp_path):
    corpus = build_synthetic_corpus(70, 64, seed=12)
    triplets = corpus.triplets[:100]
    assert len(triplets) == 100
    write_dataset(triplets, tmp_path)
    with open(tmp_path / "index.jsonl", encoding="utf-8") as fh:
        assert sum(1 for line in fh if line.strip()) == 100


def test_component_segmenter_and_captioner_run():
    corpus = build_synthetic_corpus(2, 64, seed=14)
    img = corpus.scenes[0].image
    masks = ComponentSegmenter().segment(img)
    assert all(m.dtype == bool for m in masks)
    if masks:
        cap = MeanColorCaptioner().caption(img, masks[0])
        assert cap.startswith("the ")


def test_rule_refiner_head_noun():
    subject, phrase = RuleRefiner().refine("  A Red Striped Disk. ")
    assert subject == "disk"
    assert phrase == "A Red Striped Disk"
