"""Acceptance gate: one test per criterion, one pass/fail line under -v.

The toy end-to-end criteria train the full desk-scale pipeline once and
cache artifacts under .acceptance_cache/ (first run ~35 min on 2 CPU cores;
later runs reuse the cache). Everything else is fast and self-contained.
"""

import hashlib
import math

import numpy as np
import pytest
import torch

import headline
from conftest import MINI_MODEL
from test_evaluation import direct_ssim_y
from test_instruction import MALFORMED_CORPUS
from test_schedule import cosine_oracle

from region_restore.control import ControlBranch, MaskDecoder, fuse, make_fuse_fn, modulation_map, resize_mask
from region_restore.data_engine import build_synthetic_corpus
from region_restore.degradation import DegradationConfig
from region_restore.diffusion import (
    PretrainConfig,
    TextEmbedder,
    UNetBackbone,
    make_cosine_schedule,
    pretrain_backbone,
)
from region_restore.diffusion.schedule import forward_noise
from region_restore.evaluation import bokeh_iou, psnr_y, ssim_y
from region_restore.imaging import encode_png_bytes
from region_restore.inference import RestorePipeline, RestoreRequest
from region_restore.instruction import (
    Instruction,
    MalformedInstruction,
    Task,
    parse_inference_instruction,
    render_inference_instruction,
)
from region_restore.training import TrainConfig, Trainer, training_loss


@pytest.fixture(scope="module")
def headline_numbers():
    return headline.get_headline()


# ---------------------------------------------------------------------------
# criterion: Eq. 2/3 algebra, exact at 64-bit


def test_criterion_modulation_fusion_algebra_exact():
    rng = np.random.default_rng(0)
    # bound for arbitrary scales/masks
    for _ in range(200):
        s1, s2 = rng.uniform(0, 4, size=2)
        m = torch.from_numpy(rng.random(64)).double()
        out = modulation_map(m, s1, s2)
        assert bool((out >= min(s1, s2)).all()) and bool((out <= max(s1, s2)).all())
    # affinity in (s1, s2): dyadic grid keeps every product and sum exact,
    # so the identities must hold bitwise
    mask = torch.tensor([[0.0, 0.25], [0.5, 1.0]], dtype=torch.float64)[None, None]
    f_sd = torch.from_numpy(rng.integers(-32, 33, size=(1, 4, 2, 2)) / 8.0)
    f_cond = torch.from_numpy(rng.integers(-32, 33, size=(1, 4, 2, 2)) / 8.0)
    a = fuse(f_sd, f_cond, modulation_map(mask, 0.75, 1.0))
    b = fuse(f_sd, f_cond, modulation_map(mask, 0.5, 1.0))
    assert torch.equal(a - b, 0.25 * (mask * f_cond))
    c = fuse(f_sd, f_cond, modulation_map(mask, 0.5, 1.5))
    d = fuse(f_sd, f_cond, modulation_map(mask, 0.5, 1.0))
    assert torch.equal(c - d, 0.5 * ((1.0 - mask) * f_cond))
    # zero modulation is exactly neutral
    assert torch.equal(fuse(f_sd, f_cond, modulation_map(mask, 0.0, 0.0)), f_sd)
    # s1 = s2 = 1 equals the training-time constant-1 injection bit for bit
    unit = fuse(f_sd, f_cond, modulation_map(mask, 1.0, 1.0))
    train = fuse(f_sd, f_cond, 1.0)
    assert torch.equal(unit, train)


def test_criterion_unit_scales_reproduce_training_pathway(tiny_bundle, tiny_corpus):
    backbone_ckpt, control_ckpt = tiny_bundle
    pipeline = RestorePipeline(backbone_ckpt, control_ckpt)
    z = torch.randn(1, pipeline.backbone.cfg.latent_channels, 16, 16)
    lq = torch.from_numpy(tiny_corpus.triplets[0].image).permute(2, 0, 1)[None]
    with torch.no_grad():
        text = pipeline.embedder("red striped disk")
        feats, _ = pipeline.control(lq, pipeline.embedder("make red striped disk clear"), z, 500)
        train_out, _ = pipeline.backbone(z, 500, text, fuse_fn=make_fuse_fn(feats, 1.0))
        mask = torch.rand(1, 1, 16, 16)
        mods = [
            modulation_map(resize_mask(mask, (h, w)), 1.0, 1.0)
            for _, h, w in pipeline.backbone.cfg.site_shapes()
        ]
        infer_out, _ = pipeline.backbone(z, 500, text, fuse_fn=make_fuse_fn(feats, mods))
    assert torch.equal(train_out, infer_out)


# ---------------------------------------------------------------------------
# criterion: instruction grammar


def test_criterion_instruction_grammar_1000_round_trips():
    rng = np.random.default_rng(42)
    words = (
        "the a dog cat sign pagoda flower bush leaves building person red green "
        "blue striped checkered solid disk square triangle sand beach front old"
    ).split()
    failures = 0
    for i in range(1000):
        n = int(rng.integers(1, 6))
        caption = " ".join(words[int(k)] for k in rng.integers(0, len(words), size=n))
        task = Task.BOKEH_RESTORE if rng.random() < 0.5 else Task.LOCAL_RESTORE
        s1 = int(rng.integers(0, 401)) / 100.0
        s2 = int(rng.integers(0, 401)) / 100.0
        instr = Instruction(task, caption, s1, s2)
        if parse_inference_instruction(render_inference_instruction(instr)) != instr:
            failures += 1
    assert failures == 0


def test_criterion_malformed_corpus_rejected():
    assert len(MALFORMED_CORPUS) == 20
    for text in MALFORMED_CORPUS:
        with pytest.raises(MalformedInstruction):
            parse_inference_instruction(text)


# ---------------------------------------------------------------------------
# criterion: forward noising + cosine schedule oracle


def test_criterion_forward_noise_monte_carlo_variance():
    schedule = make_cosine_schedule(1000)
    rng = np.random.default_rng(3)
    n = 10_000
    for t in (10, 250, 500, 750, 990):
        z0 = rng.standard_normal(n)
        eps = rng.standard_normal(n)
        zt = forward_noise(z0, t, eps, schedule)
        expected = schedule.alpha_bar[t] * 1.0 + (1.0 - schedule.alpha_bar[t])
        assert abs(float(zt.var()) - expected) <= 0.02 * expected


def test_criterion_cosine_schedule_matches_oracle():
    for T in (10, 50, 1000):
        got = make_cosine_schedule(T).alpha_bar
        assert np.abs(got - cosine_oracle(T)).max() <= 1e-12


# ---------------------------------------------------------------------------
# criterion: gradient check of the combined loss (miniature config, 64-bit)


def test_criterion_gradient_check_combined_loss():
    torch.manual_seed(0)
    unet = UNetBackbone(MINI_MODEL).double()
    unet.requires_grad_(False)
    embedder = TextEmbedder(MINI_MODEL).double()
    embedder.requires_grad_(False)
    control = ControlBranch(unet).double()
    decoder = MaskDecoder(MINI_MODEL.n_sites, MINI_MODEL.n_tokens, hidden=8, groups=4).double()

    rng = np.random.default_rng(1)
    z_t = torch.from_numpy(rng.standard_normal((2, MINI_MODEL.latent_channels, 8, 8)))
    eps = torch.from_numpy(rng.standard_normal(z_t.shape))
    lq = torch.from_numpy(rng.random((2, 3, 32, 32)))
    gt = torch.from_numpy((rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64))
    t = torch.tensor([100, 700])
    back_text = embedder("red disk")
    ctrl_text = embedder("make red disk clear")
    lam = 0.5

    def loss_value():
        feats, pyramid = control(lq, ctrl_text, z_t, t)
        logits = decoder(pyramid)
        eps_hat, _ = unet(z_t, t, back_text, fuse_fn=make_fuse_fn(feats, 1.0))
        total, _, _ = training_loss(eps, eps_hat, logits, gt, lam)
        return total

    loss = loss_value()
    loss.backward()

    params = [
        p
        for p in list(control.parameters()) + list(decoder.parameters())
        if p.grad is not None and float(p.grad.abs().max()) > 0
    ]
    assert len(params) > 10
    checked = 0
    for pi in rng.choice(len(params), size=8, replace=False):
        p = params[int(pi)]
        flat = int(rng.integers(0, p.numel()))
        h = 1e-6
        with torch.no_grad():
            orig = p.view(-1)[flat].item()
            p.view(-1)[flat] = orig + h
            up = loss_value().item()
            p.view(-1)[flat] = orig - h
            dn = loss_value().item()
            p.view(-1)[flat] = orig
        numeric = (up - dn) / (2 * h)
        analytic = p.grad.view(-1)[flat].item()
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-10)
        assert rel < 1e-3, f"param {pi} flat {flat}: numeric {numeric} vs analytic {analytic}"
        checked += 1
    assert checked == 8


# ---------------------------------------------------------------------------
# criterion: metric oracles


def test_criterion_metric_oracles():
    img = np.array([[0.1, 0.0], [0.0, 0.0]])
    ref = np.zeros((2, 2))
    mask = np.zeros((2, 2), bool)
    mask[0, 0] = True
    assert psnr_y(img, ref, mask) == 20.0

    rng = np.random.default_rng(5)
    a, b = rng.random((20, 20, 3)), rng.random((20, 20, 3))
    assert abs(ssim_y(a, b) - direct_ssim_y(a, b)) < 1e-9
    mid = np.zeros((20, 20), bool)
    mid[4:16, 4:16] = True
    assert abs(ssim_y(a, b, mid) - direct_ssim_y(a, b, mid)) < 1e-9

    h1 = np.zeros((4, 4), bool)
    h1[:2] = True
    h2 = np.zeros((4, 4), bool)
    h2[1:3] = True
    assert bokeh_iou(h1, h1) == 1.0
    assert bokeh_iou(h1, ~h1) == 0.0
    assert bokeh_iou(h1, h2) == 1.0 / 3.0
    assert bokeh_iou(np.zeros((4, 4), bool), np.zeros((4, 4), bool)) == 1.0

    ones = np.ones((20, 20), bool)
    assert psnr_y(a, b, ones) == psnr_y(a, b)
    assert abs(ssim_y(a, b, ones) - ssim_y(a, b)) < 1e-9


# ---------------------------------------------------------------------------
# criterion: toy end-to-end (headline run, cached)


def test_criterion_headline_codec_reconstruction(headline_numbers):
    assert headline_numbers["codec_psnr_held"] >= 28.0


def test_criterion_headline_pretrain_loss_halves(headline_numbers):
    curves = headline_numbers["pretrain_curves"]
    assert curves["diffusion_final_ema"] < 0.5 * curves["diffusion_initial_ema"]


def test_criterion_headline_samples_non_degenerate(headline_numbers):
    s = headline_numbers["samples"]
    ratio = s["sample_lapvar_mean"] / s["corpus_lapvar_mean"]
    assert 1.0 / 3.0 <= ratio <= 3.0


def test_criterion_headline_a_mask_iou(headline_numbers):
    assert headline_numbers["mask_iou_mean"] >= 0.70


def test_criterion_headline_attention_localizes_subject(headline_numbers):
    attn = headline_numbers["attention"]
    assert attn["subject_attn_inside_mean"] > attn["subject_attn_outside_mean"]


def test_criterion_headline_b_locality_ratio(headline_numbers):
    sweep = headline_numbers["sweep"]
    tgt = [sweep[str(s)]["target_psnr_mean"] for s in headline.SWEEP_S1]
    bg = [sweep[str(s)]["bg_psnr_mean"] for s in headline.SWEEP_S1]
    tgt_range = max(tgt) - min(tgt)
    bg_range = max(bg) - min(bg)
    assert tgt_range >= 2.0 * bg_range


def test_criterion_headline_c_monotone_trend(headline_numbers):
    sweep = headline_numbers["sweep"]
    tgt = [sweep[str(s)]["target_psnr_mean"] for s in headline.SWEEP_S1]
    inversions = sum(1 for a, b in zip(tgt, tgt[1:]) if b < a)
    assert inversions <= 1


def test_criterion_headline_d_bokeh_preservation(headline_numbers):
    b = headline_numbers["bokeh"]
    assert abs(b["blur_fraction_out_mean"] - b["blur_fraction_lq_mean"]) <= 0.15
    assert b["target_lapvar_out_mean"] > b["target_lapvar_lq_mean"]


# ---------------------------------------------------------------------------
# criterion: end-to-end determinism (single-threaded mini pipeline, twice)


def _mini_pipeline_outputs() -> bytes:
    torch.set_num_threads(1)
    corpus = build_synthetic_corpus(24, 64, seed=51)
    bokeh = build_synthetic_corpus(8, 64, seed=52, bokeh=True)
    pc = PretrainConfig(
        model=headline.PRETRAIN.model, codec_steps=30, codec_lr_decay=(),
        diffusion_steps=30, batch_size=8,
    )
    backbone = pretrain_backbone(corpus.triplets, pc, seed=9)
    cfg = TrainConfig(
        learning_rate=1e-3, batch_size=4, stage1_steps=8, stage2_steps=4, seed=9,
        degradation=DegradationConfig(), checkpoint_every=0, deterministic=True,
    )
    control = Trainer(backbone, cfg).run(corpus.triplets, bokeh.triplets)
    pipeline = RestorePipeline(backbone, control)
    blob = hashlib.sha256()
    for i in (0, 3, 7):
        trip = corpus.triplets[i]
        res = pipeline.restore(
            RestoreRequest(
                lq_image=trip.image,
                instruction_text=render_inference_instruction(
                    Instruction(Task.LOCAL_RESTORE, trip.caption, 0.7, 1.0)
                ),
                steps=5,
                seed=100 + i,
            )
        )
        blob.update(encode_png_bytes(res.output_image))
        blob.update(encode_png_bytes(res.predicted_mask))
    return blob.digest()


def test_criterion_full_pipeline_determinism():
    try:
        first = _mini_pipeline_outputs()
        second = _mini_pipeline_outputs()
    finally:
        torch.set_num_threads(2)
    assert first == second


# ---------------------------------------------------------------------------
# criterion: service contract


def test_criterion_service_contract(tiny_bundle_path, tiny_corpus):
    import base64

    from fastapi.testclient import TestClient

    from region_restore.service import ServiceConfig, create_app

    app = create_app(ServiceConfig(checkpoint_path=str(tiny_bundle_path), max_image_side=128))
    client = TestClient(app)
    assert client.get("/api/health").status_code == 503
    app.state.load()
    health = client.get("/api/health")
    assert health.status_code == 200 and health.json()["status"] == "ok"

    img_b64 = base64.b64encode(encode_png_bytes(tiny_corpus.triplets[0].image)).decode()
    bad = client.post(
        "/api/restore", json={"image": img_b64, "instruction": "make it nice", "seed": 1}
    )
    assert bad.status_code == 400 and "instruction" in bad.json()["detail"]

    req = {
        "image": img_b64,
        "instruction": "make red striped disk clear with 1.0, and make other parts with 1.0",
        "seed": 4,
        "steps": 3,
    }
    first = client.post("/api/restore", json=req)
    second = client.post("/api/restore", json=req)
    assert first.status_code == second.status_code == 200
    assert first.json()["image"] == second.json()["image"]
    assert first.json()["mask"] == second.json()["mask"]
