import numpy as np
import pytest
import torch

from region_restore.data_engine import build_synthetic_corpus
from region_restore.degradation import DegradationConfig
from region_restore.diffusion import BackboneConfig, PretrainConfig, pretrain_backbone
from region_restore.training import TrainConfig, Trainer

torch.set_num_threads(2)

# Small but real: enough capacity for smoke behaviour, fast enough for units.
TINY_MODEL = BackboneConfig(
    image_size=64, latent_channels=8, channels=(24, 32, 48), text_dim=24,
    n_tokens=8, vocab_size=512, time_dim=48, groups=8,
)

# Miniature 2-site config (single level + middle, latent 8x8) for gradchecks.
MINI_MODEL = BackboneConfig(
    image_size=32, latent_channels=4, channels=(16,), text_dim=16,
    n_tokens=4, vocab_size=128, time_dim=32, groups=4,
)


@pytest.fixture(scope="session")
def tiny_corpus():
    return build_synthetic_corpus(24, 64, seed=1)


@pytest.fixture(scope="session")
def tiny_bokeh_corpus():
    return build_synthetic_corpus(8, 64, seed=2, bokeh=True)


@pytest.fixture(scope="session")
def tiny_backbone(tiny_corpus):
    cfg = PretrainConfig(model=TINY_MODEL, codec_steps=60, diffusion_steps=40, batch_size=8)
    return pretrain_backbone(tiny_corpus.triplets, cfg, seed=0)


@pytest.fixture(scope="session")
def tiny_train_config():
    return TrainConfig(
        learning_rate=1e-3, batch_size=4, stage1_steps=8, stage2_steps=4, seed=3,
        degradation=DegradationConfig(), checkpoint_every=0, log_every=1,
    )


@pytest.fixture(scope="session")
def tiny_bundle(tiny_backbone, tiny_corpus, tiny_bokeh_corpus, tiny_train_config):
    """(backbone_ckpt, control_ckpt) after a short but real training run."""
    trainer = Trainer(tiny_backbone, tiny_train_config)
    control = trainer.run(tiny_corpus.triplets, tiny_bokeh_corpus.triplets)
    return tiny_backbone, control


@pytest.fixture(scope="session")
def tiny_bundle_path(tiny_bundle, tmp_path_factory):
    from region_restore.cli import save_bundle

    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    save_bundle(*tiny_bundle, path)
    return path
