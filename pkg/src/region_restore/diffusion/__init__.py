from .schedule import NoiseSchedule, make_cosine_schedule, forward_noise
from .backbone import (
    BackboneConfig,
    TextEmbedder,
    LatentCodec,
    UNetBackbone,
    ShapeError,
)
from .sampler import ddim_sample, strided_timesteps
from .pretrain import (
    DivergenceDetected,
    PretrainConfig,
    pretrain_backbone,
    save_backbone,
    load_backbone,
    instantiate_backbone,
    backbone_param_digest,
)

__all__ = [
    "NoiseSchedule",
    "make_cosine_schedule",
    "forward_noise",
    "BackboneConfig",
    "TextEmbedder",
    "LatentCodec",
    "UNetBackbone",
    "ShapeError",
    "ddim_sample",
    "strided_timesteps",
    "DivergenceDetected",
    "PretrainConfig",
    "pretrain_backbone",
    "save_backbone",
    "load_backbone",
    "instantiate_backbone",
    "backbone_param_digest",
]
