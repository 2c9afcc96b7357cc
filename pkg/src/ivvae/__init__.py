"""Video VAE with keyframe-based temporal compression and group causal
convolutions, plus streaming inference, metrics and motion tooling."""
from .autoencoder import (
    LatentPosterior,
    ModelConfig,
    VideoVAE,
    build_model,
    decode,
    encode,
    parameter_count,
    sample_posterior,
)
from .convops import FeatureMap, FrameGrouping, make_frame_grouping
from .errors import IVVAEError
from .ktc import inflate_image_vae, init_ktc_from_image_vae

__version__ = "0.1.0"

__all__ = [
    "FeatureMap",
    "FrameGrouping",
    "IVVAEError",
    "LatentPosterior",
    "ModelConfig",
    "VideoVAE",
    "build_model",
    "decode",
    "encode",
    "inflate_image_vae",
    "init_ktc_from_image_vae",
    "make_frame_grouping",
    "parameter_count",
    "sample_posterior",
]
