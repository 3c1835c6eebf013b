"""Full image-text model: both encoders wired into the alignment module."""
import logging

import numpy as np
from pydantic import ValidationError

from app.config import ModelConfig
from app.data.checkpoint import load_checkpoint, load_checkpoint_config
from app.exceptions import DataError
from app.model.alignment import build_alignment
from app.model.encoders import ImageEncoder, TextEncoder
from app.model.layers import Module
from app.model.loss import total_loss
from app.models import FeatureBundle, LossBreakdown, SimilarityOutput

logger = logging.getLogger(__name__)


class SimRModel(Module):
    def __init__(
        self,
        config: ModelConfig,
        vocab_size: int,
        max_len: int,
        num_patches: int,
        patch_dim: int,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.config = config
        self.image_encoder = ImageEncoder(
            num_patches, patch_dim, config.dim, config.enc_layers, config.enc_heads,
            config.resolved_ff_dim, rng,
        )
        self.text_encoder = TextEncoder(
            vocab_size, max_len, config.dim, config.enc_layers, config.enc_heads,
            config.resolved_ff_dim, rng,
        )
        self.alignment = build_alignment(config, rng)
        logger.debug("built SimR model with %d parameters", self.num_parameters())

    def encode(self, patches, ids: np.ndarray, pad_mask: np.ndarray) -> FeatureBundle:
        x_local, x_global = self.encode_image(patches)
        y_local, y_global = self.encode_text(ids, pad_mask)
        return FeatureBundle(x_local, x_global, y_local, y_global, y_valid=~np.asarray(pad_mask, bool))

    def encode_image(self, patches):
        return self.image_encoder(patches)

    def encode_text(self, ids: np.ndarray, pad_mask: np.ndarray):
        return self.text_encoder(ids, pad_mask)

    def similarity(self, features: FeatureBundle) -> SimilarityOutput:
        return self.alignment(features)

    def forward(self, patches, ids: np.ndarray, pad_mask: np.ndarray) -> SimilarityOutput:
        return self.similarity(self.encode(patches, ids, pad_mask))

    def loss(self, patches, ids: np.ndarray, pad_mask: np.ndarray) -> LossBreakdown:
        out = self.forward(patches, ids, pad_mask)
        return total_loss(out.s_t2i, out.s_i2t)

    @property
    def has_attention(self) -> bool:
        return self.config.cross_attention


def model_metadata(dataset) -> dict:
    """Dataset dimensions a checkpoint needs to rebuild its model."""
    return {
        "vocab_size": len(dataset.vocab),
        "max_len": dataset.max_len,
        "num_patches": dataset.num_patches,
        "patch_dim": dataset.patch_dim,
        "grid_dims": list(dataset.grid_dims),
        "concepts": list(dataset.concepts),
    }


def build_model(config: ModelConfig, metadata: dict, seed: int = 0) -> SimRModel:
    return SimRModel(
        config,
        vocab_size=metadata["vocab_size"],
        max_len=metadata["max_len"],
        num_patches=metadata["num_patches"],
        patch_dim=metadata["patch_dim"],
        seed=seed,
    )


def load_model(path):
    """Rebuild a model from a checkpoint and its JSON sidecar; returns (model, sidecar)."""
    sidecar = load_checkpoint_config(path)
    try:
        config = ModelConfig.model_validate(sidecar["run"]["model"])
        metadata = sidecar["dataset"]
    except (KeyError, ValidationError) as exc:
        raise DataError(f"checkpoint sidecar for {path} is incomplete: {exc}") from None
    model = build_model(config, metadata)
    model.load_state_dict(load_checkpoint(path))
    return model, sidecar
