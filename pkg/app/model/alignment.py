"""Cross-attention alignment producing similarity representations (SimR).

Text global features query image tokens (t2i) and image global features query
text tokens (i2t) through one shared attention block.  The per-pair SimR vectors
are projected to similarity matrices by a learned head, or scored with one of
two cosine schemes.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from app.config import ModelConfig
from app.exceptions import ConfigError, UnavailableError
from app.model.layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from app.models import FeatureBundle, SimilarityOutput
from app import tensor as T
from app.tensor import Tensor, parameter

logger = logging.getLogger(__name__)

KV_CHOICES = ("global", "local", "both")
COSINE_HEADS = ("cos_proj_proj", "cos_proj_orig")
LEARNED_HEADS = ("linear", "mlp")


@dataclass
class KeyValueSet:
    """Key/value tokens for each image and each text plus their validity masks."""

    image: Tensor
    image_valid: np.ndarray
    text: Tensor
    text_valid: np.ndarray
    local_count: int

    @property
    def image_len(self) -> int:
        return self.image.shape[1]


def select_kv(features: FeatureBundle, kv_choice: str) -> KeyValueSet:
    """global: one token per item; local: the L / M local tokens; both: local tokens + the global token last."""
    if kv_choice not in KV_CHOICES:
        raise ConfigError(f"unknown kv_choice {kv_choice!r}; expected one of {', '.join(KV_CHOICES)}")
    n_img, n_txt, dim = features.num_images, features.num_texts, features.dim
    img_global = features.x_global.reshape(n_img, 1, dim)
    txt_global = features.y_global.reshape(n_txt, 1, dim)
    if kv_choice == "global":
        return KeyValueSet(
            img_global, np.ones((n_img, 1), bool), txt_global, np.ones((n_txt, 1), bool), local_count=0
        )
    img_valid = np.ones(features.x_local.shape[:2], bool)
    txt_valid = np.asarray(features.y_valid, bool)
    if kv_choice == "local":
        return KeyValueSet(
            features.x_local, img_valid, features.y_local, txt_valid, local_count=img_valid.shape[1]
        )
    return KeyValueSet(
        T.concat([features.x_local, img_global], axis=1),
        np.concatenate([img_valid, np.ones((n_img, 1), bool)], axis=1),
        T.concat([features.y_local, txt_global], axis=1),
        np.concatenate([txt_valid, np.ones((n_txt, 1), bool)], axis=1),
        local_count=img_valid.shape[1],
    )


def cosine(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity over the last axis; a zero vector scores 0."""
    return (T.l2_normalize(a, axis=-1, eps=eps) * T.l2_normalize(b, axis=-1, eps=eps)).sum(axis=-1)


def count_zero_norms(*tensors: Tensor, eps: float = 1e-12) -> int:
    return sum(int((np.linalg.norm(t.data, axis=-1) <= eps).sum()) for t in tensors)


class CrossAttentionAlignment(Module):
    """Shared-weight cross-attention block with a similarity head."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        dim = config.dim
        self.config = config
        self.heads = config.heads
        self.attn = MultiHeadAttention(dim, config.heads, rng)
        self.norm = LayerNorm(dim)
        self.ff = FeedForward(dim, config.resolved_ff_dim, rng)
        self.head: Optional[Module] = None
        if config.head_kind == "linear":
            self.head = Linear(dim, 1, rng)
        elif config.head_kind == "mlp":
            self.head = FeedForward(dim, config.resolved_mlp_hidden, rng, out_dim=1)

    def cross_attend(self, queries: Tensor, kv: Tensor, kv_valid: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        """Every query against every key set.

        queries: Q x D; kv: N x K_len x D; kv_valid: N x K_len.
        Returns SR (Q x N x D) and attention weights (Q x N x heads x K_len).
        """
        n_q, dim = queries.shape
        n_kv, k_len, _ = kv.shape
        query = queries.reshape(n_q, 1, 1, dim)
        key_value = kv.reshape(1, n_kv, k_len, dim)
        valid = np.asarray(kv_valid, bool).reshape(1, n_kv, k_len)
        attended, weights = self.attn(query, key_value, valid)
        attended = attended.reshape(n_q, n_kv, dim)
        if self.config.residual:
            # the expanded query is added back before normalization
            h = self.norm(attended + queries.reshape(n_q, 1, dim))
            sr = h + self.ff(h)
        else:
            sr = self.ff(self.norm(attended))
        return sr, weights.data.reshape(n_q, n_kv, self.heads, k_len)

    def cross_attend_t2i(self, features: FeatureBundle, kv: Optional[KeyValueSet] = None):
        kv = kv or select_kv(features, self.config.kv_choice)
        return self.cross_attend(features.y_global, kv.image, kv.image_valid)

    def cross_attend_i2t(self, features: FeatureBundle, kv: Optional[KeyValueSet] = None):
        kv = kv or select_kv(features, self.config.kv_choice)
        return self.cross_attend(features.x_global, kv.text, kv.text_valid)

    def project_similarity(self, sr: Tensor) -> Tensor:
        """Apply the learned head over the last axis: (A x B x D) -> (A x B)."""
        if self.head is None:
            raise ConfigError(
                f"head_kind {self.config.head_kind!r} has no projection head; expected one of {LEARNED_HEADS}"
            )
        return self.head(sr).reshape(sr.shape[:-1])

    def cosine_variant_scores(
        self, features: FeatureBundle, sr_t2i: Tensor, sr_i2t: Tensor, variant: str
    ) -> Tuple[Tensor, Tensor]:
        """Score pairs by cosine similarity of SimR vectors instead of a learned head."""
        sr_i2t_as_t2i = T.swapaxes(sr_i2t, 0, 1)
        if variant == "cos_proj_proj":
            s_t2i = cosine(sr_i2t_as_t2i, sr_t2i)
        elif variant == "cos_proj_orig":
            n_txt, n_img = sr_t2i.shape[:2]
            y_g = features.y_global.reshape(n_txt, 1, features.dim)
            x_g = features.x_global.reshape(1, n_img, features.dim)
            s_t2i = cosine(sr_i2t_as_t2i, y_g) + cosine(sr_t2i, x_g)
        else:
            raise ConfigError(f"unknown cosine variant {variant!r}; expected one of {COSINE_HEADS}")
        return s_t2i, T.transpose(s_t2i)

    def forward(self, features: FeatureBundle) -> SimilarityOutput:
        kv = select_kv(features, self.config.kv_choice)
        sr_t2i, attn_t2i = self.cross_attend_t2i(features, kv)
        sr_i2t, attn_i2t = self.cross_attend_i2t(features, kv)
        zeros = 0
        if self.config.head_kind in COSINE_HEADS:
            s_t2i, s_i2t = self.cosine_variant_scores(features, sr_t2i, sr_i2t, self.config.head_kind)
            scored = (sr_t2i, sr_i2t)
            if self.config.head_kind == "cos_proj_orig":
                scored += (features.x_global, features.y_global)
            zeros = count_zero_norms(*scored)
            if zeros:
                logger.warning("%d zero-norm vectors scored with cosine 0", zeros)
        else:
            s_t2i, s_i2t = self.project_similarity(sr_t2i), self.project_similarity(sr_i2t)
        return SimilarityOutput(
            s_t2i=s_t2i,
            s_i2t=s_i2t,
            sr_t2i=sr_t2i,
            sr_i2t=sr_i2t,
            attn_t2i=attn_t2i,
            attn_i2t=attn_i2t,
            zero_norm_count=zeros,
        )


class GlobalCosineAlignment(Module):
    """Cross-attention switched off: exp(s) * cos(y_g, x_g) with a learnable log scale."""

    def __init__(self, config: ModelConfig, init_log_scale: float = float(np.log(10.0))):
        self.config = config
        self.log_scale = parameter(np.array(init_log_scale))

    def forward(self, features: FeatureBundle) -> SimilarityOutput:
        y_g = T.l2_normalize(features.y_global, axis=-1)
        x_g = T.l2_normalize(features.x_global, axis=-1)
        s_t2i = T.exp(self.log_scale) * (y_g @ T.transpose(x_g))
        return SimilarityOutput(s_t2i=s_t2i, s_i2t=T.transpose(s_t2i))

    def cross_attend_t2i(self, *args, **kwargs):
        raise UnavailableError("cross-attention is disabled; no attention maps are produced")

    cross_attend_i2t = cross_attend_t2i


def build_alignment(config: ModelConfig, rng: np.random.Generator) -> Module:
    if config.cross_attention:
        return CrossAttentionAlignment(config, rng)
    return GlobalCosineAlignment(config)
