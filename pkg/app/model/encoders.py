"""Toy image and text encoders producing local + global features in a shared space."""
import logging
from typing import List, Tuple

import numpy as np

from app.exceptions import DimensionError, InputError
from app.model.layers import EncoderBlock, Embedding, LayerNorm, Linear, Module, uniform_init
from app.tensor import Tensor, as_tensor, parameter

logger = logging.getLogger(__name__)


class ImageEncoder(Module):
    """Patch embedding + positional embedding + self-attention blocks.

    ``x_local`` is the projected token sequence, ``x_global`` its mean over patches.
    """

    def __init__(
        self,
        num_patches: int,
        patch_dim: int,
        dim: int,
        layers: int,
        heads: int,
        ff_dim: int,
        rng: np.random.Generator,
    ):
        self.num_patches, self.patch_dim = num_patches, patch_dim
        self.patch_embed = Linear(patch_dim, dim, rng)
        self.pos_embed = parameter(uniform_init(rng, (num_patches, dim), dim))
        self.blocks: List[EncoderBlock] = [EncoderBlock(dim, heads, ff_dim, rng) for _ in range(layers)]
        self.norm = LayerNorm(dim)
        self.proj = Linear(dim, dim, rng)

    def forward(self, patches) -> Tuple[Tensor, Tensor]:
        patches = as_tensor(patches)
        if patches.ndim != 3 or patches.shape[1:] != (self.num_patches, self.patch_dim):
            raise DimensionError(
                f"encode_image: expected I x {self.num_patches} x {self.patch_dim} patches, "
                f"got shape {patches.shape}"
            )
        h = self.patch_embed(patches) + self.pos_embed
        for block in self.blocks:
            h = block(h)
        x_local = self.proj(self.norm(h))
        return x_local, x_local.mean(axis=1)


class TextEncoder(Module):
    """Token embedding + positional embedding + pad-masked self-attention blocks.

    Pad positions of ``y_local`` are zeroed and ``y_global`` is the mean over
    non-pad positions.
    """

    def __init__(
        self,
        vocab_size: int,
        max_len: int,
        dim: int,
        layers: int,
        heads: int,
        ff_dim: int,
        rng: np.random.Generator,
    ):
        self.vocab_size, self.max_len = vocab_size, max_len
        self.token_embed = Embedding(vocab_size, dim, rng)
        self.pos_embed = parameter(uniform_init(rng, (max_len, dim), dim))
        self.blocks: List[EncoderBlock] = [EncoderBlock(dim, heads, ff_dim, rng) for _ in range(layers)]
        self.norm = LayerNorm(dim)
        self.proj = Linear(dim, dim, rng)

    def forward(self, ids: np.ndarray, pad_mask: np.ndarray) -> Tuple[Tensor, Tensor]:
        ids = np.asarray(ids)
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if ids.ndim != 2 or ids.shape != pad_mask.shape or ids.shape[1] != self.max_len:
            raise DimensionError(
                f"encode_text: expected T x {self.max_len} ids and pad mask, "
                f"got {ids.shape} and {pad_mask.shape}"
            )
        valid = ~pad_mask
        empty = np.flatnonzero(~valid.any(axis=1))
        if empty.size:
            raise InputError(f"encode_text: sequences {empty.tolist()} contain only padding")
        if (ids[valid] < 0).any() or (ids[valid] >= self.vocab_size).any():
            raise InputError(f"encode_text: token ids outside [0, {self.vocab_size})")
        # ids beneath the mask never reach a valid position; pin them so lookup cannot fail
        ids = np.where(valid, ids, 0)

        h = self.token_embed(ids) + self.pos_embed
        for block in self.blocks:
            h = block(h, valid)
        keep = valid[..., None].astype(h.dtype)
        y_local = self.proj(self.norm(h)) * keep
        counts = valid.sum(axis=1, keepdims=True).astype(h.dtype)
        y_global = y_local.sum(axis=1) / counts
        return y_local, y_global
