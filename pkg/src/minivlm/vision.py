"""ViT-style patch encoder producing the visual feature grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import VisionConfig
from .tensor import Tensor


@dataclass
class VisualFeatures:
    tokens: Tensor  # [G, D] or [B, G, D], patches in row-major grid order
    grid_side: int

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2]


def normalize_image(pixels) -> np.ndarray:
    """Map [0, 1] pixels to [-1, 1] per channel."""
    return (np.asarray(pixels, dtype=T.get_default_dtype()) - 0.5) / 0.5


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, C, H, W] -> [B, G, C*p*p], patches row-major, (c, dy, dx) within a patch."""
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not divisible into {patch_size}px patches")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * patch_size * patch_size)


def patch_embed(images, cfg: VisionConfig, weight: Tensor, bias: Tensor, pos: Tensor) -> Tensor:
    """Flatten each patch, project it linearly and add its position embedding."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ValueError(
            f"expected images of shape [B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}], got {images.shape}"
        )
    patches = Tensor(patchify(images, cfg.patch_size), dtype=weight.dtype)
    return T.add(T.add(T.matmul(patches, weight), bias), pos)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block with bidirectional attention and a GELU MLP."""

    def __init__(self, rng, dim: int, num_heads: int, mlp_ratio: int):
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(rng, dim, 3 * dim)
        self.proj = nn.Linear(rng, dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(rng, dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(rng, mlp_ratio * dim, dim)
        self._heads = num_heads

    def forward(self, x: Tensor, probs_out=None) -> Tensor:
        d = x.shape[-1]
        qkv = self.qkv(self.norm1(x))
        q, k, v = (nn.split_heads(qkv[..., i * d : (i + 1) * d], self._heads) for i in range(3))
        x = x + self.proj(nn.merge_heads(nn.attention(q, k, v, causal=False, probs_out=probs_out)))
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


class VisionEncoder(nn.Module):
    """Patch embedding, ``num_layers`` encoder blocks and a final LayerNorm.

    No class token: every patch token is passed on to the projector.
    """

    def __init__(self, cfg: VisionConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.patch_weight = nn.param(rng, cfg.patch_dim, cfg.embed_dim)
        self.patch_bias = nn.zeros(cfg.embed_dim)
        self.pos_embed = nn.param(rng, cfg.num_patches, cfg.embed_dim)
        self.blocks = [EncoderBlock(rng, cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.num_layers)]
        self.norm = nn.LayerNorm(cfg.embed_dim)

    @property
    def config(self) -> VisionConfig:
        return self._cfg

    def patch_embed(self, images) -> Tensor:
        return patch_embed(images, self._cfg, self.patch_weight, self.patch_bias, self.pos_embed)

    def forward(self, images, probs_out=None) -> VisualFeatures:
        """Encode normalized pixels [C, H, W] or [B, C, H, W]."""
        images = np.asarray(images)
        single = images.ndim == 3
        x = self.patch_embed(images[None] if single else images)
        for block in self.blocks:
            x = block(x, probs_out=probs_out)
        x = self.norm(x)
        if single:
            x = T.reshape(x, x.shape[1:])
        return VisualFeatures(tokens=x, grid_side=self._cfg.grid_side)

    encode = forward
