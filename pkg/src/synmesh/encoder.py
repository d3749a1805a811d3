"""Discriminative pathway: a small ViT that also returns its attention maps.

Pre-norm blocks, learnable positional embeddings, no class token (global pooling
is done by consumers when they need it).  ``encode`` returns the final token grid
plus the attention tensors of the configured blocks — those maps later steer the
dictionary compensation and are dumped by the attention visualizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .errors import ShapeError


@dataclass
class FeatureMap:
    """Token features (B, T, d) plus the (rows, cols) token grid shape."""

    tokens: torch.Tensor
    grid_hw: tuple[int, int]

    def as_grid(self) -> torch.Tensor:
        """(B, T, d) -> (B, d, rows, cols)."""
        b, t, d = self.tokens.shape
        rows, cols = self.grid_hw
        if rows * cols != t:
            raise ShapeError(f"grid {self.grid_hw} does not tile {t} tokens")
        return self.tokens.transpose(1, 2).reshape(b, d, rows, cols)


@dataclass
class AttentionMap:
    layer_index: int
    weights: torch.Tensor  # (B, heads, T_query, T_key), rows sum to 1


class SelfAttention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out), attn


class EncoderBlock(nn.Module):
    def __init__(self, dim, n_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class ViTEncoder(nn.Module):
    """Patchify -> add positional embedding -> stack of pre-norm blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h, w = cfg.image_hw
        if h % cfg.patch_size or w % cfg.patch_size:
            raise ShapeError(f"image {cfg.image_hw} not divisible by patch {cfg.patch_size}")
        self.grid_hw = (h // cfg.patch_size, w // cfg.patch_size)
        n_tokens = self.grid_hw[0] * self.grid_hw[1]
        self.patch = nn.Conv2d(3, cfg.d_model, cfg.patch_size, stride=cfg.patch_size)
        self.pos = nn.Parameter(torch.zeros(1, n_tokens, cfg.d_model))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.d_model, cfg.n_heads) for _ in range(cfg.n_blocks))
        self.norm = nn.LayerNorm(cfg.d_model)
        self.attn_taps = tuple(i % cfg.n_blocks for i in cfg.attn_taps)

    def encode(self, image: torch.Tensor) -> tuple[FeatureMap, list[AttentionMap]]:
        """(B, 3, H, W) -> final FeatureMap + attention maps of the tapped blocks."""
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) image, got {tuple(image.shape)}")
        x = self.patch(image).flatten(2).transpose(1, 2)
        x = x + self.pos
        taps = []
        for i, block in enumerate(self.blocks):
            x, attn = block(x)
            if i in self.attn_taps:
                taps.append(AttentionMap(layer_index=i, weights=attn))
        return FeatureMap(tokens=self.norm(x), grid_hw=self.grid_hw), taps

    forward = encode
