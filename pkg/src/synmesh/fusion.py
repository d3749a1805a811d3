"""Cross-pathway fusion: paired cross-attention levels + convolutional merge.

Each level runs two cross-attentions in parallel — queries from one pathway
against keys/values of the other — with residual and feed-forward sublayers.
Following the interface convention this package adopts, the output produced
with *queries from pathway P against keys/values of pathway D* is labeled the
refined D-feature (it carries P's token count); ``swap_labels`` flips that
convention for ablation.

``fuse`` supports three modes: ``cmf`` (the full path: reshape both refined
maps to the encoder grid, concatenate channels, and run a conv+BN+ReLU stack)
plus the ``sum``/``concat`` baselines, which bypass the cross-attention levels
entirely and operate on the raw pathway features through bias-free linear
adapters.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import FeatureMap
from .errors import DomainError, ShapeError

FUSE_MODES = ("sum", "concat", "cmf")


class CrossAttention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim ** -0.5
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x_q, x_kv):
        b, tq, d = x_q.shape
        q = self.q(self.norm_q(x_q)).view(b, tq, self.n_heads, self.head_dim).transpose(1, 2)
        kv = self.norm_kv(x_kv)
        k = self.k(kv).view(b, -1, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v(kv).view(b, -1, self.n_heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, d)
        return self.proj(out), attn


class _FFN(nn.Module):
    def __init__(self, dim, ratio=2.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return x + self.fc2(F.gelu(self.fc1(self.norm(x))))


class ExchangeLevel(nn.Module):
    """One paired cross-attention level (both directions, residual + FFN)."""

    def __init__(self, dim, n_heads):
        super().__init__()
        self.attn_d = CrossAttention(dim, n_heads)   # queries: P, keys/values: D
        self.attn_p = CrossAttention(dim, n_heads)   # queries: D, keys/values: P
        self.ffn_d = _FFN(dim)
        self.ffn_p = _FFN(dim)

    def forward(self, x_d, x_p):
        y_d, attn_d = self.attn_d(x_p, x_d)
        y_p, attn_p = self.attn_p(x_d, x_p)
        out_d = self.ffn_d(x_p + y_d)
        out_p = self.ffn_p(x_d + y_p)
        return out_d, out_p, attn_d, attn_p


class ConvFuseUnit(nn.Module):
    """3x3 conv + batch normalization + ReLU."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class FusionState(nn.Module):
    """Positional embeddings, exchange levels, conv merge stack, and adapters.

    ``enc_grid``/``gen_grid`` fix the token counts of the two pathways;
    ``d_raw_enc``/``d_raw_gen`` are the raw pathway widths used by the
    sum/concat baselines.
    """

    def __init__(self, dim: int, n_heads: int, levels: int,
                 enc_grid: tuple[int, int], gen_grid: tuple[int, int],
                 d_raw_enc: int, d_raw_gen: int, n_conv: int = 3,
                 swap_labels: bool = False):
        super().__init__()
        self.dim = dim
        self.enc_grid = tuple(enc_grid)
        self.gen_grid = tuple(gen_grid)
        self.swap_labels = swap_labels
        t_enc = enc_grid[0] * enc_grid[1]
        t_gen = gen_grid[0] * gen_grid[1]
        self.pos_enc = nn.Parameter(torch.randn(1, t_enc, dim) * 0.02)
        self.pos_gen = nn.Parameter(torch.randn(1, t_gen, dim) * 0.02)
        self.levels = nn.ModuleList(ExchangeLevel(dim, n_heads) for _ in range(levels))
        convs = []
        in_ch = dim * 2
        for _ in range(max(n_conv, 1)):
            convs.append(ConvFuseUnit(in_ch, dim))
            in_ch = dim
        self.merge = nn.ModuleList(convs)
        self.sum_adapt_enc = nn.Linear(d_raw_enc, dim, bias=False)
        self.sum_adapt_gen = nn.Linear(d_raw_gen, dim, bias=False)
        self.concat_adapt = nn.Linear(d_raw_enc + d_raw_gen, dim, bias=False)
        self.last_attn: list = []


def exchange(feat_enc: FeatureMap, feat_gen: FeatureMap,
             state: FusionState) -> tuple[FeatureMap, FeatureMap]:
    """Run the paired cross-attention levels; returns (refined_enc, refined_gen).

    Inputs must already be in the fusion width.  Positional embeddings are added
    once, before the first level.  Each level relabels: the encoder-side output
    is queried by (and therefore rides) the generative token set and vice
    versa, so the carried grids swap once per level.  ``state.swap_labels``
    names the outputs after the query side of the final level instead.
    """
    if feat_enc.tokens.shape[-1] != state.dim or feat_gen.tokens.shape[-1] != state.dim:
        raise ShapeError("exchange inputs must match the fusion width "
                         f"{state.dim}, got {feat_enc.tokens.shape[-1]} and "
                         f"{feat_gen.tokens.shape[-1]}")
    x_d = feat_enc.tokens + state.pos_enc
    x_p = feat_gen.tokens + state.pos_gen
    grid_d, grid_p = state.enc_grid, state.gen_grid
    state.last_attn = []
    for level in state.levels:
        y_d, y_p, attn_d, attn_p = level(x_d, x_p)
        state.last_attn.append((attn_d, attn_p))
        x_d, x_p = y_d, y_p
        grid_d, grid_p = grid_p, grid_d
    out_d = FeatureMap(tokens=x_d, grid_hw=grid_d)
    out_p = FeatureMap(tokens=x_p, grid_hw=grid_p)
    if state.swap_labels:
        return out_p, out_d
    return out_d, out_p


def _to_grid(feat: FeatureMap, hw: tuple[int, int]) -> torch.Tensor:
    grid = feat.as_grid()
    if feat.grid_hw != tuple(hw):
        grid = F.interpolate(grid, size=tuple(hw), mode="bilinear", align_corners=False)
    return grid


def fuse(feat_a: FeatureMap, feat_b: FeatureMap, mode: str,
         state: FusionState) -> torch.Tensor:
    """Merge two pathway maps into (B, dim, h_enc, w_enc).

    ``cmf`` expects the refined maps from :func:`exchange`; ``sum`` and
    ``concat`` expect the *raw* encoder/generative maps (in that order) and
    bypass the exchange levels, as the ablation baselines require.
    """
    if mode not in FUSE_MODES:
        raise DomainError(f"unknown fusion mode {mode!r}; have {FUSE_MODES}")
    hw = state.enc_grid
    if mode == "sum":
        a = state.sum_adapt_enc(feat_a.tokens)
        b = state.sum_adapt_gen(feat_b.tokens)
        grid_a = _to_grid(FeatureMap(a, feat_a.grid_hw), hw)
        grid_b = _to_grid(FeatureMap(b, feat_b.grid_hw), hw)
        return grid_a + grid_b
    if mode == "concat":
        grid_a = _to_grid(feat_a, hw)
        grid_b = _to_grid(feat_b, hw)
        stacked = torch.cat([grid_a, grid_b], dim=1).permute(0, 2, 3, 1)
        return state.concat_adapt(stacked).permute(0, 3, 1, 2)
    grid_a = _to_grid(feat_a, hw)
    grid_b = _to_grid(feat_b, hw)
    x = torch.cat([grid_a, grid_b], dim=1)
    for conv in state.merge:
        x = conv(x)
    return x
