"""Cross-pathway feature compensation and correlation alignment.

Each pathway owns a learnable feature dictionary.  Attention maps from one
pathway are condensed into per-token salience, which pools that pathway's tokens
into a handful of guidance tokens; the *other* pathway's features are then
refined by residual cross-attention over [dictionary entries; guidance tokens].
The alignment loss pushes both compensated maps toward the fused map using a
global cross-correlation with per-channel centering.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import AttentionMap, FeatureMap
from .errors import ShapeError

FLAT_EPS = 1e-6  # relative spread below which a salience vector counts as flat


def attention_salience(maps: list[AttentionMap], n_tokens: int) -> torch.Tensor:
    """Reduce attention tensors to one salience score per feature token.

    Self-attention maps (key axis == n_tokens) contribute the mean attention
    each token *receives*; cross-attention maps (query axis == n_tokens)
    contribute each token's peak attention onto any key — a focus measure that
    is flat exactly when the map is uniform.  Multiple maps are averaged.
    """
    if not maps:
        raise ShapeError("no attention maps given")
    per_map = []
    for m in maps:
        w = m.weights
        if w.ndim != 4:
            raise ShapeError(f"attention weights must be (B, heads, Q, K), got {tuple(w.shape)}")
        if w.shape[-1] == n_tokens:
            per_map.append(w.mean(dim=(1, 2)))
        elif w.shape[-2] == n_tokens:
            per_map.append(w.max(dim=-1).values.mean(dim=1))
        else:
            raise ShapeError(
                f"attention map {tuple(w.shape)} matches no axis of {n_tokens} tokens")
    return torch.stack(per_map).mean(dim=0)


class FeatureDictionary(nn.Module):
    """Learnable entry bank plus a projection for incoming guidance tokens."""

    def __init__(self, n_entries: int, dim: int):
        super().__init__()
        self.entries = nn.Parameter(torch.randn(n_entries, dim) * 0.02)
        self.guidance_proj = nn.Linear(dim, dim)


class CompensationWeights(nn.Module):
    """Q/K/V projections used by one pathway's compensation attention."""

    def __init__(self, dim: int):
        super().__init__()
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)


def dictionary_guidance(maps: list[AttentionMap] | None, feat: torch.Tensor,
                        n_guidance: int = 4) -> torch.Tensor:
    """Pool (B, T, d) tokens into (B, G, d) guidance tokens by salience rank.

    Tokens are sorted by salience and split into G contiguous rank blocks; each
    guidance token is its block's salience-weighted mean.  A block with zero
    total salience falls back to its unweighted mean; a flat (or absent)
    salience vector falls back to uniform pooling, replicating the global mean
    across all G tokens.
    """
    if feat.ndim != 3:
        raise ShapeError(f"features must be (B, T, d), got {tuple(feat.shape)}")
    b, t, d = feat.shape
    if n_guidance < 1:
        raise ShapeError(f"n_guidance must be >= 1, got {n_guidance}")
    salience = None if maps is None else attention_salience(maps, t)
    if salience is not None and salience.shape != (b, t):
        raise ShapeError(f"salience shape {tuple(salience.shape)} != (B, T)=({b}, {t})")

    bounds = torch.linspace(0, t, n_guidance + 1).round().long().tolist()
    out = []
    for i in range(b):
        s = None if salience is None else salience[i]
        if s is None:
            flat = True
        else:
            spread = float((s.max() - s.min()).detach())
            flat = spread <= FLAT_EPS * float(s.detach().abs().max().clamp_min(1e-30))
        if flat:
            pooled = feat[i].mean(dim=0, keepdim=True)
            out.append(pooled.expand(n_guidance, d))
            continue
        order = torch.argsort(s, descending=True, stable=True)
        tokens_sorted = feat[i][order]
        sal_sorted = s[order]
        rows = []
        for g in range(n_guidance):
            lo, hi = bounds[g], bounds[g + 1]
            if lo == hi:  # more guidance tokens than features: reuse the top block
                lo, hi = 0, max(bounds[1], 1)
            block = tokens_sorted[lo:hi]
            weights = sal_sorted[lo:hi]
            total = weights.sum()
            if float(total.detach()) <= 0.0:
                rows.append(block.mean(dim=0))
            else:
                rows.append((weights[:, None] * block).sum(dim=0) / total)
        out.append(torch.stack(rows))
    return torch.stack(out)


def compensate(feat_self: torch.Tensor, dictionary: FeatureDictionary,
               guidance: torch.Tensor, weights: CompensationWeights) -> torch.Tensor:
    """Residual single-head attention from tokens onto [entries; guidance].

    With zero value projection this is an exact identity on ``feat_self``.
    """
    if feat_self.ndim != 3 or guidance.ndim != 3:
        raise ShapeError("compensate expects (B, T, d) features and (B, G, d) guidance")
    if feat_self.shape[-1] != guidance.shape[-1]:
        raise ShapeError(
            f"feature dim {feat_self.shape[-1]} != guidance dim {guidance.shape[-1]}")
    b = feat_self.shape[0]
    bank = torch.cat([
        dictionary.entries.to(feat_self.dtype).unsqueeze(0).expand(b, -1, -1),
        dictionary.guidance_proj(guidance),
    ], dim=1)
    q = weights.w_q(feat_self)
    k = weights.w_k(bank)
    v = weights.w_v(bank)
    scale = feat_self.shape[-1] ** -0.5
    attn = torch.softmax((q @ k.transpose(-2, -1)) * scale, dim=-1)
    return feat_self + attn @ v


def feature_cross_correlation(x: torch.Tensor, y: torch.Tensor,
                              return_degenerate: bool = False):
    """Global correlation of two (h, w, c) maps after per-channel centering.

    Spatial means are removed per channel; the numerator sums elementwise
    products over all positions and channels, and the denominator is the
    product of the two global centered norms — so the score lies in [-1, 1],
    is exactly symmetric, and is invariant to per-channel shifts and global
    positive scaling (but *not* to per-channel scaling).  A zero denominator
    (either map constant per channel) is defined as 0 and flagged degenerate.
    """
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim != 3:
        raise ShapeError(f"expected (h, w, c) maps, got {tuple(x.shape)}")
    cx = x - x.mean(dim=(0, 1), keepdim=True)
    cy = y - y.mean(dim=(0, 1), keepdim=True)
    num = (cx * cy).sum()
    denom = torch.sqrt((cx * cx).sum()) * torch.sqrt((cy * cy).sum())
    degenerate = float(denom.detach()) == 0.0
    score = num / denom if not degenerate else num.new_zeros(())
    if return_degenerate:
        return score, degenerate
    return score


fcc = feature_cross_correlation


def resize_token_grid(feat: FeatureMap, hw: tuple[int, int]) -> torch.Tensor:
    """FeatureMap -> (B, rows, cols, d) grid, bilinearly resized when needed."""
    grid = feat.as_grid()
    if feat.grid_hw != tuple(hw):
        grid = F.interpolate(grid, size=tuple(hw), mode="bilinear", align_corners=False)
    return grid.permute(0, 2, 3, 1)


def align_loss(feat_gen: FeatureMap, feat_vit: FeatureMap, fused: torch.Tensor,
               stop_grad_anchor: bool = True) -> torch.Tensor:
    """Negative correlation of both compensated maps against the fused anchor.

    ``fused`` is (B, d, h, w).  The anchor is gradient-blocked by default so the
    fused map pulls the pathways toward it rather than collapsing onto them.
    Batch reduction is the mean.
    """
    if fused.ndim != 4:
        raise ShapeError(f"fused map must be (B, d, h, w), got {tuple(fused.shape)}")
    hw = (fused.shape[2], fused.shape[3])
    anchor = fused.detach() if stop_grad_anchor else fused
    anchor = anchor.permute(0, 2, 3, 1)
    gen_grid = resize_token_grid(feat_gen, hw)
    vit_grid = resize_token_grid(feat_vit, hw)
    if gen_grid.shape[-1] != anchor.shape[-1] or vit_grid.shape[-1] != anchor.shape[-1]:
        raise ShapeError("channel widths of pathways and fused map must match")
    terms = []
    for i in range(fused.shape[0]):
        terms.append(-feature_cross_correlation(gen_grid[i], anchor[i])
                     - feature_cross_correlation(vit_grid[i], anchor[i]))
    return torch.stack(terms).mean()
