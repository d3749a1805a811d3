"""Instance-query head: masked decoding over the fused map + parameter regression.

A fixed bank of learnable queries self-attends, cross-attends into the fused
feature grid under an additive location-mask bias, and finally regresses body
parameters, a camera offset and a presence probability per query.  Matching
between query predictions and ground-truth instances is an exact assignment on
a 2D-distance + presence cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import nn

from .body_model import BodyParams
from .errors import CapacityError, ShapeError

MASK_BIAS = -1e4  # pre-softmax penalty; exp() underflows to exactly zero mass


@dataclass
class InstancePrediction:
    """Per-query outputs for one batch; leading dims (B, K_max)."""

    params: BodyParams
    presence: torch.Tensor        # (B, K) probability
    presence_logit: torch.Tensor  # (B, K)
    cam_offset: torch.Tensor      # (B, K, 3): pixel shift x/y + log scale
    queries: torch.Tensor         # (B, K, d) refined embeddings


class InstanceQueries(nn.Module):
    def __init__(self, k_max: int, dim: int):
        super().__init__()
        self.embed = nn.Parameter(torch.randn(k_max, dim) * 0.02)

    @property
    def k_max(self) -> int:
        return self.embed.shape[0]


class _DecoderBlock(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.norm_sa = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(),
                                 nn.Linear(dim * 2, dim))

    def forward(self, queries, memory, bias):
        x = self.norm_sa(queries)
        sa, _ = self.self_attn(x, x, x, need_weights=False)
        queries = queries + sa
        b, kq, d = queries.shape
        q = self.q(self.norm_q(queries)).view(b, kq, self.n_heads, self.head_dim)
        mem = self.norm_kv(memory)
        k = self.k(mem).view(b, -1, self.n_heads, self.head_dim)
        v = self.v(mem).view(b, -1, self.n_heads, self.head_dim)
        q, k, v = (z.transpose(1, 2) for z in (q, k, v))
        logits = (q @ k.transpose(-2, -1)) * self.scale
        if bias is not None:
            logits = logits + bias[:, None, :, :]  # broadcast over heads
        attn = torch.softmax(logits, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, kq, d)
        queries = queries + self.proj(out)
        queries = queries + self.ffn(self.norm_ffn(queries))
        return queries, attn


class InstanceDecoder(nn.Module):
    """L blocks of query self-attention + mask-biased cross-attention."""

    def __init__(self, dim: int, n_heads: int, n_blocks: int):
        super().__init__()
        self.blocks = nn.ModuleList(_DecoderBlock(dim, n_heads) for _ in range(n_blocks))

    @staticmethod
    def _mask_bias(masks: torch.Tensor, k_max: int, grid_hw: tuple[int, int],
                   dtype, image_hw: tuple[int, int]) -> torch.Tensor | None:
        """Location masks -> additive (B, K, T) attention bias on grid tokens.

        Accepts a union mask (B, H, W) or per-query masks (B, K, H, W); a grid
        cell counts as inside if any covered pixel is.  A mask with no inside
        cells contributes no bias (the query may look anywhere).
        """
        if masks is None:
            return None
        if masks.ndim == 3:
            masks = masks[:, None].expand(-1, k_max, -1, -1)
        if masks.ndim != 4:
            raise ShapeError(f"masks must be (B, H, W) or (B, K, H, W), got {tuple(masks.shape)}")
        b, k, h, w = masks.shape
        if (h, w) != tuple(image_hw):
            raise ShapeError(f"mask resolution {(h, w)} != image {tuple(image_hw)}")
        cells = F.adaptive_max_pool2d(masks.reshape(b * k, 1, h, w).float(),
                                      grid_hw).reshape(b, k, -1) > 0.5
        keep = cells | ~cells.any(dim=-1, keepdim=True)
        bias = torch.zeros(b, k, cells.shape[-1], dtype=dtype, device=masks.device)
        bias[~keep] = MASK_BIAS
        return bias

    def decode(self, fused: torch.Tensor, masks: torch.Tensor | None,
               queries: InstanceQueries, image_hw: tuple[int, int]):
        """(B, d, h, w) fused map -> refined queries (B, K, d) + attention maps."""
        if fused.ndim != 4:
            raise ShapeError(f"fused map must be (B, d, h, w), got {tuple(fused.shape)}")
        b, d, gh, gw = fused.shape
        memory = fused.flatten(2).transpose(1, 2)
        x = queries.embed.to(fused.dtype).unsqueeze(0).expand(b, -1, -1)
        bias = self._mask_bias(masks, queries.k_max, (gh, gw), fused.dtype, image_hw)
        attn_maps = []
        for block in self.blocks:
            x, attn = block(x, memory, bias)
            attn_maps.append(attn)
        return x, attn_maps

    forward = decode


class RegressionHeads(nn.Module):
    """Two-layer MLP heads mapping a query embedding to body parameters.

    Final layers are near-zero initialized so early predictions sit at the
    biases: zero pose/shape, a mid-scene root translation, presence 0.5.
    """

    def __init__(self, dim: int, n_joints: int, n_shape: int, n_expression: int,
                 hidden: int = 128, trans_init=(0.0, 0.0, 3.4)):
        super().__init__()
        self.n_joints = n_joints
        self.sizes = {
            "theta": n_joints * 3, "beta": n_shape, "alpha": n_expression,
            "root_rotation": 3, "root_translation": 3, "cam_offset": 3,
            "presence": 1,
        }
        self.heads = nn.ModuleDict()
        for name, out in self.sizes.items():
            fc1 = nn.Linear(dim, hidden)
            fc2 = nn.Linear(hidden, out)
            nn.init.xavier_uniform_(fc2.weight, gain=0.01)
            nn.init.zeros_(fc2.bias)
            self.heads[name] = nn.Sequential(fc1, nn.ReLU(), fc2)
        with torch.no_grad():
            self.heads["root_translation"][2].bias.copy_(
                torch.tensor(trans_init, dtype=torch.float32))

    def regress(self, queries: torch.Tensor) -> InstancePrediction:
        """(B, K, d) -> InstancePrediction with (B, K, ...) parameter tensors."""
        out = {name: head(queries) for name, head in self.heads.items()}
        b, k, _ = queries.shape
        params = BodyParams(
            theta=out["theta"].view(b, k, self.n_joints, 3),
            beta=out["beta"],
            alpha=out["alpha"],
            root_rotation=out["root_rotation"],
            root_translation=out["root_translation"],
        )
        logit = out["presence"].squeeze(-1)
        return InstancePrediction(params=params, presence=torch.sigmoid(logit),
                                  presence_logit=logit, cam_offset=out["cam_offset"],
                                  queries=queries)

    forward = regress


def match_instances(pred_joints2d, presence, gt_joints2d, w_joint: float = 1.0,
                    w_presence: float = 0.5, scale: float = 1.0) -> list[tuple[int, int]]:
    """Assign predictions to ground-truth instances; returns (pred, gt) index pairs.

    Cost = w_joint * mean 2D joint distance / scale + w_presence * (1 - presence).
    Exact assignment for K_max <= 16 (Hungarian); greedy with lowest-index
    tie-breaking beyond that.  Every GT instance is matched (requires
    K_gt <= K_pred); unmatched predictions are absent from the result.
    """
    pred = np.asarray(pred_joints2d, dtype=np.float64)
    pres = np.asarray(presence, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt_joints2d, dtype=np.float64)
    if gt.size == 0:
        return []
    k_pred, k_gt = pred.shape[0], gt.shape[0]
    if k_gt > k_pred:
        raise CapacityError(f"{k_gt} ground-truth instances but only {k_pred} queries")
    dist = np.linalg.norm(pred[:, None] - gt[None], axis=-1).mean(axis=-1)
    cost = w_joint * dist / scale + w_presence * (1.0 - pres)[:, None]
    if k_pred <= 16:
        rows, cols = linear_sum_assignment(cost)
        return sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: rc[1])
    pairs = sorted((cost[p, g], p, g) for p in range(k_pred) for g in range(k_gt))
    used_p, used_g, out = set(), set(), []
    for _, p, g in pairs:
        if p not in used_p and g not in used_g:
            used_p.add(p)
            used_g.add(g)
            out.append((p, g))
    return sorted(out, key=lambda rc: rc[1])
