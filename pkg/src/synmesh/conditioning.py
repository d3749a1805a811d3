"""2D-pose conditioning inputs: joint heatmaps, lifted prompt tokens, masks.

Everything here runs on torch tensors because the outputs feed directly into the
denoiser and the instance decoder; the heatmap renderer and mask builder are
deterministic functions of their inputs, while the prompt MLP is a (pre)trainable
module whose weights freeze together with the denoiser core.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DomainError, ShapeError


@dataclass
class ConditionSet:
    """Bundle handed to the generative pathway for one batch."""

    spatial: torch.Tensor    # (B, c_latent + J, h_lat, w_lat) latent + heatmap concat
    tokens: torch.Tensor     # (B, N, d_prompt) lifted per-joint prompt tokens
    heatmap: torch.Tensor    # (B, J, H, W) image-resolution heatmap


def render_heatmap(joints2d: torch.Tensor, conf: torch.Tensor, sigma_px: float,
                   hw: tuple[int, int]) -> torch.Tensor:
    """Per-joint Gaussian heatmap, one channel per joint, peak value = conf.

    ``joints2d``: (..., J, 2) pixel coordinates (x, y); ``conf``: (..., J).
    Returns (..., J, H, W) with channel j equal to
    ``conf_j * exp(-||p - joint_j||^2 / (2 sigma^2))`` sampled at pixel centers.
    """
    if sigma_px <= 0:
        raise DomainError(f"sigma_px must be positive, got {sigma_px}")
    if joints2d.shape[-1] != 2:
        raise ShapeError(f"joints2d must end in dim 2, got {tuple(joints2d.shape)}")
    h, w = hw
    dtype = joints2d.dtype
    ys = torch.arange(h, dtype=dtype, device=joints2d.device)
    xs = torch.arange(w, dtype=dtype, device=joints2d.device)
    dx = xs.view(1, 1, w) - joints2d[..., 0:1].unsqueeze(-1)        # (..., J, 1, W)
    dy = ys.view(1, h, 1) - joints2d[..., 1:2].unsqueeze(-1)        # (..., J, H, 1)
    d2 = dx * dx + dy * dy
    return conf[..., None, None] * torch.exp(-d2 / (2.0 * sigma_px * sigma_px))


def combine_heatmaps(per_instance: list[torch.Tensor]) -> torch.Tensor:
    """Merge instance heatmaps into one scene heatmap by per-pixel max."""
    if not per_instance:
        raise ShapeError("no heatmaps to combine")
    out = per_instance[0]
    for hm in per_instance[1:]:
        out = torch.maximum(out, hm)
    return out


class PromptLifter(nn.Module):
    """Two-layer MLP lifting normalized (x, y, conf) triples to prompt tokens.

    With all-zero weights every token equals the second layer's bias vector,
    which the tests pin as the degenerate-behavior contract.
    """

    def __init__(self, d_prompt: int, hidden: int, image_hw: tuple[int, int]):
        super().__init__()
        self.image_hw = tuple(image_hw)
        self.fc1 = nn.Linear(3, hidden)
        self.fc2 = nn.Linear(hidden, d_prompt)

    def lift_prompt(self, joints2d: torch.Tensor, conf: torch.Tensor) -> torch.Tensor:
        """(..., J, 2), (..., J) -> (..., J, d_prompt).

        Coordinates are mapped to [-1, 1] over the frame and conf to [-1, 1];
        non-finite coordinates (fully missing joints) are zeroed before lifting.
        Occluded-but-present joints pass through with their low confidence.
        """
        if joints2d.shape[-1] != 2:
            raise ShapeError(f"joints2d must end in dim 2, got {tuple(joints2d.shape)}")
        h, w = self.image_hw
        scale = joints2d.new_tensor([2.0 / max(w - 1, 1), 2.0 / max(h - 1, 1)])
        xy = joints2d * scale - 1.0
        xy = torch.where(torch.isfinite(xy), xy, torch.zeros_like(xy))
        feats = torch.cat([xy, (conf * 2.0 - 1.0)[..., None]], dim=-1)
        return self.fc2(F.relu(self.fc1(feats)))

    forward = lift_prompt


def build_condition_set(z0: torch.Tensor, heatmap: torch.Tensor,
                        tokens: torch.Tensor) -> ConditionSet:
    """Area-average the heatmap onto the latent grid and concatenate channels.

    ``z0``: (B, c, h, w) latent; ``heatmap``: (B, J, H, W); ``tokens``: (B, N, d).
    Image resolution must be an integer multiple of the latent grid.
    """
    if z0.ndim != 4 or heatmap.ndim != 4:
        raise ShapeError("z0 and heatmap must be 4D (B, C, H, W)")
    if z0.shape[0] != heatmap.shape[0]:
        raise ShapeError(f"batch mismatch: z0 {z0.shape[0]} vs heatmap {heatmap.shape[0]}")
    bh, bw = heatmap.shape[-2], heatmap.shape[-1]
    lh, lw = z0.shape[-2], z0.shape[-1]
    if bh % lh or bw % lw:
        raise ShapeError(f"heatmap {bh}x{bw} not an integer multiple of latent {lh}x{lw}")
    down = F.avg_pool2d(heatmap, kernel_size=(bh // lh, bw // lw))
    return ConditionSet(spatial=torch.cat([z0, down.to(z0.dtype)], dim=1),
                        tokens=tokens, heatmap=heatmap)


def instance_masks(joints2d_list: list[torch.Tensor], visibility_list: list[torch.Tensor],
                   margin_px: float, hw: tuple[int, int]) -> torch.Tensor:
    """Axis-aligned box masks around each instance's visible joints.

    Returns (K, H, W) bool.  Instances with no visible joints get an all-false
    mask; downstream attention treats an empty union as "attend everywhere".
    """
    h, w = hw
    masks = []
    for joints2d, vis in zip(joints2d_list, visibility_list):
        mask = torch.zeros(h, w, dtype=torch.bool, device=joints2d.device)
        vis = vis.bool()
        if vis.any():
            pts = joints2d[vis]
            x0 = torch.clamp(pts[:, 0].min() - margin_px, 0, w - 1)
            x1 = torch.clamp(pts[:, 0].max() + margin_px, 0, w - 1)
            y0 = torch.clamp(pts[:, 1].min() - margin_px, 0, h - 1)
            y1 = torch.clamp(pts[:, 1].max() + margin_px, 0, h - 1)
            mask[int(y0):int(y1) + 1, int(x0):int(x1) + 1] = True
        masks.append(mask)
    if not masks:
        return torch.zeros(0, h, w, dtype=torch.bool)
    return torch.stack(masks)
