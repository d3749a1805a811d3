"""Generative pathway: latent autoencoder + single-step conditional denoiser.

The denoiser is a small two-down/two-up U-Net over the x4-downsampled latent,
with a cross-attention layer to the lifted 2D-pose tokens in every block.  A
trainable copy of the encoder half (the adapter) consumes the spatial condition
(latent + heatmap channels) and injects its per-resolution features into the
decoder through zero-initialized 1x1 convolutions, so a fresh adapter leaves the
core's output untouched bit for bit.

Pretraining fits the autoencoder (reconstruction), then the denoiser stack
(noise prediction) — after which the core U-Net, autoencoder and prompt MLP are
frozen; only the adapter stays trainable in the main phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import ConditionSet, PromptLifter, build_condition_set
from .config import ModelConfig
from .encoder import AttentionMap, FeatureMap
from .errors import DomainError, ShapeError, StateError


# ---------------------------------------------------------------------------
# schedule


@dataclass
class NoiseSchedule:
    """Linear-beta DDPM schedule; alpha_bars[t-1] is the cumulative product at step t."""

    betas: torch.Tensor        # (T,) float64
    alphas: torch.Tensor       # (T,)
    alpha_bars: torch.Tensor   # (T,) strictly decreasing, in (0, 1)

    @property
    def t_steps(self) -> int:
        return self.betas.shape[0]


def make_schedule(t_steps: int, beta_start: float = 1e-4,
                  beta_end: float = 2e-2) -> NoiseSchedule:
    if t_steps < 1:
        raise DomainError(f"t_steps must be >= 1, got {t_steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise DomainError(f"bad beta range ({beta_start}, {beta_end})")
    betas = torch.linspace(beta_start, beta_end, t_steps, dtype=torch.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0))


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor,
                    schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward noising: sqrt(a_bar_t) z0 + sqrt(1 - a_bar_t) eps.

    ``t`` is 1-indexed (1 <= t <= T); scalar or per-sample (B,) integer tensor.
    """
    if eps.shape != z0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    t_tensor = torch.as_tensor(t, dtype=torch.long)
    if t_tensor.min() < 1 or t_tensor.max() > schedule.t_steps:
        raise DomainError(
            f"t={t} outside [1, {schedule.t_steps}] (timesteps are 1-indexed)")
    ab = schedule.alpha_bars.to(z0.dtype)[t_tensor - 1]
    while ab.ndim < z0.ndim:
        ab = ab.unsqueeze(-1)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# latent autoencoder


class LatentAutoencoder(nn.Module):
    """x4 spatial compression into a small latent; decode squashes through sigmoid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        base, cl = cfg.ae_base, cfg.latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, base, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(base, base * 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(base * 2, cl, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(cl, base * 2, 3, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(base * 2, base, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(base, 3, 4, stride=2, padding=1),
        )

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W), got {tuple(image.shape)}")
        if image.shape[2] % 4 or image.shape[3] % 4:
            raise ShapeError(f"image size {image.shape[2:]}, must divide by 4")
        return self.encoder(image)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(z))


# ---------------------------------------------------------------------------
# U-Net pieces


def _gn(channels: int) -> nn.GroupNorm:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return nn.GroupNorm(g, channels)
    raise ShapeError(f"no group size divides {channels}")


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype,
                                                        device=t.device) / max(half - 1, 1))
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, channels, time_dim):
        super().__init__()
        self.norm1 = _gn(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, channels)
        self.norm2 = _gn(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class TokenCrossAttention(nn.Module):
    """Spatial features attend to prompt tokens; per-layer K/V projections."""

    def __init__(self, channels, d_prompt, n_heads=2):
        super().__init__()
        while channels % n_heads:
            n_heads -= 1
        self.n_heads = max(n_heads, 1)
        self.head_dim = channels // self.n_heads
        self.scale = self.head_dim ** -0.5
        self.norm = nn.LayerNorm(channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(d_prompt, channels)
        self.v = nn.Linear(d_prompt, channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x, tokens):
        b, c, h, w = x.shape
        seq = x.flatten(2).transpose(1, 2)                   # (B, hw, c)
        q = self.q(self.norm(seq)).view(b, h * w, self.n_heads, self.head_dim)
        k = self.k(tokens).view(b, -1, self.n_heads, self.head_dim)
        v = self.v(tokens).view(b, -1, self.n_heads, self.head_dim)
        q, k, v = (z.transpose(1, 2) for z in (q, k, v))
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, c)
        seq = seq + self.proj(out)
        return seq.transpose(1, 2).reshape(b, c, h, w), attn


class UNetBlock(nn.Module):
    """ResBlock followed by cross-attention to the prompt tokens."""

    def __init__(self, channels, time_dim, d_prompt, n_heads=2):
        super().__init__()
        self.res = ResBlock(channels, time_dim)
        self.attn = TokenCrossAttention(channels, d_prompt, n_heads)

    def forward(self, x, temb, tokens):
        x = self.res(x, temb)
        return self.attn(x, tokens)


def _zero_conv(channels: int) -> nn.Conv2d:
    conv = nn.Conv2d(channels, channels, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class _EncoderHalf(nn.Module):
    """conv_in + two down stages + bottleneck; shared by the core and the adapter."""

    def __init__(self, in_channels, base, time_dim, d_prompt):
        super().__init__()
        c0, c1, c2 = base, base * 2, base * 3
        self.channels = (c0, c1, c2)
        self.conv_in = nn.Conv2d(in_channels, c0, 3, padding=1)
        self.enc1 = UNetBlock(c0, time_dim, d_prompt)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc2 = UNetBlock(c1, time_dim, d_prompt)
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.mid = UNetBlock(c2, time_dim, d_prompt)

    def forward(self, x, temb, tokens):
        h0 = self.conv_in(x)
        h1, a1 = self.enc1(h0, temb, tokens)
        h2, a2 = self.enc2(self.down1(h1), temb, tokens)
        hm, am = self.mid(self.down2(h2), temb, tokens)
        return (h1, h2, hm), (a1, a2, am)


class ConditionAdapter(nn.Module):
    """Trainable encoder copy reading the spatial condition; zero-conv outputs."""

    def __init__(self, cond_channels, base, time_dim, d_prompt):
        super().__init__()
        self.body = _EncoderHalf(cond_channels, base, time_dim, d_prompt)
        c0, c1, c2 = self.body.channels
        self.zero1 = _zero_conv(c0)
        self.zero2 = _zero_conv(c1)
        self.zero3 = _zero_conv(c2)

    def forward(self, spatial, temb, tokens):
        (h1, h2, hm), _ = self.body(spatial, temb, tokens)
        return self.zero1(h1), self.zero2(h2), self.zero3(hm)


@dataclass
class DenoiserOutput:
    eps_hat: torch.Tensor            # (B, c_latent, h, w) predicted noise
    features: FeatureMap             # final decoder features, pre output-projection
    attn: list[AttentionMap]         # decoder cross-attention maps


class CondUNet(nn.Module):
    """Single-step conditional denoiser over the latent grid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        base, cl, dp = cfg.unet_base, cfg.latent_channels, cfg.d_prompt
        self.time_dim = base * 4
        self.time_mlp = nn.Sequential(nn.Linear(self.time_dim, self.time_dim), nn.SiLU(),
                                      nn.Linear(self.time_dim, self.time_dim))
        self.encoder = _EncoderHalf(cl, base, self.time_dim, dp)
        c0, c1, c2 = self.encoder.channels
        self.up1 = nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1)
        self.fuse1 = nn.Conv2d(c1 * 2, c1, 1)
        self.dec1 = UNetBlock(c1, self.time_dim, dp)
        self.up2 = nn.ConvTranspose2d(c1, c0, 4, stride=2, padding=1)
        self.fuse2 = nn.Conv2d(c0 * 2, c0, 1)
        self.dec2 = UNetBlock(c0, self.time_dim, dp)
        self.conv_out = nn.Conv2d(c0, cl, 3, padding=1)
        self.feature_dim = c0

    def forward(self, z_t: torch.Tensor, t, tokens: torch.Tensor,
                control: tuple | None = None) -> DenoiserOutput:
        if z_t.ndim != 4:
            raise ShapeError(f"z_t must be (B, C, h, w), got {tuple(z_t.shape)}")
        b = z_t.shape[0]
        t_tensor = torch.as_tensor(t, dtype=z_t.dtype, device=z_t.device).reshape(-1)
        if t_tensor.numel() == 1:
            t_tensor = t_tensor.expand(b)
        temb = self.time_mlp(_timestep_embedding(t_tensor, self.time_dim))

        (h1, h2, hm), _ = self.encoder(z_t, temb, tokens)
        if control is not None:
            c1_in, c2_in, cm_in = control
            h1 = h1 + c1_in
            h2 = h2 + c2_in
            hm = hm + cm_in
        x = self.up1(hm)
        x = self.fuse1(torch.cat([x, h2], dim=1))
        x, attn1 = self.dec1(x, temb, tokens)
        x = self.up2(x)
        x = self.fuse2(torch.cat([x, h1], dim=1))
        x, attn2 = self.dec2(x, temb, tokens)
        eps_hat = self.conv_out(x)

        grid = (x.shape[2], x.shape[3])
        feats = FeatureMap(tokens=x.flatten(2).transpose(1, 2), grid_hw=grid)
        maps = [AttentionMap(layer_index=0, weights=attn1),
                AttentionMap(layer_index=1, weights=attn2)]
        return DenoiserOutput(eps_hat=eps_hat, features=feats, attn=maps)


# ---------------------------------------------------------------------------
# pathway wrapper


class GenerativePathway(nn.Module):
    """Autoencoder + conditional denoiser + adapter + prompt MLP + schedule."""

    def __init__(self, cfg: ModelConfig, n_joints: int):
        super().__init__()
        self.cfg = cfg
        self.n_joints = n_joints
        self.autoencoder = LatentAutoencoder(cfg)
        self.denoiser = CondUNet(cfg)
        # adapter reads the latent concatenated with one heatmap channel per joint
        self.adapter = ConditionAdapter(cfg.latent_channels + n_joints,
                                        cfg.unet_base, self.denoiser.time_dim,
                                        cfg.d_prompt)
        self.prompt = PromptLifter(cfg.d_prompt, cfg.prompt_hidden, cfg.image_hw)
        self.schedule = make_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end)
        self.pretrained = False

    def encode_latent(self, image: torch.Tensor) -> torch.Tensor:
        return self.autoencoder.encode(image)

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.autoencoder.decode(z)

    def make_condition(self, z0: torch.Tensor, heatmap: torch.Tensor,
                       prompt_xy: torch.Tensor, prompt_conf: torch.Tensor) -> ConditionSet:
        tokens = self.prompt.lift_prompt(prompt_xy, prompt_conf)
        if tokens.ndim == 4:  # (B, K, J, d) -> flatten instances
            tokens = tokens.reshape(tokens.shape[0], -1, tokens.shape[-1])
        return build_condition_set(z0, heatmap, tokens)

    def denoise_single_step(self, z_t: torch.Tensor, t_star: int,
                            cond: ConditionSet | None, *,
                            use_adapter: bool = True) -> DenoiserOutput:
        """One conditional denoising pass at the fixed working timestep.

        ``cond=None`` (or ``use_adapter=False``) runs the bare core U-Net, which
        a freshly initialized adapter must match bitwise.
        """
        if not self.pretrained:
            raise StateError("denoise_single_step before pretraining; "
                             "run pretraining or load a pretrained checkpoint")
        if not 1 <= t_star <= self.schedule.t_steps:
            raise DomainError(f"t_star={t_star} outside [1, {self.schedule.t_steps}]")
        if cond is None:
            tokens = z_t.new_zeros(z_t.shape[0], 1, self.cfg.d_prompt)
            return self.denoiser(z_t, t_star, tokens, control=None)
        control = None
        if use_adapter:
            b = z_t.shape[0]
            t_tensor = torch.as_tensor(float(t_star), dtype=z_t.dtype,
                                       device=z_t.device).expand(b)
            temb = self.denoiser.time_mlp(
                _timestep_embedding(t_tensor, self.denoiser.time_dim))
            control = self.adapter(cond.spatial.to(z_t.dtype), temb, cond.tokens)
        return self.denoiser(z_t, t_star, cond.tokens, control=control)

    def freeze_core(self) -> None:
        """Freeze autoencoder, denoiser core and prompt MLP; adapter stays live."""
        for module in (self.autoencoder, self.denoiser, self.prompt):
            for p in module.parameters():
                p.requires_grad_(False)
        self.pretrained = True

    def core_modules(self) -> dict[str, nn.Module]:
        return {"autoencoder": self.autoencoder, "denoiser": self.denoiser,
                "prompt": self.prompt}


# ---------------------------------------------------------------------------
# pretraining


def pretrain_autoencoder(gen: GenerativePathway, images: torch.Tensor, steps: int,
                         lr: float = 2e-3, batch: int = 16, seed: int = 0) -> dict:
    """Fit the latent autoencoder by plain reconstruction MSE."""
    if images.ndim != 4:
        raise ShapeError(f"images must be (N, 3, H, W), got {tuple(images.shape)}")
    opt = torch.optim.Adam(gen.autoencoder.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    gen.autoencoder.train()
    for _ in range(steps):
        idx = rng.integers(0, images.shape[0], min(batch, images.shape[0]))
        x = images[idx]
        recon = gen.autoencoder.decode(gen.autoencoder.encode(x))
        loss = F.mse_loss(recon, x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    gen.autoencoder.eval()
    with torch.no_grad():
        recon = gen.autoencoder.decode(gen.autoencoder.encode(images))
        final_mse = float(F.mse_loss(recon, images))
    return {"losses": losses, "final_mse": final_mse,
            "image_variance": float(images.var())}


def pretrain_denoiser(gen: GenerativePathway, batch_fn, steps: int,
                      lr: float = 2e-3, seed: int = 0) -> dict:
    """Train denoiser core + adapter + prompt MLP with the noise-prediction loss.

    ``batch_fn(rng)`` must return ``(images, heatmap, prompt_xy, prompt_conf)``
    tensors for one batch.  On completion the core is frozen (adapter excluded)
    and the pathway is marked pretrained.  ``steps=0`` freezes immediately,
    leaving weights untouched.
    """
    params = list(gen.denoiser.parameters()) + list(gen.adapter.parameters()) \
        + list(gen.prompt.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    gtorch = torch.Generator().manual_seed(seed + 1)
    losses = []

    def noise_loss(images, heatmap, prompt_xy, prompt_conf, generator):
        with torch.no_grad():
            z0 = gen.encode_latent(images)
        cond = gen.make_condition(z0, heatmap, prompt_xy, prompt_conf)
        b = z0.shape[0]
        t = torch.randint(1, gen.schedule.t_steps + 1, (b,), generator=generator)
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        z_t = forward_diffuse(z0, t, eps, gen.schedule)
        t_tensor = t.to(z0.dtype)
        temb = gen.denoiser.time_mlp(_timestep_embedding(t_tensor, gen.denoiser.time_dim))
        control = gen.adapter(cond.spatial.to(z0.dtype), temb, cond.tokens)
        out = gen.denoiser(z_t, t, cond.tokens, control=control)
        return F.mse_loss(out.eps_hat, eps)

    probe = batch_fn(np.random.default_rng(seed + 7))
    probe_gen = torch.Generator().manual_seed(seed + 9)
    with torch.no_grad():
        before = float(noise_loss(*probe, probe_gen))
    for _ in range(steps):
        loss = noise_loss(*batch_fn(rng), gtorch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    probe_gen = torch.Generator().manual_seed(seed + 9)
    with torch.no_grad():
        after = float(noise_loss(*probe, probe_gen))
    gen.freeze_core()
    return {"losses": losses, "probe_before": before, "probe_after": after}
