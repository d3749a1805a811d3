"""Full model assembly: both pathways, compensation, fusion, instance head.

Also owns batching (scene samples -> tensors) and scene-level prediction.  The
generative core is expected to be pretrained and frozen before the assembled
model trains; only the encoder, adapters, dictionaries, fusion and head learn.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .alignment import (CompensationWeights, FeatureDictionary, align_loss,
                        compensate, dictionary_guidance)
from .body_model import BodyParams
from .conditioning import combine_heatmaps, instance_masks, render_heatmap
from .config import AblationConfig, ModelConfig, SceneConfig
from .diffusion import GenerativePathway, forward_diffuse
from .encoder import AttentionMap, FeatureMap, ViTEncoder
from .errors import ConfigurationError, ShapeError
from .fusion import FusionState, exchange, fuse
from .heads import (InstanceDecoder, InstancePrediction, InstanceQueries,
                    RegressionHeads)
from .scenes import SceneSample, estimator_view


# ---------------------------------------------------------------------------
# batching


@dataclass
class SceneBatch:
    """Stacked per-scene tensors; prompt slots beyond K instances are padding.

    Padded prompt coordinates are NaN (the prompt MLP zeroes them out) and
    padded confidences are 0.
    """

    images: torch.Tensor       # (B, 3, H, W) float
    heatmap: torch.Tensor      # (B, J, H, W) merged across instances
    prompt_xy: torch.Tensor    # (B, K_max, J, 2), NaN padded
    prompt_conf: torch.Tensor  # (B, K_max, J), zero padded
    union_mask: torch.Tensor   # (B, H, W) bool
    eps_seeds: tuple[int, ...]
    samples: list[SceneSample]

    def to(self, dtype: torch.dtype) -> "SceneBatch":
        return replace(self, images=self.images.to(dtype),
                       heatmap=self.heatmap.to(dtype),
                       prompt_xy=self.prompt_xy.to(dtype),
                       prompt_conf=self.prompt_conf.to(dtype))


def sample_tensors(sample: SceneSample, model_cfg: ModelConfig,
                   scene_cfg: SceneConfig, noise_seed: int) -> dict:
    """Per-scene tensors, computed once and cached by the trainer."""
    h, w = model_cfg.image_hw
    j = scene_cfg.body.n_joints
    k_max = model_cfg.k_max
    image = torch.from_numpy(sample.image).permute(2, 0, 1).float()

    views = estimator_view(sample, scene_cfg.joint_noise_px, noise_seed)
    prompt_xy = torch.full((k_max, j, 2), float("nan"))
    prompt_conf = torch.zeros(k_max, j)
    maps = []
    for k, (joints2d, conf) in enumerate(views):
        xy = torch.from_numpy(joints2d)
        cf = torch.from_numpy(conf)
        prompt_xy[k] = xy
        prompt_conf[k] = cf
        maps.append(render_heatmap(xy, cf, model_cfg.heatmap_sigma_px, (h, w)))
    heatmap = combine_heatmaps(maps) if maps else torch.zeros(j, h, w)

    vis_masks = instance_masks(
        [torch.from_numpy(i.joints2d) for i in sample.instances],
        [torch.from_numpy(i.visibility) for i in sample.instances],
        model_cfg.mask_margin_px, (h, w))
    union = vis_masks.any(dim=0) if vis_masks.shape[0] else torch.zeros(h, w, dtype=torch.bool)

    eps_seed = int(np.random.SeedSequence([noise_seed + 2**32,
                                           sample.seed + 2**33]).generate_state(1)[0])
    return {"image": image, "heatmap": heatmap, "prompt_xy": prompt_xy,
            "prompt_conf": prompt_conf, "union_mask": union,
            "eps_seed": eps_seed, "sample": sample}


def collate(entries: list[dict]) -> SceneBatch:
    return SceneBatch(
        images=torch.stack([e["image"] for e in entries]),
        heatmap=torch.stack([e["heatmap"] for e in entries]),
        prompt_xy=torch.stack([e["prompt_xy"] for e in entries]),
        prompt_conf=torch.stack([e["prompt_conf"] for e in entries]),
        union_mask=torch.stack([e["union_mask"] for e in entries]),
        eps_seeds=tuple(e["eps_seed"] for e in entries),
        samples=[e["sample"] for e in entries],
    )


def make_batch(samples: list[SceneSample], model_cfg: ModelConfig,
               scene_cfg: SceneConfig, noise_seed: int) -> SceneBatch:
    return collate([sample_tensors(s, model_cfg, scene_cfg, noise_seed)
                    for s in samples])


def batch_noise(batch: SceneBatch, latent_shape: tuple[int, ...],
                generator: torch.Generator | None = None,
                dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Latent noise for the batch: per-sample fixed seeds, or a shared stream.

    Without a generator each scene gets noise from its own stored seed, so the
    same scene always meets the same perturbation; passing a generator draws
    fresh noise from it instead.
    """
    b = len(batch.eps_seeds)
    if latent_shape[0] != b:
        raise ShapeError(f"latent batch {latent_shape[0]} != scene batch {b}")
    if generator is not None:
        return torch.randn(latent_shape, generator=generator, dtype=dtype)
    eps = torch.empty(latent_shape, dtype=dtype)
    for i, seed in enumerate(batch.eps_seeds):
        g = torch.Generator().manual_seed(seed)
        eps[i] = torch.randn(latent_shape[1:], generator=g, dtype=dtype)
    return eps


# ---------------------------------------------------------------------------
# camera math (torch, differentiable)


def project_pixels(joints3d: torch.Tensor, focal_px: float,
                   principal: tuple[float, float],
                   cam_offset: torch.Tensor | None = None) -> torch.Tensor:
    """Pinhole projection of (..., J, 3) points to (..., J, 2) pixels.

    ``cam_offset`` (..., 3) applies a per-instance pixel shift and log-scale
    about the principal point; zeros leave the projection untouched.
    """
    z = joints3d[..., 2:3].clamp_min(1e-6)
    c = joints3d.new_tensor(principal)
    px = joints3d[..., :2] / z * focal_px + c
    if cam_offset is not None:
        scale = torch.exp(cam_offset[..., 2:3]).unsqueeze(-2)
        shift = cam_offset[..., :2].unsqueeze(-2)
        px = (px - c) * scale + c + shift
    return px


# ---------------------------------------------------------------------------
# assembled model


@dataclass
class ModelOutput:
    prediction: InstancePrediction
    fused: torch.Tensor                 # (B, d, h, w) unified map
    feat_vit: FeatureMap | None         # compensated encoder tokens
    feat_gen: FeatureMap | None         # compensated generative tokens
    vit_attn: list[AttentionMap]
    gen_attn: list[AttentionMap]
    decoder_attn: list[torch.Tensor]    # per-block (B, heads, K, T)


class SynergyModel(nn.Module):
    """Discriminative ViT + frozen single-step denoiser, merged and decoded."""

    def __init__(self, model_cfg: ModelConfig, scene_cfg: SceneConfig,
                 ablation: AblationConfig | None = None):
        super().__init__()
        if model_cfg.d_shared != model_cfg.d_fuse:
            raise ConfigurationError(
                f"d_shared {model_cfg.d_shared} must equal d_fuse {model_cfg.d_fuse}: "
                "compensated tokens feed the exchange levels directly")
        self.cfg = model_cfg
        self.scene_cfg = scene_cfg
        self.ablation = ablation or AblationConfig()
        n_joints = scene_cfg.body.n_joints

        self.encoder = ViTEncoder(model_cfg)
        self.generative = GenerativePathway(model_cfg, n_joints)

        self.vit_adapt = nn.Linear(model_cfg.d_model, model_cfg.d_shared)
        self.gen_adapt = nn.Linear(self.generative.denoiser.feature_dim,
                                   model_cfg.d_shared)
        self.dict_vit = FeatureDictionary(model_cfg.dict_size, model_cfg.d_shared)
        self.dict_gen = FeatureDictionary(model_cfg.dict_size, model_cfg.d_shared)
        self.comp_vit = CompensationWeights(model_cfg.d_shared)
        self.comp_gen = CompensationWeights(model_cfg.d_shared)

        self.fusion = FusionState(
            dim=model_cfg.d_fuse, n_heads=model_cfg.fuse_heads,
            levels=model_cfg.fuse_levels, enc_grid=model_cfg.token_grid(),
            gen_grid=model_cfg.latent_hw(), d_raw_enc=model_cfg.d_model,
            d_raw_gen=self.generative.denoiser.feature_dim,
            n_conv=model_cfg.n_fuse_conv)

        self.queries = InstanceQueries(model_cfg.k_max, model_cfg.d_fuse)
        self.decoder = InstanceDecoder(model_cfg.d_fuse, model_cfg.head_heads,
                                       model_cfg.head_blocks)
        mid_depth = 0.5 * (scene_cfg.depth_range[0] + scene_cfg.depth_range[1])
        self.heads = RegressionHeads(
            model_cfg.d_fuse, n_joints, scene_cfg.body.n_shape,
            scene_cfg.body.n_expression, trans_init=(0.0, 0.0, mid_depth))

    # -- pathway runners ----------------------------------------------------

    def _run_generative(self, batch: SceneBatch,
                        generator: torch.Generator | None):
        gen = self.generative
        with torch.no_grad():  # frozen AE; inputs carry no gradient
            z0 = gen.encode_latent(batch.images)
        eps = batch_noise(batch, tuple(z0.shape), generator, dtype=z0.dtype)
        z_t = forward_diffuse(z0, self.cfg.t_star, eps, gen.schedule)
        cond = gen.make_condition(z0, batch.heatmap, batch.prompt_xy,
                                  batch.prompt_conf)
        out = gen.denoise_single_step(z_t, self.cfg.t_star, cond)
        return out.features, out.attn

    @staticmethod
    def _matching_maps(maps: list[AttentionMap], n_tokens: int) -> list[AttentionMap] | None:
        """Keep maps whose query or key axis lines up with the token count."""
        kept = [m for m in maps
                if n_tokens in (m.weights.shape[-2], m.weights.shape[-1])]
        return kept or None

    # -- forward ------------------------------------------------------------

    def forward(self, batch: SceneBatch,
                generator: torch.Generator | None = None) -> ModelOutput:
        ab = self.ablation
        raw_vit, vit_attn = self.encoder.encode(batch.images)

        if not ab.use_gen_pathway:
            fused_tokens = self.fusion.sum_adapt_enc(raw_vit.tokens)
            fused = FeatureMap(fused_tokens, raw_vit.grid_hw).as_grid()
            queries, dec_attn = self.decoder.decode(
                fused, batch.union_mask, self.queries, self.cfg.image_hw)
            pred = self.heads.regress(queries)
            return ModelOutput(prediction=pred, fused=fused, feat_vit=None,
                               feat_gen=None, vit_attn=vit_attn, gen_attn=[],
                               decoder_attn=dec_attn)

        raw_gen, gen_attn = self._run_generative(batch, generator)

        vit_tokens = self.vit_adapt(raw_vit.tokens)
        gen_tokens = self.gen_adapt(raw_gen.tokens)
        vit_maps = self._matching_maps(vit_attn, vit_tokens.shape[1]) if ab.use_enc_attn else None
        gen_maps = self._matching_maps(gen_attn, gen_tokens.shape[1]) if ab.use_gen_attn else None
        guide_vit = dictionary_guidance(vit_maps, vit_tokens, self.cfg.n_guidance)
        guide_gen = dictionary_guidance(gen_maps, gen_tokens, self.cfg.n_guidance)
        # each pathway is compensated by a dictionary keyed on the *other*
        # pathway's pooled guidance, so the streams trade missing context
        comp_vit = compensate(vit_tokens, self.dict_vit, guide_gen, self.comp_vit)
        comp_gen = compensate(gen_tokens, self.dict_gen, guide_vit, self.comp_gen)
        feat_vit = FeatureMap(comp_vit, raw_vit.grid_hw)
        feat_gen = FeatureMap(comp_gen, raw_gen.grid_hw)

        if ab.fusion_mode == "cmf":
            ex_enc, ex_gen = exchange(feat_vit, feat_gen, self.fusion)
            fused = fuse(ex_enc, ex_gen, "cmf", self.fusion)
        else:
            fused = fuse(raw_vit, raw_gen, ab.fusion_mode, self.fusion)

        queries, dec_attn = self.decoder.decode(
            fused, batch.union_mask, self.queries, self.cfg.image_hw)
        pred = self.heads.regress(queries)
        return ModelOutput(prediction=pred, fused=fused, feat_vit=feat_vit,
                           feat_gen=feat_gen, vit_attn=vit_attn,
                           gen_attn=gen_attn, decoder_attn=dec_attn)

    def alignment_loss(self, out: ModelOutput,
                       stop_grad_anchor: bool = True) -> torch.Tensor:
        """Feature-alignment term; zero when the generative pathway is off."""
        if out.feat_gen is None or out.feat_vit is None:
            return out.fused.new_zeros(())
        return align_loss(out.feat_gen, out.feat_vit, out.fused,
                          stop_grad_anchor=stop_grad_anchor)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


# ---------------------------------------------------------------------------
# scene-level prediction


@dataclass
class ScenePrediction:
    """Detections for one scene: instances above the presence threshold."""

    params: list[BodyParams]          # unbatched, float32
    presence: np.ndarray              # (K_kept,)
    joints2d_root: np.ndarray         # (K_kept, 2) projected root location
    cam_offset: np.ndarray            # (K_kept, 3)
    query_index: np.ndarray           # (K_kept,) originating query slot
    raw: InstancePrediction | None = None


def predict_scene(model: SynergyModel, sample: SceneSample, noise_seed: int,
                  threshold: float = 0.5, keep_all: bool = False) -> ScenePrediction:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            batch = make_batch([sample], model.cfg, model.scene_cfg, noise_seed)
            out = model(batch)
    finally:
        if was_training:
            model.train()
    pred = out.prediction
    presence = pred.presence[0]
    keep = (torch.ones_like(presence, dtype=torch.bool) if keep_all
            else presence > threshold)
    idx = torch.nonzero(keep).flatten()
    params = [pred.params.map(lambda t: t[0, i].detach().clone()) for i in idx]
    roots = torch.stack([p.root_translation for p in params]) if params \
        else torch.zeros(0, 3)
    cam = sample.camera
    root_px = project_pixels(roots.unsqueeze(1), cam.focal_px, cam.principal,
                             pred.cam_offset[0, idx] if len(idx) else None)
    return ScenePrediction(
        params=params,
        presence=presence[idx].numpy().astype(np.float32),
        joints2d_root=root_px.squeeze(1).numpy().astype(np.float32)
        if len(idx) else np.zeros((0, 2), np.float32),
        cam_offset=pred.cam_offset[0, idx].numpy().astype(np.float32)
        if len(idx) else np.zeros((0, 3), np.float32),
        query_index=idx.numpy().astype(np.int64),
        raw=pred,
    )
