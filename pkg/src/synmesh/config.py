"""Configuration dataclasses, presets, and strict JSON config loading.

Config files are JSON with up to three top-level sections (``scene``, ``model``,
``train``); unknown keys anywhere are rejected rather than ignored so typos fail
loudly.  Command-line ``--set section.key=value`` overrides are applied after the
file is parsed, and the merged result is echoed into every artifact a command
writes.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigurationError


@dataclass
class BodyConfig:
    """Size of the toy parametric body."""

    n_vertices: int = 602
    n_joints: int = 24
    n_shape: int = 10
    n_expression: int = 10


@dataclass
class SceneConfig:
    """Synthetic scene sampling: bodies, camera, rendering, occlusions."""

    image_hw: tuple[int, int] = (64, 64)
    k_range: tuple[int, int] = (1, 2)
    occlusion_prob: float = 0.5
    occlusion_kinds: tuple[str, ...] = ("object_patch", "person_overlap", "truncation")
    pose_scale: float = 0.2
    shape_scale: float = 0.6
    expression_scale: float = 0.6
    root_rot_scale: float = 0.3
    depth_range: tuple[float, float] = (2.6, 4.2)
    x_range: tuple[float, float] = (-0.75, 0.75)
    y_range: tuple[float, float] = (-0.2, 0.2)
    joint_noise_px: float = 1.0
    splat_sigma_px: float = 1.6
    focal_px: float = 70.0
    overlap_iou: float = 0.3
    body: BodyConfig = field(default_factory=BodyConfig)
    template_seed: int = 0


@dataclass
class ModelConfig:
    """Network dimensions for both pathways, fusion, and the instance head."""

    image_hw: tuple[int, int] = (64, 64)
    # discriminative encoder
    patch_size: int = 8
    d_model: int = 96
    n_heads: int = 4
    n_blocks: int = 4
    attn_taps: tuple[int, ...] = (-2, -1)
    # latent autoencoder + denoiser
    latent_channels: int = 4
    ae_base: int = 16
    unet_base: int = 32
    t_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    t_star: int = 20
    d_prompt: int = 64
    prompt_hidden: int = 64
    # cross-pathway compensation
    d_shared: int = 96
    dict_size: int = 32
    n_guidance: int = 4
    # fusion
    fuse_levels: int = 2
    fuse_heads: int = 4
    d_fuse: int = 96
    n_fuse_conv: int = 3
    # instance head
    k_max: int = 8
    head_blocks: int = 4
    head_heads: int = 4
    # conditioning
    heatmap_sigma_px: float = 2.0
    mask_margin_px: float = 3.0

    def latent_hw(self) -> tuple[int, int]:
        return (self.image_hw[0] // 4, self.image_hw[1] // 4)

    def token_grid(self) -> tuple[int, int]:
        return (self.image_hw[0] // self.patch_size, self.image_hw[1] // self.patch_size)


@dataclass
class AblationConfig:
    """Pathway/fusion switches exercised by the ablation grid."""

    use_enc_attn: bool = True
    use_gen_attn: bool = True
    fusion_mode: str = "cmf"
    use_gen_pathway: bool = True


@dataclass
class LossWeights:
    theta: float = 1.0
    beta: float = 0.1
    alpha: float = 0.1
    joints3d: float = 5.0
    vertices: float = 1.0
    joints2d: float = 1.0
    presence: float = 0.5


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 5000
    batch_size: int = 8
    lr: float = 1e-4
    lr_final: float = 1e-5
    final_frac: float = 0.05
    weight_decay: float = 1e-6
    lambda_align: float = 0.1
    loss: LossWeights = field(default_factory=LossWeights)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    match_w_joint: float = 1.0
    match_w_presence: float = 0.5
    flip_prob: float = 0.0
    stochastic_noise: bool = False
    noise_seed: int = 1234
    log_every: int = 50
    ckpt_every: int = 1000
    # pretraining budgets
    ae_steps: int = 1200
    denoise_steps: int = 600
    pretrain_lr: float = 2e-3
    pretrain_batch: int = 16


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_FUSION_MODES = ("sum", "concat", "cmf")


def validate(cfg: RunConfig) -> RunConfig:
    m, s, t = cfg.model, cfg.scene, cfg.train
    if s.image_hw != m.image_hw:
        raise ConfigurationError(
            f"scene.image_hw {s.image_hw} must match model.image_hw {m.image_hw}")
    if m.image_hw[0] % (m.patch_size * 2) or m.image_hw[1] % (m.patch_size * 2):
        # latent grid is image/4; patch grid must also divide evenly
        if m.image_hw[0] % m.patch_size or m.image_hw[1] % m.patch_size:
            raise ConfigurationError(f"image {m.image_hw} not divisible by patch {m.patch_size}")
    if m.image_hw[0] % 4 or m.image_hw[1] % 4:
        raise ConfigurationError(f"image {m.image_hw} not divisible by the x4 latent stride")
    if m.d_model % m.n_heads:
        raise ConfigurationError(f"d_model {m.d_model} not divisible by n_heads {m.n_heads}")
    if m.d_fuse % m.fuse_heads or m.d_shared % m.fuse_heads:
        raise ConfigurationError("fusion width must be divisible by fuse_heads")
    if not 0.0 <= t.lambda_align <= 1.0:
        raise ConfigurationError(f"lambda_align {t.lambda_align} outside [0, 1]")
    if t.ablation.fusion_mode not in _FUSION_MODES:
        raise ConfigurationError(
            f"fusion_mode {t.ablation.fusion_mode!r} not one of {_FUSION_MODES}")
    if not 1 <= m.t_star <= m.t_steps:
        raise ConfigurationError(f"t_star {m.t_star} outside [1, {m.t_steps}]")
    if s.k_range[0] < 1 or s.k_range[1] < s.k_range[0]:
        raise ConfigurationError(f"bad k_range {s.k_range}")
    if s.k_range[1] > m.k_max:
        raise ConfigurationError(
            f"k_range max {s.k_range[1]} exceeds model k_max {m.k_max}")
    if not 0.0 <= s.occlusion_prob <= 1.0:
        raise ConfigurationError(f"occlusion_prob {s.occlusion_prob} outside [0, 1]")
    if s.focal_px <= 0:
        raise ConfigurationError(f"focal_px must be positive, got {s.focal_px}")
    return cfg


def toy_preset() -> RunConfig:
    """Desk-scale defaults: 64x64 scenes, 24-joint body, small transformer dims."""
    return validate(RunConfig())


def paper_scale_preset() -> RunConfig:
    """Full-scale dimensioning (448px crops, 53-joint body, 768-d prompt tokens).

    Provided for completeness; nothing in the test suite trains at this size.
    """
    cfg = RunConfig()
    cfg.scene.image_hw = (448, 448)
    cfg.scene.body = BodyConfig(n_vertices=4096, n_joints=53, n_shape=10, n_expression=10)
    cfg.scene.focal_px = 500.0
    cfg.model.image_hw = (448, 448)
    cfg.model.patch_size = 16
    cfg.model.d_model = 384
    cfg.model.n_heads = 6
    cfg.model.n_blocks = 8
    cfg.model.d_prompt = 768
    cfg.model.prompt_hidden = 768
    cfg.model.d_shared = 384
    cfg.model.d_fuse = 384
    cfg.model.unet_base = 96
    cfg.model.ae_base = 32
    return validate(cfg)


PRESETS = {"toy": toy_preset, "paper_scale": paper_scale_preset}


# ---------------------------------------------------------------------------
# strict dict <-> dataclass plumbing


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"config section {path or cls.__name__!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigurationError(f"unknown config key {path + key!r}")
        ftype = fields[key].type
        if dataclasses.is_dataclass(_resolve(ftype)):
            kwargs[key] = _from_dict(_resolve(ftype), value, path + key + ".")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


_TYPES = {}


def _resolve(tp):
    # dataclass field types arrive as strings under `from __future__ import annotations`
    if isinstance(tp, str):
        if not _TYPES:
            _TYPES.update({c.__name__: c for c in
                           (BodyConfig, SceneConfig, ModelConfig, AblationConfig,
                            LossWeights, TrainConfig, RunConfig)})
        return _TYPES.get(tp, tp)
    return tp


def to_dict(cfg) -> dict:
    """Dataclass tree -> plain dict (tuples become lists for JSON)."""
    out = dataclasses.asdict(cfg)

    def fix(node):
        if isinstance(node, dict):
            return {k: fix(v) for k, v in node.items()}
        if isinstance(node, tuple):
            return [fix(v) for v in node]
        return node

    return fix(out)


def from_dict(data: dict) -> RunConfig:
    return validate(_from_dict(RunConfig, data, ""))


def load_config(path=None, preset: str = "toy", overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from a preset, an optional JSON file, and CLI overrides."""
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
    base = to_dict(PRESETS[preset]())
    if path is not None:
        try:
            with open(path) as fh:
                file_data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        _merge_checked(base, file_data, "")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        dotted, _, raw = item.partition("=")
        _apply_override(base, dotted.strip(), raw.strip())
    return from_dict(base)


def _merge_checked(base: dict, incoming: dict, path: str) -> None:
    if not isinstance(incoming, dict):
        raise ConfigurationError(f"config section {path!r} must be an object")
    for key, value in incoming.items():
        if key not in base:
            raise ConfigurationError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and not isinstance(value, (list, tuple)):
            _merge_checked(base[key], value, path + key + ".")
        else:
            base[key] = value


def _apply_override(base: dict, dotted: str, raw: str) -> None:
    node = base
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigurationError(f"unknown config key {dotted!r}")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node:
        raise ConfigurationError(f"unknown config key {dotted!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings like fusion_mode=sum
    node[leaf] = value
