"""Occlusion-robust multi-person 3D mesh recovery on synthetic scenes.

Two image pathways — a ViT encoder and a frozen single-step conditional
denoiser — are compensated against each other through attention-guided feature
dictionaries, merged by paired cross-attention fusion, and decoded by masked
instance queries into toy parametric body meshes.
"""

from .body_model import (BodyParams, BodyTemplate, MeshResult, forward,
                         load_template, make_toy_template, mirror_maps,
                         region_vertex_indices, rodrigues, save_template)
from .config import (AblationConfig, BodyConfig, LossWeights, ModelConfig,
                     RunConfig, SceneConfig, TrainConfig, from_dict,
                     load_config, paper_scale_preset, to_dict, toy_preset,
                     validate)
from .errors import (CapacityError, ConfigurationError, ContainerError,
                     DegeneracyError, DomainError, ShapeError, StateError,
                     SynmeshError, TrainingError)
from .metrics import (EvalReport, detection_f1, mpjpe, mpve, pa_mpjpe, pve,
                      region_mpve, umeyama_alignment)
from .pipeline import (ModelOutput, SceneBatch, ScenePrediction, SynergyModel,
                       make_batch, predict_scene)
from .scenes import (SceneSample, apply_occlusion, estimator_view, flip_sample,
                     generate_dataset, read_dataset, sample_scene,
                     write_dataset)
from .training import (AblationCell, default_cells, encoder_only_cell,
                       evaluate_model, pretrain_generative_core, reg_loss,
                       run_ablation, total_loss, train)

__version__ = "0.1.0"

__all__ = [
    "AblationCell", "AblationConfig", "BodyConfig", "BodyParams",
    "BodyTemplate", "CapacityError", "ConfigurationError", "ContainerError",
    "DegeneracyError", "DomainError", "EvalReport", "LossWeights",
    "MeshResult", "ModelConfig", "ModelOutput", "RunConfig", "SceneBatch",
    "SceneConfig", "ScenePrediction", "SceneSample", "ShapeError",
    "StateError", "SynergyModel", "SynmeshError", "TrainConfig",
    "TrainingError", "apply_occlusion", "default_cells", "detection_f1",
    "encoder_only_cell", "estimator_view", "evaluate_model", "flip_sample",
    "forward", "from_dict", "generate_dataset", "load_config",
    "load_template", "make_batch", "make_toy_template", "mirror_maps",
    "mpjpe", "mpve", "pa_mpjpe", "paper_scale_preset", "predict_scene",
    "pretrain_generative_core", "pve", "read_dataset", "reg_loss",
    "region_mpve", "region_vertex_indices", "rodrigues", "run_ablation",
    "sample_scene", "save_template", "to_dict", "total_loss", "toy_preset",
    "train", "umeyama_alignment", "validate", "write_dataset",
]
