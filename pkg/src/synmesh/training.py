"""Losses, the main optimization loop, model evaluation, and the ablation grid.

The generative core is pretrained and frozen first (``pretrain_generative_core``);
``train`` then fits the encoder, adapters, dictionaries, fusion and head under
L = lambda * L_align + (1 - lambda) * L_reg.  All randomness is derived from
(seed, step) so a run is reproducible from config alone and a resumed run only
needs weights + optimizer state + step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .body_model import (BodyParams, BodyTemplate, forward as body_forward,
                         make_toy_template, region_vertex_indices)
from .checkpoints import load_checkpoint, restore_modules, save_checkpoint
from .config import AblationConfig, LossWeights, RunConfig, to_dict, validate
from .diffusion import (GenerativePathway, pretrain_autoencoder,
                        pretrain_denoiser)
from .errors import DomainError, StateError, TrainingError
from .heads import InstancePrediction, match_instances
from .metrics import (EvalReport, detection_f1, match_by_joints, mpjpe, mpve,
                      pa_mpjpe, region_mpve)
from .pipeline import (SceneBatch, SynergyModel, collate, predict_scene,
                       project_pixels, sample_tensors)
from .scenes import SceneSample, flip_sample, generate_dataset

ROOT_JOINT = 0


# ---------------------------------------------------------------------------
# losses


def reg_loss(prediction: InstancePrediction, batch: SceneBatch,
             template: BodyTemplate, weights: LossWeights, *,
             match_w_joint: float = 1.0,
             match_w_presence: float = 0.5) -> tuple[torch.Tensor, dict]:
    """Supervised term: parameter L1 + 3D/2D geometry + presence BCE.

    Matched ground truth runs through the same body forward pass (no grad) so
    the parameter and geometry terms vanish exactly when predictions equal the
    ground truth.  Returns (total, float breakdown).
    """
    presence = prediction.presence_logit
    b, k = presence.shape
    h, w = batch.images.shape[-2:]
    norm = float(max(h, w))
    cam = batch.samples[0].camera  # one shared pinhole per dataset

    flat = prediction.params.map(lambda t: t.reshape(b * k, *t.shape[2:]))
    mesh = body_forward(flat, template)
    pred_j = mesh.joints3d.reshape(b, k, *mesh.joints3d.shape[1:])
    pred_v = mesh.vertices.reshape(b, k, *mesh.vertices.shape[1:])
    pred_px = project_pixels(pred_j, cam.focal_px, cam.principal,
                             prediction.cam_offset)

    px_np = pred_px.detach().cpu().numpy()
    pres_np = prediction.presence.detach().cpu().numpy()
    matches = []
    for i, sample in enumerate(batch.samples):
        gt2d = np.stack([inst.joints2d for inst in sample.instances])
        pairs = match_instances(px_np[i], pres_np[i], gt2d,
                                w_joint=match_w_joint, w_presence=match_w_presence,
                                scale=norm)
        matches.extend((i, p, g) for p, g in pairs)

    targets = torch.zeros_like(presence)
    zero = presence.new_zeros(())
    terms = {name: zero for name in
             ("theta", "beta", "alpha", "joints3d", "vertices", "joints2d")}
    if matches:
        si = torch.tensor([m[0] for m in matches])
        ki = torch.tensor([m[1] for m in matches])
        targets[si, ki] = 1.0
        gt_params = BodyParams.stack(
            [batch.samples[i].instances[g].params for i, _, g in matches]
        ).to(presence.dtype)
        with torch.no_grad():
            gt_mesh = body_forward(gt_params, template)
            gt_px = project_pixels(gt_mesh.joints3d, cam.focal_px, cam.principal)

        def l1(a, c):
            return (a - c).abs().mean()

        p = prediction.params
        terms = {
            "theta": l1(p.theta[si, ki], gt_params.theta),
            "beta": l1(p.beta[si, ki], gt_params.beta),
            "alpha": l1(p.alpha[si, ki], gt_params.alpha),
            "joints3d": l1(pred_j[si, ki], gt_mesh.joints3d),
            "vertices": l1(pred_v[si, ki], gt_mesh.vertices),
            "joints2d": l1(pred_px[si, ki], gt_px) / norm,
        }
    bce = F.binary_cross_entropy_with_logits(presence, targets)
    total = (weights.theta * terms["theta"] + weights.beta * terms["beta"]
             + weights.alpha * terms["alpha"] + weights.joints3d * terms["joints3d"]
             + weights.vertices * terms["vertices"] + weights.joints2d * terms["joints2d"]
             + weights.presence * bce)
    breakdown = {name: float(v.detach()) for name, v in terms.items()}
    breakdown["presence"] = float(bce.detach())
    breakdown["n_matched"] = len(matches)
    return total, breakdown


def total_loss(l_align: torch.Tensor, l_reg: torch.Tensor,
               lambda_align: float) -> torch.Tensor:
    """Convex combination lambda * align + (1 - lambda) * reg."""
    if not 0.0 <= lambda_align <= 1.0:
        raise DomainError(f"lambda_align {lambda_align} outside [0, 1]")
    return lambda_align * l_align + (1.0 - lambda_align) * l_reg


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(model: SynergyModel, samples: list[SceneSample],
                   template: BodyTemplate, noise_seed: int, *,
                   presence_threshold: float = 0.5,
                   f1_threshold_px: float = 6.0,
                   return_predictions: bool = False):
    """Presence-free assignment for the distance metrics, thresholded F1.

    Every ground-truth instance is matched against the full query bank (so the
    error metrics never have holes); detection quality is scored separately
    from presence-thresholded root positions.
    """
    regions = region_vertex_indices(template)
    rows, pred_rows = [], []
    for sample in samples:
        sp = predict_scene(model, sample, noise_seed,
                           threshold=presence_threshold, keep_all=True)
        params = BodyParams.stack(sp.params)
        with torch.no_grad():
            mesh = body_forward(params, template)
        pj = mesh.joints3d.numpy().astype(np.float64)
        pv = mesh.vertices.numpy().astype(np.float64)
        gt_j = np.stack([i.joints3d for i in sample.instances]).astype(np.float64)
        gt_v = np.stack([i.vertices for i in sample.instances]).astype(np.float64)

        vals = {"mpjpe": [], "pa_mpjpe": [], "mpve": [], "mpve_hands": [],
                "mpve_face": []}
        for p, g in match_by_joints(pj, gt_j):
            vals["mpjpe"].append(mpjpe(pj[p], gt_j[g]))
            vals["pa_mpjpe"].append(pa_mpjpe(pj[p], gt_j[g]))
            pvr = pv[p] - pj[p, ROOT_JOINT]
            gvr = gt_v[g] - gt_j[g, ROOT_JOINT]
            vals["mpve"].append(mpve(pvr, gvr))
            if regions["hands"].size:
                vals["mpve_hands"].append(region_mpve(pvr, gvr, regions["hands"]))
            if regions["face"].size:
                vals["mpve_face"].append(region_mpve(pvr, gvr, regions["face"]))

        kept = sp.presence > presence_threshold
        gt_roots = np.stack([i.joints2d[ROOT_JOINT] for i in sample.instances])
        f1 = detection_f1(sp.joints2d_root[kept], gt_roots, f1_threshold_px)
        row = {"scene_seed": sample.seed}
        row.update({key: (float(np.mean(v)) if v else None)
                    for key, v in vals.items()})
        row.update(f1)
        rows.append(row)

        if return_predictions:
            idx = np.nonzero(kept)[0]
            pred_rows.append({
                "scene_seed": sample.seed,
                "presence": sp.presence[idx],
                "query_index": sp.query_index[idx],
                "cam_offset": sp.cam_offset[idx],
                "theta": params.theta.numpy()[idx],
                "beta": params.beta.numpy()[idx],
                "alpha": params.alpha.numpy()[idx],
                "root_rotation": params.root_rotation.numpy()[idx],
                "root_translation": params.root_translation.numpy()[idx],
            })
    report = EvalReport.from_scene_rows(rows)
    if return_predictions:
        return report, pred_rows
    return report


# ---------------------------------------------------------------------------
# checkpoint plumbing (weights + optimizer + step)


def save_training_state(path, model: SynergyModel, opt, step: int,
                        config_echo: dict) -> None:
    extra = {}
    for idx, state in opt.state_dict()["state"].items():
        for key, val in state.items():
            if torch.is_tensor(val):
                extra[f"optimizer.{idx}.{key}"] = val
    save_checkpoint(path, {"model": model}, step, config_echo,
                    extra_tensors=extra)


def load_training_state(path, model: SynergyModel, opt=None) -> int:
    """Restore model (and optimizer, when given); returns the stored step."""
    manifest, tensors = load_checkpoint(path)
    restore_modules({"model": model}, tensors)
    if opt is not None:
        sd = opt.state_dict()
        state: dict[int, dict] = {}
        for name, arr in tensors.items():
            if not name.startswith("optimizer."):
                continue
            _, idx, key = name.split(".", 2)
            state.setdefault(int(idx), {})[key] = torch.from_numpy(
                np.ascontiguousarray(arr))
        sd["state"] = state
        opt.load_state_dict(sd)
    return int(manifest["step"])


# ---------------------------------------------------------------------------
# pretraining orchestration


def pretrain_generative_core(gen: GenerativePathway, samples: list[SceneSample],
                             cfg: RunConfig, seed: int | None = None) -> dict:
    """Autoencoder then conditional denoiser; freezes the core when done."""
    tcfg = cfg.train
    seed = tcfg.seed if seed is None else seed
    images = torch.stack([torch.from_numpy(s.image).permute(2, 0, 1).float()
                          for s in samples])
    ae_stats = pretrain_autoencoder(gen, images, tcfg.ae_steps,
                                    lr=tcfg.pretrain_lr,
                                    batch=tcfg.pretrain_batch, seed=seed)
    cache = [sample_tensors(s, cfg.model, cfg.scene, tcfg.noise_seed)
             for s in samples]

    def batch_fn(rng):
        idx = rng.integers(0, len(cache), min(tcfg.pretrain_batch, len(cache)))
        bt = collate([cache[i] for i in idx])
        return bt.images, bt.heatmap, bt.prompt_xy, bt.prompt_conf

    den_stats = pretrain_denoiser(gen, batch_fn, tcfg.denoise_steps,
                                  lr=tcfg.pretrain_lr, seed=seed)
    return {"autoencoder": ae_stats, "denoiser": den_stats}


# ---------------------------------------------------------------------------
# main loop


def train(model: SynergyModel, samples: list[SceneSample], cfg: RunConfig,
          template: BodyTemplate, *, eval_samples: list[SceneSample] | None = None,
          out_dir=None, resume_from=None) -> dict:
    """Optimize the assembled model; returns the metric log and MPJPE endpoints.

    Logs one JSONL row per ``log_every`` steps with keys step / L_total /
    L_align / L_reg / MPJPE_val; MPJPE_val is filled at step 0 and on the final
    step, null elsewhere.
    """
    tcfg = cfg.train
    if not samples:
        raise StateError("empty training set")
    if model.ablation.use_gen_pathway and not model.generative.pretrained:
        raise StateError("generative core must be pretrained and frozen "
                         "before assembly training")
    cache = [sample_tensors(s, cfg.model, cfg.scene, tcfg.noise_seed)
             for s in samples]
    opt = torch.optim.AdamW(model.trainable_parameters(), lr=tcfg.lr,
                            weight_decay=tcfg.weight_decay)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl" if out_dir is not None else None
    config_echo = to_dict(cfg)
    eval_set = eval_samples if eval_samples is not None else samples

    start_step = 0
    if resume_from is not None:
        start_step = load_training_state(resume_from, model, opt)
        if start_step > tcfg.steps:
            raise StateError(f"checkpoint step {start_step} beyond cfg steps {tcfg.steps}")

    log_rows: list[dict] = []

    def log(row):
        log_rows.append(row)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row) + "\n")

    mpjpe_initial = None
    if start_step == 0:
        mpjpe_initial = evaluate_model(model, eval_set, template,
                                       tcfg.noise_seed).mpjpe
        log({"step": 0, "L_total": None, "L_align": None, "L_reg": None,
             "MPJPE_val": mpjpe_initial})

    switch = int(math.ceil(tcfg.steps * (1.0 - tcfg.final_frac)))
    mpjpe_final = None
    model.train()
    for step in range(start_step + 1, tcfg.steps + 1):
        lr = tcfg.lr_final if step > switch else tcfg.lr
        for group in opt.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed + 2**34, step]))
        idx = rng.integers(0, len(samples), tcfg.batch_size)
        entries = []
        for i in idx:
            if tcfg.flip_prob > 0.0 and rng.random() < tcfg.flip_prob:
                entries.append(sample_tensors(flip_sample(samples[i], template),
                                              cfg.model, cfg.scene, tcfg.noise_seed))
            else:
                entries.append(cache[i])
        batch = collate(entries)
        generator = None
        if tcfg.stochastic_noise:
            gseed = int(np.random.SeedSequence(
                [tcfg.noise_seed + 2**35, step]).generate_state(1)[0])
            generator = torch.Generator().manual_seed(gseed)

        out = model(batch, generator=generator)
        l_align = model.alignment_loss(out)
        l_reg, breakdown = reg_loss(out.prediction, batch, template, tcfg.loss,
                                    match_w_joint=tcfg.match_w_joint,
                                    match_w_presence=tcfg.match_w_presence)
        loss = total_loss(l_align, l_reg, tcfg.lambda_align)
        if not bool(torch.isfinite(loss)):
            breakdown["L_align"] = float(l_align.detach())
            raise TrainingError(f"non-finite loss at step {step}", step=step,
                                breakdown=breakdown)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

        if step % tcfg.log_every == 0 or step == tcfg.steps or step == 1:
            row = {"step": step, "L_total": float(loss.detach()),
                   "L_align": float(l_align.detach()), "L_reg": float(l_reg.detach()),
                   "MPJPE_val": None}
            if step == tcfg.steps:
                mpjpe_final = evaluate_model(model, eval_set, template,
                                             tcfg.noise_seed).mpjpe
                row["MPJPE_val"] = mpjpe_final
                model.train()
            log(row)
        if out_dir is not None and tcfg.ckpt_every \
                and step % tcfg.ckpt_every == 0 and step != tcfg.steps:
            save_training_state(out_dir / f"ckpt_{step:06d}.bin", model, opt,
                                step, config_echo)

    model.eval()
    result = {"log": log_rows, "mpjpe_initial": mpjpe_initial,
              "mpjpe_final": mpjpe_final, "steps": tcfg.steps}
    if out_dir is not None:
        final_path = out_dir / "ckpt_final.bin"
        save_training_state(final_path, model, opt, tcfg.steps, config_echo)
        result["checkpoint"] = str(final_path)
    return result


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class AblationCell:
    name: str
    ablation: AblationConfig
    lambda_align: float | None = None  # None -> inherit cfg.train.lambda_align


def default_cells() -> list[AblationCell]:
    """2x2 attention-guidance grid at the full fusion + the two baselines."""
    return [
        AblationCell("cmf_attn_both", AblationConfig(True, True, "cmf", True)),
        AblationCell("cmf_attn_enc_only", AblationConfig(True, False, "cmf", True)),
        AblationCell("cmf_attn_gen_only", AblationConfig(False, True, "cmf", True)),
        AblationCell("cmf_attn_none", AblationConfig(False, False, "cmf", True)),
        AblationCell("sum_attn_both", AblationConfig(True, True, "sum", True)),
        AblationCell("concat_attn_both", AblationConfig(True, True, "concat", True)),
    ]


def encoder_only_cell() -> AblationCell:
    """Discriminative-only control: no generative pathway, no alignment term."""
    return AblationCell("encoder_only",
                        AblationConfig(True, True, "cmf", False),
                        lambda_align=0.0)


def run_ablation(cfg: RunConfig, cells: list[AblationCell], seeds: list[int], *,
                 n_train: int = 256, n_eval: int = 64, steps: int | None = None,
                 out_dir=None, template: BodyTemplate | None = None,
                 occluded_prob: float = 0.6, pretrain_subset: int = 128) -> dict:
    """Train every (cell, seed) against shared data and a shared frozen core.

    Per seed: one training set at the configured occlusion rate, plus a clean
    held-out set and a stressed copy of the *same* held-out scenes rendered
    with occlusion at ``occluded_prob`` — degradation is paired per scene.
    The generative core is pretrained once per seed and copied into each cell
    so fusion/attention comparisons are not confounded by different cores.
    """
    cfg = validate(cfg)
    template = template or make_toy_template(cfg.scene.body, cfg.scene.template_seed)
    steps = cfg.train.steps if steps is None else steps
    clean_cfg = replace(cfg.scene, occlusion_prob=0.0)
    occ_cfg = replace(cfg.scene, occlusion_prob=occluded_prob)
    out_dir = Path(out_dir) if out_dir is not None else None

    rows = []
    for seed in seeds:
        train_ds = generate_dataset(seed * 1_000_003 + 11, n_train, cfg.scene, template)
        # same generation seed for both eval sets: occlusion is sampled after the
        # scene is fully built, so the stressed set is the clean scenes with
        # occluders overlaid and degradation is a paired comparison
        eval_seed = seed * 1_000_003 + 23
        eval_clean = generate_dataset(eval_seed, n_eval, clean_cfg, template)
        eval_occ = generate_dataset(eval_seed, n_eval, occ_cfg, template)

        torch.manual_seed(seed + 1_000_000)
        core = GenerativePathway(cfg.model, cfg.scene.body.n_joints)
        pretrain_generative_core(core, train_ds[:min(len(train_ds), pretrain_subset)],
                                 cfg, seed=seed)
        core_state = {k: v.clone() for k, v in core.state_dict().items()}

        for ci, cell in enumerate(cells):
            tseed = int(np.random.SeedSequence([seed + 2**36, ci]).generate_state(1)[0])
            torch.manual_seed(tseed % (2**31))
            model = SynergyModel(cfg.model, cfg.scene, cell.ablation)
            model.generative.load_state_dict(core_state)
            model.generative.freeze_core()
            lam = cfg.train.lambda_align if cell.lambda_align is None else cell.lambda_align
            cell_cfg = replace(cfg, train=replace(
                cfg.train, seed=seed, steps=steps, lambda_align=lam))
            cell_dir = out_dir / f"seed{seed}" / cell.name if out_dir is not None else None
            train(model, train_ds, cell_cfg, template,
                  eval_samples=eval_clean, out_dir=cell_dir)
            rep_clean = evaluate_model(model, eval_clean, template, cfg.train.noise_seed)
            rep_occ = evaluate_model(model, eval_occ, template, cfg.train.noise_seed)
            rows.append({
                "cell": cell.name, "seed": seed,
                "mpjpe": rep_clean.mpjpe, "pa_mpjpe": rep_clean.pa_mpjpe,
                "mpve": rep_clean.mpve, "f1": rep_clean.f1,
                "mpjpe_occluded": rep_occ.mpjpe, "f1_occluded": rep_occ.f1,
                "degradation": (rep_occ.mpjpe - rep_clean.mpjpe)
                / max(rep_clean.mpjpe, 1e-9),
            })

    means: dict[str, dict] = {}
    for cell in cells:
        cell_rows = [r for r in rows if r["cell"] == cell.name]
        means[cell.name] = {
            key: float(np.mean([r[key] for r in cell_rows]))
            for key in ("mpjpe", "pa_mpjpe", "mpve", "f1", "mpjpe_occluded",
                        "degradation")
        }
    result = {"rows": rows, "means": means, "seeds": list(seeds),
              "steps": steps, "n_train": n_train, "n_eval": n_eval,
              "occluded_prob": occluded_prob}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ablation.json", "w") as fh:
            json.dump({"config": to_dict(cfg), **result}, fh, indent=2)
    return result
