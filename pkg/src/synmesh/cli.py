"""Command-line entry points.

Subcommands: synth / pretrain / train / eval / ablate / viz-attn.
Exit codes: 0 success, 2 bad configuration or usage, 3 missing or unreadable
input, 4 numerical failure (non-finite loss, degenerate geometry).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .body_model import make_toy_template, save_template
from .checkpoints import load_checkpoint, restore_modules, save_checkpoint
from .config import RunConfig, from_dict, load_config, to_dict
from .diffusion import GenerativePathway
from .errors import (CapacityError, ConfigurationError, ContainerError,
                     DegeneracyError, DomainError, ShapeError, StateError,
                     TrainingError)
from .metrics import write_predictions
from .pipeline import SynergyModel, make_batch
from .scenes import generate_dataset, read_dataset, write_dataset
from .training import (default_cells, encoder_only_cell, evaluate_model,
                       pretrain_generative_core, run_ablation, train)


def _add_config_args(sp):
    sp.add_argument("--config", type=Path, default=None,
                    help="JSON config file (merged over the preset)")
    sp.add_argument("--preset", choices=("toy", "paper_scale"), default="toy")
    sp.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="SECTION.KEY=VALUE",
                    help="dotted config override, repeatable")


def _config(args) -> RunConfig:
    return load_config(args.config, args.preset, args.overrides)


def _template_for(cfg: RunConfig):
    return make_toy_template(cfg.scene.body, cfg.scene.template_seed)


def _build_from_checkpoint(ckpt_path, args=None):
    """Model + config from a training checkpoint (CLI config replaces stored)."""
    manifest, tensors = load_checkpoint(ckpt_path)
    if args is not None and (args.config or args.overrides):
        cfg = _config(args)
    else:
        cfg = from_dict(manifest["config"])
    model = SynergyModel(cfg.model, cfg.scene, cfg.train.ablation)
    restore_modules({"model": model}, tensors)
    if cfg.train.ablation.use_gen_pathway:
        model.generative.freeze_core()
    model.eval()
    return model, cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _config(args)
    template = _template_for(cfg)
    samples = generate_dataset(args.seed, args.n, cfg.scene, template)
    write_dataset(samples, args.out, config_echo=to_dict(cfg))
    if args.template_out:
        save_template(template, args.template_out)
        print(f"wrote body template -> {args.template_out}")
    kinds = {}
    for s in samples:
        kinds[s.occlusion_meta.get("kind", "none")] = \
            kinds.get(s.occlusion_meta.get("kind", "none"), 0) + 1
    print(f"wrote {len(samples)} scenes -> {args.out} (occlusion mix: {kinds})")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    samples = read_dataset(args.data)
    torch.manual_seed(cfg.train.seed)
    gen = GenerativePathway(cfg.model, cfg.scene.body.n_joints)
    stats = pretrain_generative_core(gen, samples, cfg)
    save_checkpoint(args.out, {"generative": gen}, 0,
                    {"config": to_dict(cfg), "pretrain": stats})
    ae = stats["autoencoder"]
    dn = stats["denoiser"]
    print(f"autoencoder: final mse {ae['final_mse']:.6f} "
          f"(image variance {ae['image_variance']:.6f})")
    print(f"denoiser: probe loss {dn['probe_before']:.4f} -> {dn['probe_after']:.4f}")
    print(f"wrote frozen core -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    samples = read_dataset(args.data)
    eval_samples = read_dataset(args.eval_data) if args.eval_data else None
    template = _template_for(cfg)
    torch.manual_seed(cfg.train.seed)
    model = SynergyModel(cfg.model, cfg.scene, cfg.train.ablation)
    if cfg.train.ablation.use_gen_pathway:
        if args.resume:
            model.generative.freeze_core()  # weights come from the checkpoint
        elif args.core:
            _, tensors = load_checkpoint(args.core)
            restore_modules({"generative": model.generative}, tensors)
            model.generative.freeze_core()
        else:
            print("no --core given; pretraining the generative core inline")
            pretrain_generative_core(model.generative, samples, cfg)
    result = train(model, samples, cfg, template, eval_samples=eval_samples,
                   out_dir=args.out, resume_from=args.resume)
    last = result["log"][-1] if result["log"] else {}
    print(f"trained {result['steps']} steps; "
          f"MPJPE {result['mpjpe_initial']} -> {result['mpjpe_final']} "
          f"(final L_total {last.get('L_total')})")
    if "checkpoint" in result:
        print(f"checkpoint -> {result['checkpoint']}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = _build_from_checkpoint(args.ckpt, args)
    samples = read_dataset(args.data)
    template = _template_for(cfg)
    report, pred_rows = evaluate_model(model, samples, template,
                                       cfg.train.noise_seed,
                                       return_predictions=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json", config_echo=to_dict(cfg))
    report.to_csv(out / "per_scene.csv")
    write_predictions(out / "predictions.bin", pred_rows,
                      config_echo=to_dict(cfg))
    s = report.summary()
    print(f"evaluated {s['n_scenes']} scenes: "
          f"MPJPE {s['mpjpe']:.2f}  PA-MPJPE {s['pa_mpjpe']:.2f}  "
          f"MPVE {s['mpve']:.2f}  F1 {s['f1']:.3f}")
    print(f"report -> {out / 'report.json'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    cells = default_cells()
    if args.baseline:
        cells.append(encoder_only_cell())
    if args.cells:
        wanted = [c.strip() for c in args.cells.split(",") if c.strip()]
        known = {c.name for c in cells}
        unknown = [w for w in wanted if w not in known]
        if unknown:
            raise ConfigurationError(
                f"unknown ablation cells {unknown}; available: {sorted(known)}")
        cells = [c for c in cells if c.name in wanted]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    result = run_ablation(cfg, cells, seeds, n_train=args.n_train,
                          n_eval=args.n_eval, steps=args.steps,
                          out_dir=args.out)
    width = max(len(c.name) for c in cells)
    print(f"{'cell'.ljust(width)}  {'mpjpe':>8}  {'occ':>8}  {'degr':>6}  {'f1':>5}")
    for name, m in result["means"].items():
        print(f"{name.ljust(width)}  {m['mpjpe']:8.2f}  {m['mpjpe_occluded']:8.2f}  "
              f"{m['degradation']:6.3f}  {m['f1']:5.3f}")
    if args.out:
        print(f"rows -> {Path(args.out) / 'ablation.json'}")
    return 0


def cmd_viz_attn(args) -> int:
    model, cfg = _build_from_checkpoint(args.ckpt, args)
    samples = read_dataset(args.data)[: args.n_scenes]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = cfg.model.image_hw
    gh, gw = cfg.model.token_grid()
    n_files = 0
    for sample in samples:
        batch = make_batch([sample], cfg.model, cfg.scene, cfg.train.noise_seed)
        with torch.no_grad():
            output = model(batch)
        for bi, attn in enumerate(output.decoder_attn):
            grids = attn[0].mean(dim=0).reshape(-1, gh, gw).numpy()  # (K, gh, gw)
            np.save(out / f"scene{sample.seed}_block{bi}.npy", grids)
            for q in range(grids.shape[0]):
                g = grids[q]
                peak = g.max()
                img = (g / peak if peak > 0 else g) * 255.0
                pil = Image.fromarray(img.astype(np.uint8), mode="L")
                pil = pil.resize((w, h), Image.NEAREST)
                pil.save(out / f"scene{sample.seed}_block{bi}_query{q}.png")
                n_files += 1
    print(f"wrote {n_files} attention maps for {len(samples)} scenes -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="synmesh",
        description="Occlusion-robust multi-person mesh recovery on synthetic scenes")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic scene dataset")
    _add_config_args(sp)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--n", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--template-out", type=Path, default=None)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("pretrain", help="pretrain and freeze the generative core")
    _add_config_args(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="train the assembled model")
    _add_config_args(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--core", type=Path, default=None,
                    help="pretrained generative core checkpoint")
    sp.add_argument("--eval-data", type=Path, default=None)
    sp.add_argument("--resume", type=Path, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_config_args(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run the fusion/attention ablation grid")
    _add_config_args(sp)
    sp.add_argument("--out", type=Path, default=None,
                    help="directory for ablation.json + per-cell logs (optional)")
    sp.add_argument("--seeds", type=str, default="0,1,2")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--n-train", type=int, default=256)
    sp.add_argument("--n-eval", type=int, default=64)
    sp.add_argument("--cells", type=str, default=None,
                    help="comma-separated cell names (default: all)")
    sp.add_argument("--baseline", action="store_true",
                    help="include the encoder-only control")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("viz-attn", help="dump decoder attention maps as PNG/NPY")
    _add_config_args(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--n-scenes", type=int, default=4)
    sp.set_defaults(func=cmd_viz_attn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TrainingError, DegeneracyError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except (FileNotFoundError, IsADirectoryError, ContainerError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 3
    except (ConfigurationError, DomainError, ShapeError, StateError,
            CapacityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
