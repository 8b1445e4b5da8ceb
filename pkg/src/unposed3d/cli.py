"""Command-line entry points for dataset generation, training, evaluation,
reconstruction, mesh export and the ablation suite.

Config files are YAML mirroring the training/model config fields; flags win
over file values, unknown keys are rejected, and the merged config is echoed
into the output directory for provenance.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .augmentation import AugmentationSchedule
from .model import ModelConfig
from .training import TrainConfig

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_AUG_KEYS = {f.name for f in dataclasses.fields(AugmentationSchedule)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"model", "augmentation"}
_TOP_KEYS = _TRAIN_KEYS | {"model", "augmentation", "dataset", "out", "prior", "mode", "seed", "prior_checkpoint"}


def load_config_file(path: Path) -> dict:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for section, allowed in (("model", _MODEL_KEYS), ("augmentation", _AUG_KEYS)):
        bad = set(raw.get(section, {}) or {}) - allowed
        if bad:
            raise ValueError(f"unknown {section} config keys: {sorted(bad)}")
    return raw


def build_train_config(raw: dict) -> TrainConfig:
    model = ModelConfig(**(raw.get("model") or {}))
    aug = AugmentationSchedule(**(raw.get("augmentation") or {}))
    kwargs = {k: v for k, v in raw.items() if k in _TRAIN_KEYS}
    return TrainConfig(model=model, augmentation=aug, **kwargs)


def _echo_config(raw: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config_echo.yaml", "w") as fh:
        yaml.safe_dump(raw, fh, sort_keys=True)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _merge_flags(raw: dict, args) -> dict:
    if getattr(args, "steps", None) is not None:
        raw["total_steps"] = args.steps
    if getattr(args, "prior", None) is not None:
        raw["prior"] = args.prior
    if getattr(args, "mode", None) is not None:
        raw["mode"] = args.mode
    return raw


def _load_prior(raw: dict, args):
    kind = raw.get("prior", "oracle")
    if kind == "toy":
        ckpt = raw.get("prior_checkpoint") or getattr(args, "prior_checkpoint", None)
        if ckpt is None:
            raise ValueError("toy prior requires prior_checkpoint")
        from .diffusion import ToyDenoiser

        payload = torch.load(ckpt, weights_only=False)
        model = ToyDenoiser(**payload["hparams"])
        model.load_state_dict(payload["state_dict"])
        model.eval()
        return kind, model
    return kind, None


def cmd_gen_data(args) -> int:
    from .data import build_dataset

    manifest = build_dataset(
        n_objects=args.objects,
        out_dir=Path(args.out),
        frames_per_object=args.frames,
        holdout_per_object=args.holdout,
        resolution=args.resolution,
        theta=args.theta,
        seed=args.seed,
    )
    print(f"wrote {len(manifest['objects'])} objects to {args.out}")
    return 0


def cmd_train(args) -> int:
    from . import training

    raw = load_config_file(Path(args.config)) if args.config else {}
    raw = _merge_flags(raw, args)
    dataset = args.dataset or raw.get("dataset")
    if dataset is None:
        return _fail("no dataset given (flag --dataset or config key)")
    cfg = build_train_config(raw)
    out_dir = Path(args.out)
    _echo_config(raw, out_dir)
    mode = raw.get("mode", "pose_free")
    resume = Path(args.resume) if args.resume else None
    if mode == "posed":
        training.train_posed(Path(dataset), cfg, seed=args.seed, out_dir=out_dir, resume=resume)
    elif mode == "pose_free":
        prior_kind, prior = _load_prior(raw, args)
        training.train_pose_free(
            Path(dataset), cfg, seed=args.seed, prior_kind=prior_kind,
            prior=prior, out_dir=out_dir, resume=resume,
        )
    else:
        return _fail(f"unknown mode {mode!r}")
    print(f"training finished; outputs in {out_dir}")
    return 0


def cmd_train_prior(args) -> int:
    from .diffusion import train_toy_denoiser

    model = train_toy_denoiser(
        Path(args.dataset), steps=args.steps, seed=args.seed, base=args.base
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"hparams": {"base": args.base, "t_max": model.t_max}, "state_dict": model.state_dict()},
        out,
    )
    print(f"toy prior saved to {out}")
    return 0


def cmd_reconstruct(args) -> int:
    from .data import load_video, save_image
    from .geometry import default_focal, pose_to_camera, sample_orbit_poses
    from .training import load_checkpoint, reconstruct
    from .triplane import RenderConfig, render

    state = load_checkpoint(Path(args.checkpoint))
    video = load_video(Path(args.dataset), args.object_id)
    _, tp = reconstruct(video.frames, state)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.save({"planes": tp.planes, "extent": tp.extent,
                "decoder": state.model.decoder.state_dict(),
                "decoder_hidden": state.config.model.decoder_hidden}, out / "triplane.pt")
    cfg = state.config
    rng = np.random.default_rng(args.seed)
    poses = sample_orbit_poses(args.turntable_views, cfg.orbit_radius, 0.0, rng)
    rcfg = RenderConfig(samples_per_ray=cfg.samples_per_ray)
    for i, pose in enumerate(poses):
        cam = pose_to_camera(pose, default_focal(cfg.render_resolution, pose.radius),
                             cfg.render_resolution)
        with torch.no_grad():
            img = render(tp, state.model.decoder, cam, rcfg)
        save_image(img, out / f"turntable_{i:03d}.png")
    print(f"tri-plane and turntable renders written to {out}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import aggregate_report, evaluate_holdout
    from .training import load_checkpoint, reconstruct_object
    from .triplane import RenderConfig

    state = load_checkpoint(Path(args.checkpoint))
    cfg = state.config
    per_object = {}
    for oid in state.object_ids:
        tp, dec = reconstruct_object(state, Path(args.dataset), oid)
        per_object[oid] = evaluate_holdout(
            tp, dec, Path(args.dataset), oid,
            render_cfg=RenderConfig(samples_per_ray=cfg.samples_per_ray),
            orbit_radius=cfg.orbit_radius,
            gauge="true" if state.mode == "posed" else "reference",
        )
    report = aggregate_report(per_object, tag=args.tag)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(report.to_json())
    print(report.to_json())
    return 0


def cmd_export_mesh(args) -> int:
    from .triplane import RadianceDecoder, TriPlane, export_mesh

    payload = torch.load(Path(args.triplane), weights_only=False)
    tp = TriPlane(planes=payload["planes"], extent=payload["extent"])
    dec = RadianceDecoder(3 * tp.channels, hidden=payload.get("decoder_hidden", 64))
    dec.load_state_dict(payload["decoder"])
    mesh = export_mesh(tp, dec, grid=args.grid, iso=args.iso)
    if mesh.empty:
        print("warning: density never crosses the iso level; wrote empty mesh",
              file=sys.stderr)
    mesh.save_obj(Path(args.out))
    print(f"mesh with {len(mesh.faces)} triangles written to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import run_ablation_suite

    raw = load_config_file(Path(args.config)) if args.config else {}
    raw = _merge_flags(raw, args)
    dataset = args.dataset or raw.get("dataset")
    if dataset is None:
        return _fail("no dataset given")
    base = build_train_config(raw)
    cfgs = {
        "full": base,
        "no_weak": dataclasses.replace(base, use_sds=False),
        "no_aug": dataclasses.replace(base, freeze_augmentation=True),
    }
    prior_kind, prior = _load_prior(raw, args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    reports = run_ablation_suite(Path(dataset), cfgs, prior_kind=prior_kind,
                                 seeds=seeds, prior=prior)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        tag: [json.loads(r.to_json()) for r in rs] for tag, rs in reports.items()
    }
    (out / "ablation_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    for tag, rs in reports.items():
        mean_psnr = float(np.mean([r.aggregate["psnr"] for r in rs]))
        print(f"{tag}: mean PSNR {mean_psnr:.2f} dB over {len(rs)} seed(s)")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unposed3d",
                                description="pose-free 3D reconstruction pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True)
        sp.add_argument("--workers", type=int, default=1,
                        help="cap for internal worker pools")
        if dataset:
            sp.add_argument("--dataset")

    g = sub.add_parser("gen-data", help="generate a procedural dataset")
    common(g, dataset=False)
    g.add_argument("--objects", type=int, default=20)
    g.add_argument("--frames", type=int, default=40)
    g.add_argument("--holdout", type=int, default=8)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--theta", type=float, default=math.pi / 18)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train pose-free or posed")
    common(t)
    t.add_argument("--config")
    t.add_argument("--mode", choices=["pose_free", "posed"])
    t.add_argument("--prior", choices=["oracle", "toy"])
    t.add_argument("--prior-checkpoint", dest="prior_checkpoint")
    t.add_argument("--steps", type=int)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    tp = sub.add_parser("train-prior", help="fit the toy diffusion prior")
    common(tp)
    tp.add_argument("--steps", type=int, default=2000)
    tp.add_argument("--base", type=int, default=32)
    tp.set_defaults(func=cmd_train_prior)

    r = sub.add_parser("reconstruct", help="checkpoint + video -> tri-plane dump")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--object-id", required=True)
    r.add_argument("--turntable-views", type=int, default=8)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="checkpoint + dataset -> metrics report")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tag", default="full")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("export-mesh", help="tri-plane dump -> OBJ")
    common(m, dataset=False)
    m.add_argument("--triplane", required=True)
    m.add_argument("--grid", type=int, default=64)
    m.add_argument("--iso", type=float, default=5.0)
    m.set_defaults(func=cmd_export_mesh)

    a = sub.add_parser("ablate", help="run the full/no_weak/no_aug suite")
    common(a)
    a.add_argument("--config")
    a.add_argument("--prior", choices=["oracle", "toy"])
    a.add_argument("--prior-checkpoint", dest="prior_checkpoint")
    a.add_argument("--steps", type=int)
    a.add_argument("--seeds", default="0")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
