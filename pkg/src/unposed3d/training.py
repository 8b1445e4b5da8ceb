"""Training pipelines: pose-free (SDS weak supervision + pseudo-view
self-supervision) and the pose-aware render-loss ablation, plus
optimization, checkpointing and run bookkeeping.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augmentation import (
    AugmentationSchedule,
    PseudoViewSet,
    beta_schedule,
    synthesize_pseudo_views,
    timestep_schedule,
)
from .data import load_manifest, load_posed_video, load_video
from .diffusion import NoiseSchedule, OracleDenoiser, sds_gradient
from .evaluation import RandomFeatureExtractor
from .geometry import (
    DEFAULT_RADIUS,
    OrbitPose,
    default_focal,
    generate_rays,
    pose_to_camera,
    sample_orbit_poses,
)
from .model import ModelConfig, ReconstructionModel, desk_config
from .triplane import RenderConfig, TriPlane, render_field, triplane_field


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=desk_config)
    learning_rate: float = 1e-4
    warmup_steps: int = 1000
    total_steps: int = 20000
    batch_objects: int = 4
    frames_per_object_per_step: int = 8
    sds_views: int = 4
    sds_theta: float = math.pi / 18
    lambda_perceptual: float = 1.0
    beta_start: float = 1.0
    beta_end: float = 25000.0
    augmentation: AugmentationSchedule = field(default_factory=lambda: AugmentationSchedule(interval_steps=2000))
    render_resolution: int = 64
    samples_per_ray: int = 32
    orbit_radius: float = DEFAULT_RADIUS
    t_max: int = 1000
    sds_weight_mode: str = "one_minus_alpha_bar"
    use_sds: bool = True  # False = the no_weak ablation
    freeze_augmentation: bool = False  # True = the no_aug ablation (generation 0 only)
    pseudo_views_per_step: int = 8  # mini-batch of pseudo views per object per step
    posed_views_per_step: int = 2
    checkpoint_interval: int = 0  # 0 = only final
    holdout_eval_interval: int = 0  # posed mode only

    def __post_init__(self):
        if min(self.total_steps, self.batch_objects, self.sds_views,
               self.frames_per_object_per_step) < 0:
            raise ValueError("counts must be nonnegative")
        if self.lambda_perceptual < 0:
            raise ValueError("lambda_perceptual must be >= 0")


def full_scale_train_config() -> TrainConfig:
    """Published schedule: 50k steps, 10k warmup, augmentation every 6000."""
    from .model import full_scale_config

    return TrainConfig(
        model=full_scale_config(),
        warmup_steps=10000,
        total_steps=50000,
        augmentation=AugmentationSchedule(interval_steps=6000),
    )


def learning_rate_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine annealing to ~0."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    step: int
    model: ReconstructionModel
    optimizer: torch.optim.Adam
    config: TrainConfig
    object_ids: list[str]
    pseudo_sets: dict[str, PseudoViewSet]
    np_rng: np.random.Generator
    torch_gen: torch.Generator
    metric_history: list[dict] = field(default_factory=list)
    generation: int = 0
    mode: str = "pose_free"


def _render_poses(
    model: ReconstructionModel,
    tp: TriPlane,
    poses: list[OrbitPose],
    cfg: TrainConfig,
    stratified: bool = True,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Batched render of several orbit poses, (n, H, W, 3)."""
    res = cfg.render_resolution
    bundles = [
        generate_rays(pose_to_camera(p, default_focal(res, p.radius), res))
        for p in poses
    ]
    merged = bundles[0]
    origins = torch.cat([b.origins for b in bundles])
    directions = torch.cat([b.directions for b in bundles])
    merged = dataclasses.replace(merged, origins=origins, directions=directions)
    rcfg = RenderConfig(samples_per_ray=cfg.samples_per_ray, stratified=stratified)
    img = render_field(triplane_field(tp, model.decoder), merged, rcfg, generator)
    return img.reshape(len(poses), res, res, 3)


def recon_loss(
    renders: list[torch.Tensor],
    pseudo_images: list[torch.Tensor],
    sds_terms: list[tuple[torch.Tensor, torch.Tensor]],
    lam: float,
    beta: float,
    perceptual_net: RandomFeatureExtractor | None = None,
) -> tuple[torch.Tensor, dict]:
    """Combined loss: mean MSE + lam * mean perceptual + (1/beta) * SDS.

    ``sds_terms`` pairs each injected SDS gradient with the render it applies
    to; the SDS term enters backpropagation as sum(grad * render) so its
    gradient at the render is exactly the injected one. The scalar SDS value
    reported is a proxy norm for logging only.
    """
    if len(renders) != len(pseudo_images):
        raise ValueError("renders and pseudo_images must pair up")
    zero = torch.tensor(0.0)
    mse = zero
    perc = zero
    if renders:
        mse = torch.stack([torch.mean((r - p) ** 2) for r, p in zip(renders, pseudo_images)]).mean()
        if lam > 0 and perceptual_net is not None:
            perc = torch.stack(
                [perceptual_net.distance(r, p) for r, p in zip(renders, pseudo_images)]
            ).mean()
    sds_proxy = zero
    sds_norm = 0.0
    if sds_terms:
        sds_proxy = torch.stack(
            [(g.detach() * r).sum() for g, r in sds_terms]
        ).mean()
        sds_norm = float(np.mean([g.norm().item() for g, _ in sds_terms]))
    total = mse + lam * perc + sds_proxy / beta
    parts = {
        "loss_mse": float(mse.item()),
        "loss_perc": float(perc.item()),
        "sds_grad_norm": sds_norm,
    }
    return total, parts


def _build_priors(dataset_dir, object_ids, prior_kind, prior, sched):
    if prior is not None:
        if isinstance(prior, dict):
            return prior
        return {oid: prior for oid in object_ids}
    if prior_kind == "oracle":
        return {
            oid: OracleDenoiser.for_object(Path(dataset_dir), oid, sched)
            for oid in object_ids
        }
    raise ValueError(
        f"prior_kind {prior_kind!r} needs an explicit denoiser (pass prior=...)"
    )


def _metrics_writer(out_dir: Path | None):
    if out_dir is None:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return open(out_dir / "metrics.jsonl", "a")


def _log(fh, record: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()


def train_pose_free(
    dataset_dir: Path,
    cfg: TrainConfig,
    seed: int = 0,
    prior_kind: str = "oracle",
    prior=None,
    out_dir: Path | None = None,
    resume: Path | None = None,
    object_ids: list[str] | None = None,
) -> TrainState:
    """Pose-free training: no ground-truth pose is ever read.

    Each step renders SDS views at freshly sampled orbit poses and applies
    pixel + perceptual losses against a mini-batch of accumulated
    pseudo-views; every ``interval_steps`` a new pseudo-view generation is
    synthesized through the diffusion prior. The reference image for
    conditioning is frame 0 of each video.
    """
    dataset_dir = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    if cfg.render_resolution != manifest["resolution"]:
        raise ValueError(
            f"render_resolution {cfg.render_resolution} != dataset resolution "
            f"{manifest['resolution']}"
        )
    if object_ids is None:
        object_ids = [o["object_id"] for o in manifest["objects"]]
    videos = {oid: load_video(dataset_dir, oid) for oid in object_ids}
    sched = NoiseSchedule.cosine(cfg.t_max)
    priors = _build_priors(dataset_dir, object_ids, prior_kind, prior, sched)
    perceptual_net = RandomFeatureExtractor()

    if resume is not None:
        state = load_checkpoint(resume)
    else:
        torch.manual_seed(seed)
        model = ReconstructionModel(cfg.model)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        state = TrainState(
            step=0,
            model=model,
            optimizer=optimizer,
            config=cfg,
            object_ids=list(object_ids),
            pseudo_sets={oid: PseudoViewSet() for oid in object_ids},
            np_rng=np.random.default_rng(seed),
            torch_gen=torch.Generator().manual_seed(seed + 1),
            mode="pose_free",
        )
    cfg = state.config
    metrics_fh = _metrics_writer(out_dir)

    while state.step < cfg.total_steps:
        s = state.step
        if s % cfg.augmentation.interval_steps == 0:
            first = state.generation == 0
            if first or not cfg.freeze_augmentation:
                _augment_all(state, videos, priors, sched, cfg)
                if out_dir is not None:
                    save_checkpoint(
                        state, Path(out_dir) / f"ckpt_gen{state.generation - 1:02d}.pt"
                    )
                    _dump_pseudo_views(state, Path(out_dir))

        lr = learning_rate_at(s, cfg)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        beta = beta_schedule(s, cfg.total_steps, cfg.beta_start, cfg.beta_end)

        batch = _pick_objects(state, cfg)
        total = torch.tensor(0.0)
        parts_sum = {"loss_mse": 0.0, "loss_perc": 0.0, "sds_grad_norm": 0.0}
        for oid in batch:
            video = videos[oid]
            frames = _pick_frames(video.frames, cfg.frames_per_object_per_step, state.np_rng)
            tp = state.model(frames)
            renders, targets, sds_terms = [], [], []

            if cfg.use_sds and cfg.sds_views > 0:
                poses = sample_orbit_poses(
                    cfg.sds_views, cfg.orbit_radius, cfg.sds_theta, state.np_rng
                )
                imgs = _render_poses(state.model, tp, poses, cfg,
                                     stratified=True, generator=state.torch_gen)
                t_cap = max(timestep_schedule(s, cfg.total_steps, sched.t_max), 1)
                ref = video.frames[0]
                for img, pose in zip(imgs, poses):
                    t = int(state.np_rng.integers(1, t_cap + 1))
                    g = sds_gradient(
                        img, ref, pose, t, priors[oid], sched,
                        weight_mode=cfg.sds_weight_mode, generator=state.torch_gen,
                    )
                    sds_terms.append((g, img))

            pv = state.pseudo_sets[oid].views
            if pv:
                take = min(len(pv), cfg.pseudo_views_per_step)
                idx = state.np_rng.choice(len(pv), size=take, replace=False)
                chosen = [pv[i] for i in idx]
                imgs = _render_poses(state.model, tp, [v.pose for v in chosen], cfg,
                                     stratified=True, generator=state.torch_gen)
                renders.extend(imgs)
                targets.extend(v.image for v in chosen)

            loss, parts = recon_loss(
                renders, targets, sds_terms, cfg.lambda_perceptual, beta, perceptual_net
            )
            total = total + loss / len(batch)
            for k in parts_sum:
                parts_sum[k] += parts[k] / len(batch)

        if not torch.isfinite(total):
            raise RuntimeError(f"non-finite loss at step {s}: {total.item()}")
        state.optimizer.zero_grad()
        total.backward()
        state.optimizer.step()
        state.step += 1

        record = {"step": s, "beta": beta, "lr": lr, **parts_sum}
        state.metric_history.append(record)
        _log(metrics_fh, record)
        if cfg.checkpoint_interval and out_dir is not None and state.step % cfg.checkpoint_interval == 0:
            save_checkpoint(state, Path(out_dir) / f"ckpt_{state.step:07d}.pt")

    if metrics_fh is not None:
        metrics_fh.close()
    if out_dir is not None:
        save_checkpoint(state, Path(out_dir) / "ckpt_final.pt")
    return state


def _augment_all(state: TrainState, videos, priors, sched, cfg: TrainConfig) -> None:
    for oid in state.object_ids:
        video = videos[oid]
        with torch.no_grad():
            tp = state.model(video.frames[: cfg.frames_per_object_per_step])

        def render_at_pose(pose, tp=tp):
            return _render_poses(state.model, tp, [pose], cfg, stratified=False)[0]

        views = synthesize_pseudo_views(
            render_at_pose,
            video.frames[0],
            priors[oid],
            sched,
            cfg.augmentation,
            state.step,
            cfg.total_steps,
            state.generation,
            state.np_rng,
            generator=state.torch_gen,
            radius=cfg.orbit_radius,
        )
        state.pseudo_sets[oid].extend(views, replace_old=cfg.augmentation.replace_old)
    state.generation += 1


def _dump_pseudo_views(state: TrainState, out_dir: Path) -> None:
    from .data import save_image

    gen = state.generation - 1
    for oid, pvs in state.pseudo_sets.items():
        d = out_dir / "pseudo_views" / oid / f"gen{gen:02d}"
        d.mkdir(parents=True, exist_ok=True)
        fresh = [v for v in pvs.views if v.generation == gen]
        for i, v in enumerate(fresh):
            save_image(v.image, d / f"{i:03d}.png")
            with open(d / f"{i:03d}.json", "w") as fh:
                json.dump(
                    {
                        "pose": v.pose.to_dict(),
                        "created_at_step": v.created_at_step,
                        "t_start_used": v.t_start_used,
                        "generation": v.generation,
                    },
                    fh,
                )


def _pick_objects(state: TrainState, cfg: TrainConfig) -> list[str]:
    ids = state.object_ids
    if len(ids) <= cfg.batch_objects:
        return list(ids)
    idx = state.np_rng.choice(len(ids), size=cfg.batch_objects, replace=False)
    return [ids[i] for i in idx]


def _pick_frames(frames: torch.Tensor, n: int, rng: np.random.Generator) -> torch.Tensor:
    if frames.shape[0] <= n:
        return frames
    idx = np.sort(rng.choice(frames.shape[0], size=n, replace=False))
    return frames[idx]


def train_posed(
    dataset_dir: Path,
    cfg: TrainConfig,
    seed: int = 0,
    out_dir: Path | None = None,
    resume: Path | None = None,
    object_ids: list[str] | None = None,
    shuffle_frames: bool = False,
) -> TrainState:
    """Pose-aware ablation: render loss against ground-truth frames at their
    true poses. Exercises the pose-free alignment architecture without the
    pose-free training machinery (no SDS, no augmentation)."""
    dataset_dir = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    if object_ids is None:
        object_ids = [o["object_id"] for o in manifest["objects"]]
    videos = {oid: load_posed_video(dataset_dir, oid) for oid in object_ids}
    perceptual_net = RandomFeatureExtractor()

    if resume is not None:
        state = load_checkpoint(resume)
    else:
        torch.manual_seed(seed)
        model = ReconstructionModel(cfg.model)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        state = TrainState(
            step=0,
            model=model,
            optimizer=optimizer,
            config=cfg,
            object_ids=list(object_ids),
            pseudo_sets={oid: PseudoViewSet() for oid in object_ids},
            np_rng=np.random.default_rng(seed),
            torch_gen=torch.Generator().manual_seed(seed + 1),
            mode="posed",
        )
    cfg = state.config
    metrics_fh = _metrics_writer(out_dir)

    while state.step < cfg.total_steps:
        s = state.step
        lr = learning_rate_at(s, cfg)
        for group in state.optimizer.param_groups:
            group["lr"] = lr

        batch = _pick_objects(state, cfg)
        total = torch.tensor(0.0)
        parts_sum = {"loss_mse": 0.0, "loss_perc": 0.0}
        for oid in batch:
            video = videos[oid]
            n_frames = video.frames.shape[0]
            order = (
                state.np_rng.permutation(n_frames)
                if shuffle_frames
                else np.arange(n_frames)
            )
            sub = np.sort(
                state.np_rng.choice(n_frames, size=min(cfg.frames_per_object_per_step, n_frames), replace=False)
            )
            tp = state.model(video.frames[order][sub])
            tgt_idx = state.np_rng.choice(
                n_frames, size=min(cfg.posed_views_per_step, n_frames), replace=False
            )
            poses = [video.poses[i] for i in tgt_idx]
            imgs = _render_poses(state.model, tp, poses, cfg,
                                 stratified=True, generator=state.torch_gen)
            targets = [video.frames[i] for i in tgt_idx]
            loss, parts = recon_loss(
                list(imgs), targets, [], cfg.lambda_perceptual, 1.0, perceptual_net
            )
            total = total + loss / len(batch)
            for k in parts_sum:
                parts_sum[k] += parts[k] / len(batch)

        if not torch.isfinite(total):
            raise RuntimeError(f"non-finite loss at step {s}: {total.item()}")
        state.optimizer.zero_grad()
        total.backward()
        state.optimizer.step()
        state.step += 1

        record = {"step": s, "lr": lr, "sds_grad_norm": 0.0, "beta": None, **parts_sum}
        if cfg.holdout_eval_interval and state.step % cfg.holdout_eval_interval == 0:
            record["psnr_holdout"] = _holdout_psnr(state, dataset_dir, videos)
        state.metric_history.append(record)
        _log(metrics_fh, record)
        if cfg.checkpoint_interval and out_dir is not None and state.step % cfg.checkpoint_interval == 0:
            save_checkpoint(state, Path(out_dir) / f"ckpt_{state.step:07d}.pt")

    if metrics_fh is not None:
        metrics_fh.close()
    if out_dir is not None:
        save_checkpoint(state, Path(out_dir) / "ckpt_final.pt")
    return state


def _holdout_psnr(state: TrainState, dataset_dir: Path, videos) -> float:
    from .evaluation import evaluate_holdout

    vals = []
    for oid in state.object_ids:
        tp, dec = reconstruct_object(state, dataset_dir, oid)
        m = evaluate_holdout(
            tp, dec, dataset_dir, oid,
            render_cfg=RenderConfig(samples_per_ray=state.config.samples_per_ray),
            orbit_radius=state.config.orbit_radius,
            gauge="true" if state.mode == "posed" else "reference",
        )
        vals.append(m["psnr"])
    return float(np.mean(vals))


def reconstruct(frames: torch.Tensor, state: TrainState) -> tuple[torch.Tensor, TriPlane]:
    """Single forward pass: encode, align, synthesize. No optimization."""
    state.model.eval()
    with torch.no_grad():
        feat = state.model.scene_feature(frames)
        tp = state.model.synthesizer(feat)
    state.model.train()
    return feat, tp


def reconstruct_object(state: TrainState, dataset_dir: Path, object_id: str):
    video = load_video(Path(dataset_dir), object_id)
    _, tp = reconstruct(video.frames, state)
    return tp, state.model.decoder


def _pseudo_to_payload(pseudo_sets: dict[str, PseudoViewSet]) -> dict:
    out = {}
    for oid, pvs in pseudo_sets.items():
        out[oid] = [
            {
                "image": v.image,
                "pose": v.pose.to_dict(),
                "created_at_step": v.created_at_step,
                "t_start_used": v.t_start_used,
                "generation": v.generation,
            }
            for v in pvs.views
        ]
    return out


def _pseudo_from_payload(payload: dict) -> dict[str, PseudoViewSet]:
    from .augmentation import PseudoView

    out = {}
    for oid, views in payload.items():
        pvs = PseudoViewSet()
        pvs.views = [
            PseudoView(
                image=v["image"],
                pose=OrbitPose.from_dict(v["pose"]),
                created_at_step=v["created_at_step"],
                t_start_used=v["t_start_used"],
                generation=v["generation"],
            )
            for v in views
        ]
        out[oid] = pvs
    return out


def save_checkpoint(state: TrainState, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "step": state.step,
            "mode": state.mode,
            "generation": state.generation,
            "model": state.model.state_dict(),
            "optimizer": state.optimizer.state_dict(),
            "config": state.config,
            "object_ids": state.object_ids,
            "pseudo": _pseudo_to_payload(state.pseudo_sets),
            "np_rng": state.np_rng.bit_generator.state,
            "torch_gen": state.torch_gen.get_state(),
            "metric_history": state.metric_history,
        },
        path,
    )


def load_checkpoint(path: Path) -> TrainState:
    payload = torch.load(Path(path), weights_only=False)
    cfg: TrainConfig = payload["config"]
    model = ReconstructionModel(cfg.model)
    model.load_state_dict(payload["model"])
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    optimizer.load_state_dict(payload["optimizer"])
    np_rng = np.random.default_rng()
    np_rng.bit_generator.state = payload["np_rng"]
    torch_gen = torch.Generator()
    torch_gen.set_state(payload["torch_gen"])
    return TrainState(
        step=payload["step"],
        model=model,
        optimizer=optimizer,
        config=cfg,
        object_ids=payload["object_ids"],
        pseudo_sets=_pseudo_from_payload(payload["pseudo"]),
        np_rng=np_rng,
        torch_gen=torch_gen,
        metric_history=payload["metric_history"],
        generation=payload["generation"],
        mode=payload["mode"],
    )
