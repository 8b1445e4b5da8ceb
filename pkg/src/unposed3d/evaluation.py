"""Metrics, the azimuth-gauge alignment protocol for pose-free
reconstructions, and the ablation report generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from skimage.metrics import structural_similarity

from .data import EvalSidecar, load_holdout, load_sidecar
from .geometry import DEFAULT_RADIUS, OrbitPose, default_focal, pose_to_camera
from .triplane import RadianceDecoder, RenderConfig, TriPlane, render

PSNR_CAP = 99.0


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """10 * log10(1 / MSE) on unit-range images, capped at 99 dB."""
    _check_pair(a, b)
    mse = torch.mean((a - b) ** 2).item()
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """SSIM with an 11x11 Gaussian window and standard constants."""
    _check_pair(a, b)
    return float(
        structural_similarity(
            a.detach().numpy(),
            b.detach().numpy(),
            channel_axis=2,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
        )
    )


class RandomFeatureExtractor(nn.Module):
    """Fixed randomly-initialized conv stack used as a perceptual proxy.

    A pluggable stand-in for a pretrained perceptual network; the weights are
    frozen and seeded, so the induced distance is deterministic.
    """

    def __init__(self, seed: int = 1234, width: int = 24):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(3, width, 3, stride=2, padding=1),
                nn.Conv2d(width, width, 3, stride=2, padding=1),
                nn.Conv2d(width, width, 3, stride=2, padding=1),
            ]
        )
        for conv in self.convs:
            nn.init.normal_(conv.weight, std=0.2, generator=gen)
            nn.init.zeros_(conv.bias)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        x = img.permute(2, 0, 1).unsqueeze(0)
        out = []
        for conv in self.convs:
            x = torch.tanh(conv(x))
            out.append(x)
        return out

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        _check_pair(a, b)
        fa, fb = self.features(a), self.features(b)
        return sum(torch.mean((x - y) ** 2) for x, y in zip(fa, fb))


_default_extractor: RandomFeatureExtractor | None = None


def perceptual(a: torch.Tensor, b: torch.Tensor) -> float:
    global _default_extractor
    if _default_extractor is None:
        _default_extractor = RandomFeatureExtractor()
    return float(_default_extractor.distance(a, b).item())


def align_to_reference(
    sidecar: EvalSidecar,
    p0: OrbitPose | None = None,
    orbit_radius: float = DEFAULT_RADIUS,
) -> list[OrbitPose]:
    """Map held-out ground-truth poses into the reconstruction frame.

    The reference frame (frame 0) is pinned to ``p0``; every other pose is
    carried over by its azimuth relative to the reference, removing the
    global azimuth gauge. Radii are rescaled to the training orbit radius.
    """
    if not sidecar.frame_poses:
        raise ValueError("sidecar carries no frame poses")
    if p0 is None:
        p0 = OrbitPose(radius=orbit_radius, azimuth=0.0, polar=sidecar.frame_poses[0].polar)
    ref = sidecar.frame_poses[0]
    out = []
    for pose in sidecar.holdout_poses:
        out.append(
            OrbitPose(
                radius=orbit_radius * (pose.radius / ref.radius),
                azimuth=pose.azimuth - ref.azimuth + p0.azimuth,
                polar=pose.polar - ref.polar + p0.polar,
            )
        )
    return out


@dataclass
class EvalReport:
    per_object: dict
    aggregate: dict
    config_echo: dict = field(default_factory=dict)
    ablation_tag: str = "full"

    def to_json(self) -> str:
        return json.dumps(
            {
                "ablation_tag": self.ablation_tag,
                "aggregate": self.aggregate,
                "per_object": self.per_object,
                "config_echo": self.config_echo,
            },
            indent=2,
            sort_keys=True,
        )


def evaluate_holdout(
    tp: TriPlane,
    dec: RadianceDecoder,
    dataset_dir: Path,
    object_id: str,
    render_cfg: RenderConfig | None = None,
    resolution: int | None = None,
    orbit_radius: float = DEFAULT_RADIUS,
    return_views: bool = False,
    gauge: str = "reference",
):
    """Aligned held-out metrics {psnr, ssim, perceptual} for one object.

    ``gauge`` selects the evaluation frame: "reference" pins the reference
    view to azimuth 0 (the canonical frame a pose-free model is trained in),
    while "true" keeps the ground-truth poses (for pose-aware models, which
    carry no gauge ambiguity; alignment then reduces to the identity).
    """
    sidecar = load_sidecar(dataset_dir, object_id)
    _, gt_images = load_holdout(dataset_dir, object_id)
    if resolution is None:
        resolution = gt_images.shape[1]
    render_cfg = render_cfg or RenderConfig()
    if gauge == "true":
        p0 = sidecar.frame_poses[0]
    elif gauge == "reference":
        p0 = None
    else:
        raise ValueError(f"unknown gauge {gauge!r}")
    cameras = [
        pose_to_camera(p, default_focal(resolution, p.radius), resolution)
        for p in align_to_reference(sidecar, p0=p0, orbit_radius=orbit_radius)
    ]
    scores = {"psnr": [], "ssim": [], "perceptual": []}
    views = []
    with torch.no_grad():
        for cam, gt in zip(cameras, gt_images):
            img = render(tp, dec, cam, render_cfg).clamp(0, 1)
            views.append(img)
            scores["psnr"].append(psnr(img, gt))
            scores["ssim"].append(ssim(img, gt))
            scores["perceptual"].append(perceptual(img, gt))
    metrics = {k: float(np.mean(v)) for k, v in scores.items()}
    metrics["psnr_per_view"] = [float(x) for x in scores["psnr"]]
    if return_views:
        return metrics, views
    return metrics


def aggregate_report(per_object: dict, tag: str, config_echo: dict | None = None) -> EvalReport:
    agg = {
        k: float(np.mean([m[k] for m in per_object.values()]))
        for k in ("psnr", "ssim", "perceptual")
    }
    return EvalReport(
        per_object=per_object, aggregate=agg, ablation_tag=tag,
        config_echo=config_echo or {},
    )


def run_ablation_suite(dataset_dir: Path, cfgs: dict, prior_kind: str = "toy",
                       seeds: tuple[int, ...] = (0,), prior=None) -> dict:
    """Train and evaluate the ablation variants on a shared dataset/budget.

    ``cfgs`` maps variant tag (full | no_weak | no_aug) to a TrainConfig.
    Returns {tag: [EvalReport per seed]}.
    """
    from . import training  # deferred: training depends on this module

    reports: dict[str, list[EvalReport]] = {tag: [] for tag in cfgs}
    manifest = None
    for seed in seeds:
        for tag, cfg in cfgs.items():
            state = training.train_pose_free(
                dataset_dir, cfg, seed=seed, prior_kind=prior_kind, prior=prior
            )
            per_object = {}
            for object_id in state.object_ids:
                tp, dec = training.reconstruct_object(state, dataset_dir, object_id)
                per_object[object_id] = evaluate_holdout(
                    tp, dec, dataset_dir, object_id,
                    render_cfg=RenderConfig(samples_per_ray=cfg.samples_per_ray),
                    orbit_radius=cfg.orbit_radius,
                )
            reports[tag].append(
                aggregate_report(per_object, tag, config_echo={"seed": seed})
            )
    return reports
