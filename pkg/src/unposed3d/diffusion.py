"""Conditional denoising prior: noise schedule, forward noising, score
distillation gradients, and deterministic multi-step conditional denoising.

The prior operates directly in image space. Pose conditioning is relative:
the target pose is expressed in the canonical frame in which the reference
view sits at azimuth 0 (the azimuth gauge used throughout evaluation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn

from .data import generate_scene, load_manifest, object_poses, render_ground_truth
from .geometry import OrbitPose


@dataclass
class NoiseSchedule:
    """Cumulative signal-retention table alpha_bar[0..T_max]."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if abs(ab[0] - 1.0) > 1e-12:
            raise ValueError("alpha_bar[0] must be 1")
        if np.any(np.diff(ab) > 1e-12):
            raise ValueError("alpha_bar must be nonincreasing")
        if not 0 < ab[-1] < 0.01:
            raise ValueError("alpha_bar[T_max] must be in (0, 0.01)")
        self.alpha_bar = ab

    @property
    def t_max(self) -> int:
        return len(self.alpha_bar) - 1

    @staticmethod
    def cosine(t_max: int = 1000, s: float = 0.008) -> "NoiseSchedule":
        t = np.arange(t_max + 1) / t_max
        f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
        ab = np.clip(f / f[0], 1e-5, 1.0)
        ab[0] = 1.0
        return NoiseSchedule(np.minimum.accumulate(ab))


class DenoiserInterface(Protocol):
    """Conditional noise predictor: (x_t, t, ref, rel_pose) -> eps_hat."""

    def __call__(
        self, x_t: torch.Tensor, t: int, ref: torch.Tensor, rel_pose: OrbitPose
    ) -> torch.Tensor: ...


def add_noise(
    x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Forward process: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if not 0 <= t <= sched.t_max:
        raise ValueError(f"t must be in [0, {sched.t_max}], got {t}")
    if eps.shape != x0.shape:
        raise ValueError("eps shape must match x0")
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def sds_weight(t: int, sched: NoiseSchedule, mode: str = "one_minus_alpha_bar") -> float:
    if mode == "one_minus_alpha_bar":
        return float(1.0 - sched.alpha_bar[t])
    if mode == "constant":
        return 1.0
    raise ValueError(f"unknown weighting mode {mode!r}")


def sds_gradient(
    rendered: torch.Tensor,
    ref: torch.Tensor,
    rel_pose: OrbitPose,
    t: int,
    den: DenoiserInterface,
    sched: NoiseSchedule,
    weight_mode: str = "one_minus_alpha_bar",
    eps: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Score-distillation gradient w(t) * (eps_hat - eps) at the rendered image.

    The caller injects this into backpropagation at the render; the denoiser
    is never differentiated through.
    """
    if not 1 <= t <= sched.t_max:
        raise ValueError(f"t must be in [1, {sched.t_max}], got {t}")
    x0 = rendered.detach()
    if eps is None:
        eps = torch.empty_like(x0).normal_(generator=generator)
    x_t = add_noise(x0, t, eps, sched)
    with torch.no_grad():
        eps_hat = den(x_t, t, ref, rel_pose)
    return sds_weight(t, sched, weight_mode) * (eps_hat - eps)


def denoise_to_image(
    x_t: torch.Tensor,
    t_start: int,
    ref: torch.Tensor,
    rel_pose: OrbitPose,
    den: DenoiserInterface,
    sched: NoiseSchedule,
    steps: int,
) -> torch.Tensor:
    """Deterministic (ODE-style) reverse process from t_start down to 0.

    Each stride forms the one-step x0 estimate and re-projects it to the
    next timestep; the result is clamped to [0, 1].
    """
    if t_start == 0:
        return x_t
    if not 1 <= steps <= t_start:
        raise ValueError(f"need 1 <= steps <= t_start, got steps={steps}, t_start={t_start}")
    timesteps = np.linspace(t_start, 0, steps + 1).round().astype(int)
    x = x_t
    for tau, tau_next in zip(timesteps[:-1], timesteps[1:]):
        tau = int(tau)
        with torch.no_grad():
            eps_hat = den(x, tau, ref, rel_pose)
        ab = sched.alpha_bar[tau]
        x0_hat = (x - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
        if tau_next == 0:
            x = x0_hat
        else:
            ab_next = sched.alpha_bar[int(tau_next)]
            x = math.sqrt(ab_next) * x0_hat + math.sqrt(1.0 - ab_next) * eps_hat
    return x.clamp(0.0, 1.0)


class OracleDenoiser:
    """Ground-truth-backed prior for one object of a synthetic dataset.

    Predicts exactly the noise that makes the one-step x0 estimate equal the
    true view at the conditioned pose. Ground truth is regenerated from the
    manifest seeds, never read from eval sidecars; poses stay inside the
    prior and are never exposed to the reconstruction model.
    """

    def __init__(self, scene, ref_pose: OrbitPose, resolution: int, sched: NoiseSchedule,
                 samples_per_ray: int = 48):
        self.scene = scene
        self.ref_pose = ref_pose
        self.resolution = resolution
        self.sched = sched
        self.samples_per_ray = samples_per_ray
        self._cache: dict[tuple, torch.Tensor] = {}

    @staticmethod
    def for_object(dataset_dir: Path, object_id: str, sched: NoiseSchedule) -> "OracleDenoiser":
        manifest = load_manifest(dataset_dir)
        entry = next(o for o in manifest["objects"] if o["object_id"] == object_id)
        scene = generate_scene(entry["scene_seed"])
        frame_poses, _ = object_poses(
            entry["pose_seed"],
            manifest["frames_per_object"],
            manifest["holdout_per_object"],
            manifest["orbit"]["radius"],
            manifest["orbit"]["theta"],
        )
        return OracleDenoiser(scene, frame_poses[0], manifest["resolution"], sched)

    def ground_truth_view(self, rel_pose: OrbitPose) -> torch.Tensor:
        true_pose = OrbitPose(
            radius=rel_pose.radius,
            azimuth=rel_pose.azimuth + self.ref_pose.azimuth,
            polar=rel_pose.polar,
        )
        key = (round(true_pose.radius, 6), round(true_pose.azimuth, 6), round(true_pose.polar, 6))
        if key not in self._cache:
            if len(self._cache) > 256:
                self._cache.clear()
            self._cache[key] = render_ground_truth(
                self.scene, true_pose, self.resolution, self.samples_per_ray
            )
        return self._cache[key]

    def __call__(
        self, x_t: torch.Tensor, t: int, ref: torch.Tensor, rel_pose: OrbitPose
    ) -> torch.Tensor:
        ab = self.sched.alpha_bar[t]
        gt = self.ground_truth_view(rel_pose).to(x_t.dtype)
        return (x_t - math.sqrt(ab) * gt) / math.sqrt(1.0 - ab)


def _timestep_embedding(t: int, dim: int, t_max: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half) / half)
    angles = (t / t_max) * 1000.0 * freqs
    return torch.cat([angles.sin(), angles.cos()])


def _pose_embedding(pose: OrbitPose) -> torch.Tensor:
    return torch.tensor(
        [
            math.sin(pose.azimuth),
            math.cos(pose.azimuth),
            math.sin(pose.polar),
            math.cos(pose.polar),
            pose.radius,
        ],
        dtype=torch.float32,
    )


class _FiLMBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, cond_dim: int, down: bool = False):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2 if down else 1, padding=1)
        self.norm = nn.GroupNorm(min(8, c_out), c_out)
        self.film = nn.Linear(cond_dim, 2 * c_out)
        self.act = nn.SiLU()

    def forward(self, x, cond):
        h = self.norm(self.conv(x))
        scale, shift = self.film(cond).chunk(2, dim=-1)
        h = h * (1 + scale.view(1, -1, 1, 1)) + shift.view(1, -1, 1, 1)
        return self.act(h)


class ToyDenoiser(nn.Module):
    """Small U-shaped conditional denoiser.

    Conditioned on the reference image (channel-concatenated), a sinusoidal
    timestep embedding, and a relative-pose embedding via FiLM layers. The
    network regresses the clean image directly and converts to a noise
    prediction at the interface; for a model this small the clean-image
    parameterization stays numerically stable at high noise levels, where a
    noise-prediction head would have its errors amplified by 1/sqrt(ab_t)
    when forming the denoised estimate.
    """

    def __init__(self, base: int = 32, cond_dim: int = 64, t_max: int = 1000):
        super().__init__()
        self.t_max = t_max
        self.sched = NoiseSchedule.cosine(t_max)
        self.cond_mlp = nn.Sequential(
            nn.Linear(32 + 5, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim)
        )
        c = base
        self.enc1 = _FiLMBlock(6, c, cond_dim)
        self.enc2 = _FiLMBlock(c, 2 * c, cond_dim, down=True)
        self.mid = _FiLMBlock(2 * c, 2 * c, cond_dim, down=True)
        self.dec2 = _FiLMBlock(4 * c, 2 * c, cond_dim)
        self.dec1 = _FiLMBlock(3 * c, c, cond_dim)
        self.out = nn.Conv2d(c, 3, 3, padding=1)

    def predict_x0(
        self, x_t: torch.Tensor, t: int, ref: torch.Tensor, rel_pose: OrbitPose
    ) -> torch.Tensor:
        cond = self.cond_mlp(
            torch.cat([_timestep_embedding(t, 32, self.t_max), _pose_embedding(rel_pose)])
        )
        up = lambda z: nn.functional.interpolate(z, scale_factor=2, mode="nearest")
        x = torch.cat([x_t, ref], dim=-1).permute(2, 0, 1).unsqueeze(0)
        e1 = self.enc1(x, cond)
        e2 = self.enc2(e1, cond)
        m = self.mid(e2, cond)
        d2 = self.dec2(torch.cat([up(m), e2], dim=1), cond)
        d1 = self.dec1(torch.cat([up(d2), e1], dim=1), cond)
        return self.out(d1).squeeze(0).permute(1, 2, 0)

    def forward(
        self, x_t: torch.Tensor, t: int, ref: torch.Tensor, rel_pose: OrbitPose
    ) -> torch.Tensor:
        ab = self.sched.alpha_bar[t]
        x0_hat = self.predict_x0(x_t, t, ref, rel_pose)
        return (x_t - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)


def train_toy_denoiser(
    dataset_dir: Path,
    steps: int = 2000,
    lr: float = 2e-4,
    views_per_object: int = 24,
    seed: int = 0,
    sched: NoiseSchedule | None = None,
    base: int = 32,
) -> ToyDenoiser:
    """Fit a ToyDenoiser on ground-truth views regenerated from the manifest.

    Targets use canonical (reference-azimuth-relative) pose conditioning,
    matching how the prior is later queried during reconstruction training.
    """
    sched = sched or NoiseSchedule.cosine()
    manifest = load_manifest(dataset_dir)
    resolution = manifest["resolution"]
    rng = np.random.default_rng(seed)
    torch_gen = torch.Generator().manual_seed(seed)

    pools = []  # per object: (ref image, list of (rel_pose, gt view))
    for entry in manifest["objects"]:
        scene = generate_scene(entry["scene_seed"])
        frame_poses, _ = object_poses(
            entry["pose_seed"],
            manifest["frames_per_object"],
            manifest["holdout_per_object"],
            manifest["orbit"]["radius"],
            manifest["orbit"]["theta"],
        )
        ref_pose = frame_poses[0]
        ref = render_ground_truth(scene, ref_pose, resolution)
        views = []
        for _ in range(views_per_object):
            rel = OrbitPose(
                radius=ref_pose.radius,
                azimuth=rng.uniform(0, 2 * math.pi),
                polar=rng.uniform(-manifest["orbit"]["theta"], manifest["orbit"]["theta"])
                if manifest["orbit"]["theta"] > 0 else 0.0,
            )
            true = OrbitPose(rel.radius, rel.azimuth + ref_pose.azimuth, rel.polar)
            views.append((rel, render_ground_truth(scene, true, resolution)))
        pools.append((ref, views))

    torch.manual_seed(seed)
    model = ToyDenoiser(base=base, t_max=sched.t_max)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for _ in range(steps):
        ref, views = pools[rng.integers(0, len(pools))]
        rel, gt = views[rng.integers(0, len(views))]
        t = int(rng.integers(1, sched.t_max + 1))
        eps = torch.empty_like(gt).normal_(generator=torch_gen)
        x_t = add_noise(gt, t, eps, sched)
        pred = model.predict_x0(x_t, t, ref, rel)
        loss = torch.mean((pred - gt) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model
