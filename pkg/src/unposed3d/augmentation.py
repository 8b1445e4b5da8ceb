"""Analysis-by-synthesis pseudo-view generation and the training schedules
driving it: denoising timestep decay, SDS weight growth, and the growing
per-generation view counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import DenoiserInterface, NoiseSchedule, add_noise, denoise_to_image
from .geometry import DEFAULT_RADIUS, OrbitPose, sample_orbit_poses


@dataclass
class PseudoView:
    image: torch.Tensor  # (H, W, 3) in [0, 1]
    pose: OrbitPose
    created_at_step: int
    t_start_used: int
    generation: int


@dataclass
class AugmentationSchedule:
    interval_steps: int = 6000
    k0: int = 6
    k_increment: int = 5
    t_floor_fraction: float = 0.2
    theta_aug: float = 0.0  # pseudo-views are sampled on the equator
    replace_old: bool = False  # ablation switch; default accumulates

    def __post_init__(self):
        if self.interval_steps < 1 or self.k0 < 1:
            raise ValueError("interval_steps and k0 must be >= 1")
        if not 0 < self.t_floor_fraction <= 1:
            raise ValueError("t_floor_fraction must be in (0, 1]")

    def views_for_generation(self, generation: int) -> int:
        return self.k0 + generation * self.k_increment


class PseudoViewSet:
    """Append-only buffer of pseudo-views across augmentation generations."""

    def __init__(self):
        self.views: list[PseudoView] = []

    def __len__(self) -> int:
        return len(self.views)

    def extend(self, views: list[PseudoView], replace_old: bool = False) -> None:
        if replace_old:
            self.views = []
        self.views.extend(views)


def timestep_schedule(s_curr: int, s_total: int, t_max: int, floor: float = 0.2) -> int:
    """Denoising timestep decay: floor(max(1 - s/S, floor) * t_max)."""
    if s_total <= 0:
        raise ValueError("s_total must be > 0")
    if not 0 <= s_curr <= s_total:
        raise ValueError("need 0 <= s_curr <= s_total")
    return int(max(1.0 - s_curr / s_total, floor) * t_max)


def beta_schedule(
    s_curr: int, s_total: int, beta_start: float = 1.0, beta_end: float = 25000.0
) -> float:
    """SDS loss divisor, linearly increased over training."""
    if s_total <= 0:
        raise ValueError("s_total must be > 0")
    if not 0 <= s_curr <= s_total:
        raise ValueError("need 0 <= s_curr <= s_total")
    return beta_start + (beta_end - beta_start) * (s_curr / s_total)


def denoise_steps_for(t: int) -> int:
    """Reverse-process stride count tied to the timestep: fewer steps as
    renders converge."""
    return max(1, t // 50)


def synthesize_pseudo_views(
    render_at_pose,
    ref: torch.Tensor,
    den: DenoiserInterface,
    sched: NoiseSchedule,
    aug: AugmentationSchedule,
    s_curr: int,
    s_total: int,
    generation: int,
    rng: np.random.Generator,
    generator: torch.Generator | None = None,
    radius: float = DEFAULT_RADIUS,
) -> list[PseudoView]:
    """Render, noise, and conditionally denoise a new generation of views.

    ``render_at_pose`` is the current model's forward render (pose -> image).
    At the very start of training the schedule puts t at t_max, so the
    rendered content is fully noised away and the outputs are purely
    prior-generated conditional imagery.
    """
    if generation < 0:
        raise ValueError("generation must be >= 0")
    k = aug.views_for_generation(generation)
    poses = sample_orbit_poses(k, radius, aug.theta_aug, rng)
    t = timestep_schedule(s_curr, s_total, sched.t_max, aug.t_floor_fraction)
    t = max(t, 1)
    steps = denoise_steps_for(t)
    out = []
    for pose in poses:
        with torch.no_grad():
            rendered = render_at_pose(pose)
        eps = torch.empty_like(rendered).normal_(generator=generator)
        noised = add_noise(rendered, t, eps, sched)
        image = denoise_to_image(noised, t, ref, pose, den, sched, steps)
        out.append(
            PseudoView(
                image=image.clamp(0.0, 1.0),
                pose=pose,
                created_at_step=s_curr,
                t_start_used=t,
                generation=generation,
            )
        )
    return out
