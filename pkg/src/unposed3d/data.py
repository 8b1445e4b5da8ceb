"""Procedural ground-truth scenes and the on-disk dataset format.

Scenes are unions of soft-shell SDF primitives rendered with the same
quadrature as the tri-plane renderer. Training-visible files (frames,
manifest) carry no pose records; explicit poses live only in per-object
eval sidecar files that the trainer never opens.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import (
    DEFAULT_RADIUS,
    TWO_PI,
    OrbitPose,
    default_focal,
    generate_rays,
    pose_to_camera,
)
from .triplane import RenderConfig, render_field

PRIMITIVE_KINDS = ("sphere", "box", "torus", "capsule")


@dataclass
class Primitive:
    kind: str
    center: np.ndarray  # (3,)
    size: np.ndarray  # kind-specific parameters
    albedo: np.ndarray  # (3,)
    edge: float = 0.03  # soft-shell width

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        """Signed distance for points (n, 3)."""
        q = p - torch.as_tensor(self.center, dtype=p.dtype)
        s = self.size
        if self.kind == "sphere":
            return q.norm(dim=-1) - s[0]
        if self.kind == "box":
            half = torch.as_tensor(s[:3], dtype=p.dtype)
            d = q.abs() - half
            outside = d.clamp(min=0).norm(dim=-1)
            inside = d.max(dim=-1).values.clamp(max=0)
            return outside + inside
        if self.kind == "torus":
            ring = torch.stack([q[:, :2].norm(dim=-1) - s[0], q[:, 2]], dim=-1)
            return ring.norm(dim=-1) - s[1]
        if self.kind == "capsule":
            # vertical segment of half-height s[1], radius s[0]
            z = q[:, 2].clamp(-s[1], s[1])
            seg = q - torch.stack([torch.zeros_like(z), torch.zeros_like(z), z], dim=-1)
            return seg.norm(dim=-1) - s[0]
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def bounding_radius(self) -> float:
        s = self.size
        if self.kind == "sphere":
            extra = s[0]
        elif self.kind == "box":
            extra = float(np.linalg.norm(s[:3]))
        elif self.kind == "torus":
            extra = s[0] + s[1]
        else:
            extra = s[0] + s[1]
        return float(np.linalg.norm(self.center)) + extra

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "center": self.center.tolist(),
            "size": self.size.tolist(),
            "albedo": self.albedo.tolist(),
            "edge": self.edge,
        }

    @staticmethod
    def from_dict(d: dict) -> "Primitive":
        return Primitive(
            kind=d["kind"],
            center=np.asarray(d["center"], dtype=np.float64),
            size=np.asarray(d["size"], dtype=np.float64),
            albedo=np.asarray(d["albedo"], dtype=np.float64),
            edge=d["edge"],
        )


@dataclass
class SceneSpec:
    seed: int
    primitives: list[Primitive]
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    density_max: float = 60.0

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")

    def field(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Radiance field callable: points (..., 3) -> (rgb, sigma)."""
        shape = points.shape[:-1]
        p = points.reshape(-1, 3)
        sdfs = torch.stack([prim.sdf(p) for prim in self.primitives], dim=0)
        edges = torch.tensor([prim.edge for prim in self.primitives], dtype=p.dtype)
        occ = torch.sigmoid(-sdfs / edges.view(-1, 1))
        sigma = self.density_max * occ.max(dim=0).values
        nearest = sdfs.argmin(dim=0)
        albedos = torch.tensor(
            np.stack([prim.albedo for prim in self.primitives]), dtype=p.dtype
        )
        rgb = albedos[nearest] * self._shade(p).unsqueeze(-1)
        return rgb.reshape(*shape, 3), sigma.reshape(shape)

    def _shade(self, p: torch.Tensor, h: float = 1e-3) -> torch.Tensor:
        # lambert-style factor from the numeric SDF normal, light from +z;
        # keeps azimuthal symmetry for rotationally symmetric scenes
        def combined(q):
            return torch.stack([prim.sdf(q) for prim in self.primitives]).min(dim=0).values

        grad = torch.stack(
            [
                combined(p + h * torch.eye(3, dtype=p.dtype)[i]) -
                combined(p - h * torch.eye(3, dtype=p.dtype)[i])
                for i in range(3)
            ],
            dim=-1,
        )
        n = grad / (grad.norm(dim=-1, keepdim=True) + 1e-9)
        return 0.65 + 0.35 * n[:, 2].clamp(min=0.0)


def generate_scene(seed: int) -> SceneSpec:
    """Deterministic random scene: 1-5 primitives inside the unit sphere."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    prims = []
    for _ in range(n):
        kind = PRIMITIVE_KINDS[rng.integers(0, len(PRIMITIVE_KINDS))]
        # offset clusters produce non-symmetric layouts
        center = rng.uniform(-0.45, 0.45, size=3)
        scale = rng.uniform(0.15, 0.35)
        if kind == "sphere":
            size = np.array([scale])
        elif kind == "box":
            size = rng.uniform(0.1, 0.3, size=3)
        elif kind == "torus":
            size = np.array([scale, scale * rng.uniform(0.25, 0.45)])
        else:  # capsule
            size = np.array([scale * 0.6, scale])
        albedo = rng.uniform(0.1, 0.9, size=3)
        prim = Primitive(
            kind=kind, center=center, size=size, albedo=albedo,
            edge=float(rng.uniform(0.02, 0.04)),
        )
        # shrink until the primitive fits inside the unit sphere
        while prim.bounding_radius() > 1.0:
            prim.center *= 0.8
            prim.size = prim.size * 0.8
        prims.append(prim)
    return SceneSpec(seed=seed, primitives=prims)


def render_ground_truth(
    scene: SceneSpec,
    pose: OrbitPose,
    resolution: int,
    samples_per_ray: int = 48,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Analytic reference render (H, W, 3) in [0, 1]."""
    cam = pose_to_camera(pose, focal=default_focal(resolution, pose.radius), resolution=resolution)
    rays = generate_rays(cam, dtype=dtype)
    cfg = RenderConfig(samples_per_ray=samples_per_ray, background=scene.background)
    img = render_field(scene.field, rays, cfg)
    return img.clamp(0.0, 1.0).reshape(resolution, resolution, 3)


@dataclass
class UnposedVideo:
    """Ordered frames of one object. Deliberately carries no pose fields."""

    object_id: str
    frames: torch.Tensor  # (n, H, W, 3) in [0, 1]

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError("need at least one (H, W, 3) frame")


@dataclass
class PosedVideo:
    object_id: str
    frames: torch.Tensor
    poses: list[OrbitPose]

    def __post_init__(self):
        if len(self.poses) != self.frames.shape[0]:
            raise ValueError("frame/pose count mismatch")


@dataclass
class EvalSidecar:
    object_id: str
    frame_poses: list[OrbitPose]
    holdout_poses: list[OrbitPose]
    holdout_files: list[str]

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "frame_poses": [p.to_dict() for p in self.frame_poses],
            "holdout_poses": [p.to_dict() for p in self.holdout_poses],
            "holdout_files": self.holdout_files,
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalSidecar":
        return EvalSidecar(
            object_id=d["object_id"],
            frame_poses=[OrbitPose.from_dict(p) for p in d["frame_poses"]],
            holdout_poses=[OrbitPose.from_dict(p) for p in d["holdout_poses"]],
            holdout_files=d["holdout_files"],
        )


def object_poses(
    pose_seed: int,
    n_frames: int,
    n_holdout: int,
    radius: float = DEFAULT_RADIUS,
    theta: float = math.pi / 18,
) -> tuple[list[OrbitPose], list[OrbitPose]]:
    """Deterministic per-object pose trajectory with a random global azimuth
    offset, so absolute orientation is unrecoverable from frame order."""
    rng = np.random.default_rng(pose_seed)
    offset = rng.uniform(0.0, TWO_PI)
    frame_polars = rng.uniform(-theta, theta, size=n_frames) if theta > 0 else np.zeros(n_frames)
    frames = [
        OrbitPose(radius, offset + TWO_PI * i / n_frames, float(frame_polars[i]))
        for i in range(n_frames)
    ]
    hold_az = rng.uniform(0.0, TWO_PI, size=n_holdout)
    hold_polars = rng.uniform(-theta, theta, size=n_holdout) if theta > 0 else np.zeros(n_holdout)
    holdout = [
        OrbitPose(radius, float(hold_az[i]), float(hold_polars[i])) for i in range(n_holdout)
    ]
    return frames, holdout


def save_image(img: torch.Tensor, path: Path) -> None:
    """8-bit PNG, written atomically (temp + rename)."""
    arr = (img.detach().clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    tmp = path.with_suffix(".tmp.png")
    Image.fromarray(arr).save(tmp, format="PNG")
    os.replace(tmp, path)


def load_image(path: Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def build_dataset(
    n_objects: int,
    out_dir: Path,
    frames_per_object: int = 40,
    holdout_per_object: int = 8,
    resolution: int = 64,
    radius: float = DEFAULT_RADIUS,
    theta: float = math.pi / 18,
    seed: int = 0,
) -> dict:
    """Write the dataset tree and return the manifest.

    Layout: ``<out>/<object_id>/frames/NNN.png``, per-object
    ``eval_sidecar.json`` + ``holdout/NNN.png``, and a top-level
    ``manifest.json``. Scene and pose generation are fully determined by the
    seeds recorded in the manifest.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(seed)
    objects = []
    for idx in range(n_objects):
        object_id = f"obj_{idx:04d}"
        scene_seed = int(master.integers(0, 2**31 - 1))
        pose_seed = int(master.integers(0, 2**31 - 1))
        scene = generate_scene(scene_seed)
        frame_poses, holdout_poses = object_poses(
            pose_seed, frames_per_object, holdout_per_object, radius, theta
        )
        obj_dir = out_dir / object_id
        (obj_dir / "frames").mkdir(parents=True, exist_ok=True)
        (obj_dir / "holdout").mkdir(parents=True, exist_ok=True)
        for i, pose in enumerate(frame_poses):
            save_image(render_ground_truth(scene, pose, resolution), obj_dir / "frames" / f"{i:03d}.png")
        holdout_files = []
        for i, pose in enumerate(holdout_poses):
            rel = f"holdout/{i:03d}.png"
            save_image(render_ground_truth(scene, pose, resolution), obj_dir / rel)
            holdout_files.append(rel)
        sidecar = EvalSidecar(object_id, frame_poses, holdout_poses, holdout_files)
        _write_json(obj_dir / "eval_sidecar.json", sidecar.to_dict())
        objects.append(
            {"object_id": object_id, "scene_seed": scene_seed, "pose_seed": pose_seed}
        )
    manifest = {
        "seed": seed,
        "resolution": resolution,
        "frames_per_object": frames_per_object,
        "holdout_per_object": holdout_per_object,
        "orbit": {"radius": radius, "theta": theta},
        "objects": objects,
    }
    _write_json(out_dir / "manifest.json", manifest)
    return manifest


def _write_json(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(".tmp.json")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2)
    os.replace(tmp, path)


def load_manifest(dataset_dir: Path) -> dict:
    with open(Path(dataset_dir) / "manifest.json") as fh:
        return json.load(fh)


def load_video(dataset_dir: Path, object_id: str) -> UnposedVideo:
    frames_dir = Path(dataset_dir) / object_id / "frames"
    files = sorted(frames_dir.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no frames under {frames_dir}")
    frames = torch.stack([load_image(f) for f in files])
    return UnposedVideo(object_id=object_id, frames=frames)


def load_sidecar(dataset_dir: Path, object_id: str) -> EvalSidecar:
    path = Path(dataset_dir) / object_id / "eval_sidecar.json"
    if not path.exists():
        raise ValueError(f"missing eval sidecar for {object_id}")
    with open(path) as fh:
        return EvalSidecar.from_dict(json.load(fh))


def load_posed_video(dataset_dir: Path, object_id: str) -> PosedVideo:
    """Frames plus ground-truth poses; only the posed ablation may use this."""
    video = load_video(dataset_dir, object_id)
    sidecar = load_sidecar(dataset_dir, object_id)
    return PosedVideo(object_id=object_id, frames=video.frames, poses=sidecar.frame_poses)


def load_holdout(dataset_dir: Path, object_id: str) -> tuple[list[OrbitPose], torch.Tensor]:
    sidecar = load_sidecar(dataset_dir, object_id)
    imgs = torch.stack(
        [load_image(Path(dataset_dir) / object_id / f) for f in sidecar.holdout_files]
    )
    return sidecar.holdout_poses, imgs
