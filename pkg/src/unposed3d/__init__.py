"""Pose-free 3D object reconstruction from unposed monocular videos."""

from .geometry import CameraFrame, OrbitPose, RayBundle, generate_rays, pose_to_camera, sample_orbit_poses
from .model import ModelConfig, ReconstructionModel, desk_config, full_scale_config, tiny_config
from .triplane import RadianceDecoder, RenderConfig, TriPlane, export_mesh, query_features, render

__all__ = [
    "CameraFrame",
    "ModelConfig",
    "OrbitPose",
    "RadianceDecoder",
    "RayBundle",
    "ReconstructionModel",
    "RenderConfig",
    "TriPlane",
    "desk_config",
    "export_mesh",
    "generate_rays",
    "full_scale_config",
    "pose_to_camera",
    "query_features",
    "render",
    "sample_orbit_poses",
    "tiny_config",
]

__version__ = "0.1.0"
