import copy
import json
import math

import numpy as np
import pytest
import torch

from unposed3d.data import load_sidecar
from unposed3d.evaluation import (
    EvalReport,
    RandomFeatureExtractor,
    aggregate_report,
    align_to_reference,
    perceptual,
    psnr,
    ssim,
)
from unposed3d.geometry import OrbitPose


class TestPsnr:
    def test_identical_capped(self):
        img = torch.rand(16, 16, 3)
        assert psnr(img, img) == 99.0

    def test_formula(self):
        # MSE 0.01 on unit-range images -> 20 dB
        a = torch.zeros(8, 8, 3)
        b = torch.full((8, 8, 3), 0.1, dtype=torch.float64)
        assert psnr(a.double(), b) == pytest.approx(20.0, abs=1e-6)

    def test_symmetric(self):
        a, b = torch.rand(8, 8, 3), torch.rand(8, 8, 3)
        assert psnr(a, b) == pytest.approx(psnr(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(torch.rand(8, 8, 3), torch.rand(4, 4, 3))


class TestSsim:
    def test_identical_is_one(self):
        img = torch.rand(32, 32, 3)
        assert ssim(img, img) == pytest.approx(1.0)

    def test_anticorrelated_checkerboard_negative(self):
        idx = torch.arange(32)
        board = ((idx[:, None] + idx[None, :]) % 2).float()
        a = board.unsqueeze(-1).expand(32, 32, 3).contiguous()
        assert ssim(a, 1.0 - a) < 0.0

    def test_symmetric(self):
        a, b = torch.rand(32, 32, 3), torch.rand(32, 32, 3)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)

    def test_range(self):
        a, b = torch.rand(32, 32, 3), torch.rand(32, 32, 3)
        assert -1.0 <= ssim(a, b) <= 1.0


class TestPerceptual:
    def test_zero_on_identical(self):
        img = torch.rand(32, 32, 3)
        assert perceptual(img, img) == 0.0

    def test_symmetric_and_positive(self):
        a, b = torch.rand(32, 32, 3), torch.rand(32, 32, 3)
        assert perceptual(a, b) == pytest.approx(perceptual(b, a))
        assert perceptual(a, b) > 0

    def test_extractor_deterministic(self):
        a, b = torch.rand(32, 32, 3), torch.rand(32, 32, 3)
        d1 = RandomFeatureExtractor().distance(a, b).item()
        d2 = RandomFeatureExtractor().distance(a, b).item()
        assert d1 == d2

    def test_extractor_frozen(self):
        net = RandomFeatureExtractor()
        assert all(not p.requires_grad for p in net.parameters())


class TestAlignment:
    def _sidecar(self, offset=0.0):
        frame_poses = [OrbitPose(2.0, offset + 0.0), OrbitPose(2.0, offset + 1.0)]
        holdout_poses = [
            OrbitPose(2.0, offset + 0.5, 0.05),
            OrbitPose(2.0, offset + 2.5, -0.05),
        ]
        from unposed3d.data import EvalSidecar

        return EvalSidecar("obj", frame_poses, holdout_poses, ["a.png", "b.png"])

    def test_identity_when_reference_at_p0(self):
        sidecar = self._sidecar(offset=0.0)
        p0 = OrbitPose(2.0, 0.0, sidecar.frame_poses[0].polar)
        aligned = align_to_reference(sidecar, p0=p0)
        for got, raw in zip(aligned, sidecar.holdout_poses):
            assert got.azimuth == pytest.approx(raw.azimuth)
            assert got.radius == pytest.approx(raw.radius)

    def test_gauge_removal(self):
        # a global azimuth offset in the sidecar leaves aligned poses unchanged
        base = align_to_reference(self._sidecar(offset=0.0))
        shifted = align_to_reference(self._sidecar(offset=1.7))
        for a, b in zip(base, shifted):
            assert a.azimuth == pytest.approx(b.azimuth, abs=1e-9)
            assert a.polar == pytest.approx(b.polar, abs=1e-9)
            assert a.radius == pytest.approx(b.radius)

    def test_radius_rescaled_to_orbit(self):
        sidecar = self._sidecar()
        aligned = align_to_reference(sidecar, orbit_radius=3.0)
        assert all(p.radius == pytest.approx(3.0) for p in aligned)

    def test_empty_sidecar_rejected(self):
        from unposed3d.data import EvalSidecar

        with pytest.raises(ValueError):
            align_to_reference(EvalSidecar("obj", [], [], []))


class TestEvaluateHoldout:
    def test_true_gauge_matches_raw_pose_evaluation(self, tiny_dataset):
        # for a pose-aware model there is no gauge ambiguity: evaluating at
        # the raw sidecar poses and through the alignment path must agree
        from conftest import tiny_train_config
        from unposed3d.data import load_holdout
        from unposed3d.evaluation import evaluate_holdout
        from unposed3d.geometry import default_focal, pose_to_camera
        from unposed3d.training import reconstruct_object, train_posed
        from unposed3d.triplane import RenderConfig, render

        state = train_posed(tiny_dataset, tiny_train_config(total_steps=0), seed=0)
        tp, dec = reconstruct_object(state, tiny_dataset, "obj_0000")
        cfg = RenderConfig(samples_per_ray=16)
        aligned = evaluate_holdout(tp, dec, tiny_dataset, "obj_0000",
                                   render_cfg=cfg, gauge="true")
        sidecar = load_sidecar(tiny_dataset, "obj_0000")
        _, gts = load_holdout(tiny_dataset, "obj_0000")
        from unposed3d.evaluation import psnr as _psnr

        raw = []
        with torch.no_grad():
            for pose, gt in zip(sidecar.holdout_poses, gts):
                cam = pose_to_camera(pose, default_focal(32, pose.radius), 32)
                raw.append(_psnr(render(tp, dec, cam, cfg).clamp(0, 1), gt))
        assert np.mean(raw) == pytest.approx(aligned["psnr"], abs=1e-6)

    def test_unknown_gauge_rejected(self, tiny_dataset):
        from conftest import tiny_train_config
        from unposed3d.evaluation import evaluate_holdout
        from unposed3d.training import reconstruct_object, train_posed

        state = train_posed(tiny_dataset, tiny_train_config(total_steps=0), seed=0)
        tp, dec = reconstruct_object(state, tiny_dataset, "obj_0000")
        with pytest.raises(ValueError):
            evaluate_holdout(tp, dec, tiny_dataset, "obj_0000", gauge="bogus")


class TestEvalReport:
    def test_aggregate_and_json(self):
        per_object = {
            "a": {"psnr": 20.0, "ssim": 0.8, "perceptual": 0.1},
            "b": {"psnr": 30.0, "ssim": 0.9, "perceptual": 0.2},
        }
        report = aggregate_report(per_object, tag="full", config_echo={"seed": 1})
        assert report.aggregate["psnr"] == pytest.approx(25.0)
        payload = json.loads(report.to_json())
        assert payload["ablation_tag"] == "full"
        assert payload["config_echo"]["seed"] == 1
        # deterministic serialization
        assert report.to_json() == aggregate_report(per_object, "full", {"seed": 1}).to_json()
