import json
import math

import numpy as np
import pytest
import torch

from conftest import tiny_train_config
from unposed3d.evaluation import RandomFeatureExtractor
from unposed3d.training import (
    TrainConfig,
    learning_rate_at,
    load_checkpoint,
    recon_loss,
    reconstruct,
    save_checkpoint,
    train_pose_free,
    train_posed,
)


class TestLearningRateSchedule:
    def test_warmup_and_decay(self):
        cfg = tiny_train_config(learning_rate=1e-3, warmup_steps=100, total_steps=1000)
        assert learning_rate_at(0, cfg) == 0.0
        assert learning_rate_at(50, cfg) == pytest.approx(5e-4)
        assert learning_rate_at(100, cfg) == pytest.approx(1e-3)
        assert learning_rate_at(1000, cfg) == pytest.approx(0.0, abs=1e-12)

    def test_cosine_midpoint(self):
        cfg = tiny_train_config(learning_rate=1e-3, warmup_steps=0, total_steps=1000)
        assert learning_rate_at(500, cfg) == pytest.approx(5e-4)


class TestReconLoss:
    def test_exact_match_zero_loss(self):
        imgs = [torch.rand(4, 4, 3) for _ in range(3)]
        loss, parts = recon_loss(imgs, [i.clone() for i in imgs], [], 1.0, 1.0,
                                 RandomFeatureExtractor())
        assert loss.item() == pytest.approx(0.0, abs=1e-12)
        assert parts["loss_mse"] == 0.0

    def test_pure_mse_limit(self):
        renders = [torch.rand(4, 4, 3) for _ in range(2)]
        targets = [torch.rand(4, 4, 3) for _ in range(2)]
        loss, _ = recon_loss(renders, targets, [], lam=0.0, beta=1e30)
        exp = np.mean([torch.mean((r - t) ** 2).item() for r, t in zip(renders, targets)])
        assert loss.item() == pytest.approx(exp, abs=1e-7)

    def test_hand_computed_two_view_case(self):
        r1 = torch.tensor([[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
                           [[0.5, 0.5, 0.5], [0.2, 0.2, 0.2]]])
        r2 = torch.zeros(2, 2, 3)
        t1 = torch.full((2, 2, 3), 0.5)
        t2 = torch.full((2, 2, 3), 0.25)
        loss, _ = recon_loss([r1, r2], [t1, t2], [], lam=0.0, beta=1e30)
        mse1 = ((r1 - t1) ** 2).mean().item()
        mse2 = 0.0625
        assert loss.item() == pytest.approx((mse1 + mse2) / 2, abs=1e-6)

    def test_sds_gradient_injection(self):
        render = torch.rand(4, 4, 3, requires_grad=True)
        g = torch.randn(4, 4, 3)
        loss, parts = recon_loss([], [], [(g, render)], lam=0.0, beta=2.0)
        loss.backward()
        assert torch.allclose(render.grad, g / 2.0, atol=1e-7)
        assert parts["sds_grad_norm"] == pytest.approx(g.norm().item())

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            recon_loss([torch.rand(2, 2, 3)], [], [], 1.0, 1.0)

    def test_term_decomposition(self):
        renders = [torch.rand(8, 8, 3) for _ in range(2)]
        targets = [torch.rand(8, 8, 3) for _ in range(2)]
        net = RandomFeatureExtractor()
        full, parts = recon_loss(renders, targets, [], lam=1.0, beta=1.0, perceptual_net=net)
        no_perc, _ = recon_loss(renders, targets, [], lam=0.0, beta=1.0, perceptual_net=net)
        assert full.item() == pytest.approx(no_perc.item() + parts["loss_perc"], abs=1e-6)


class TestTrainPosed:
    def test_zero_step_run_returns_init(self, tiny_dataset):
        cfg = tiny_train_config(total_steps=0)
        state = train_posed(tiny_dataset, cfg, seed=0)
        assert state.step == 0
        assert state.metric_history == []

    def test_short_run_logs_metrics(self, tiny_dataset, tmp_path):
        cfg = tiny_train_config(total_steps=3)
        state = train_posed(tiny_dataset, cfg, seed=0, out_dir=tmp_path)
        assert state.step == 3
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 3
        rec = json.loads(lines[0])
        assert set(rec) >= {"step", "lr", "loss_mse", "loss_perc"}
        assert rec["beta"] is None
        assert (tmp_path / "ckpt_final.pt").exists()

    def test_deterministic_given_seed(self, tiny_dataset):
        cfg = tiny_train_config(total_steps=3)
        a = train_posed(tiny_dataset, cfg, seed=4)
        b = train_posed(tiny_dataset, cfg, seed=4)
        assert a.metric_history == b.metric_history


class TestTrainPoseFree:
    def _cfg(self, **kw):
        from unposed3d.augmentation import AugmentationSchedule

        base = dict(
            total_steps=4,
            augmentation=AugmentationSchedule(interval_steps=50, k0=2, k_increment=1),
            sds_views=1,
            pseudo_views_per_step=2,
            samples_per_ray=12,
        )
        base.update(kw)
        return tiny_train_config(**base)

    def test_short_run_with_oracle(self, one_object_dataset, tmp_path):
        state = train_pose_free(one_object_dataset, self._cfg(), seed=0,
                                prior_kind="oracle", out_dir=tmp_path)
        assert state.step == 4
        assert state.generation == 1
        assert len(state.pseudo_sets["obj_0000"]) == 2
        recs = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert len(recs) == 4
        assert recs[0]["beta"] == 1.0
        # pseudo-view dumps for inspection
        assert len(list((tmp_path / "pseudo_views" / "obj_0000" / "gen00").glob("*.png"))) == 2

    def test_resolution_mismatch_rejected(self, one_object_dataset):
        cfg = self._cfg(render_resolution=64)
        with pytest.raises(ValueError):
            train_pose_free(one_object_dataset, cfg, seed=0)

    def test_no_aug_freezes_generation(self, one_object_dataset):
        from unposed3d.augmentation import AugmentationSchedule

        cfg = self._cfg(
            total_steps=6,
            augmentation=AugmentationSchedule(interval_steps=3, k0=2, k_increment=1),
            freeze_augmentation=True,
        )
        state = train_pose_free(one_object_dataset, cfg, seed=0)
        assert state.generation == 1  # only the initial generation
        assert len(state.pseudo_sets["obj_0000"]) == 2

    def test_growing_generations(self, one_object_dataset):
        from unposed3d.augmentation import AugmentationSchedule

        cfg = self._cfg(
            total_steps=6,
            augmentation=AugmentationSchedule(interval_steps=3, k0=2, k_increment=1),
        )
        state = train_pose_free(one_object_dataset, cfg, seed=0)
        assert state.generation == 2
        assert len(state.pseudo_sets["obj_0000"]) == 2 + 3

    def test_no_weak_disables_sds(self, one_object_dataset):
        state = train_pose_free(one_object_dataset, self._cfg(use_sds=False), seed=0)
        assert all(r["sds_grad_norm"] == 0.0 for r in state.metric_history)

    def test_unknown_prior_kind(self, one_object_dataset):
        with pytest.raises(ValueError):
            train_pose_free(one_object_dataset, self._cfg(), seed=0, prior_kind="external")


class TestCheckpointing:
    def test_round_trip_resumes_identically(self, one_object_dataset, tmp_path):
        from unposed3d.augmentation import AugmentationSchedule

        cfg = tiny_train_config(
            total_steps=8,
            augmentation=AugmentationSchedule(interval_steps=50, k0=2, k_increment=1),
            sds_views=1,
            pseudo_views_per_step=2,
            samples_per_ray=12,
        )
        full = train_pose_free(one_object_dataset, cfg, seed=3)

        half_cfg = tiny_train_config(
            total_steps=8,
            augmentation=AugmentationSchedule(interval_steps=50, k0=2, k_increment=1),
            sds_views=1,
            pseudo_views_per_step=2,
            samples_per_ray=12,
            checkpoint_interval=4,
        )
        out = tmp_path / "run"
        train_pose_free(one_object_dataset, half_cfg, seed=3, out_dir=out)
        resumed = train_pose_free(
            one_object_dataset, half_cfg, seed=3, resume=out / "ckpt_0000004.pt"
        )
        tail_full = [
            {k: v for k, v in r.items()} for r in full.metric_history[4:]
        ]
        tail_resumed = resumed.metric_history[4:]
        for a, b in zip(tail_full, tail_resumed):
            assert a["loss_mse"] == pytest.approx(b["loss_mse"], rel=1e-12, abs=1e-15)
            assert a["sds_grad_norm"] == pytest.approx(b["sds_grad_norm"], rel=1e-12, abs=1e-15)

    def test_state_round_trip(self, one_object_dataset, tmp_path):
        from unposed3d.augmentation import AugmentationSchedule

        cfg = tiny_train_config(
            total_steps=2,
            augmentation=AugmentationSchedule(interval_steps=50, k0=2, k_increment=1),
            sds_views=1, pseudo_views_per_step=2, samples_per_ray=12,
        )
        state = train_pose_free(one_object_dataset, cfg, seed=0)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(state, path)
        back = load_checkpoint(path)
        assert back.step == state.step
        assert back.generation == state.generation
        assert back.mode == "pose_free"
        assert len(back.pseudo_sets["obj_0000"]) == len(state.pseudo_sets["obj_0000"])
        for pa, pb in zip(state.model.parameters(), back.model.parameters()):
            assert torch.equal(pa, pb)


class TestReconstruct:
    def test_shape_contract(self, one_object_dataset):
        cfg = tiny_train_config(total_steps=0)
        state = train_posed(one_object_dataset, cfg, seed=0)
        from unposed3d.data import load_video

        video = load_video(one_object_dataset, "obj_0000")
        feat, tp = reconstruct(video.frames, state)
        assert feat.shape == (cfg.model.scene_feature_dim,)
        assert tp.planes.shape == (3, 16, 32, 32)

    def test_permutation_invariant_triplane(self, one_object_dataset):
        cfg = tiny_train_config(total_steps=0)
        state = train_posed(one_object_dataset, cfg, seed=0)
        from unposed3d.data import load_video

        frames = load_video(one_object_dataset, "obj_0000").frames
        _, tp1 = reconstruct(frames, state)
        perm = torch.randperm(frames.shape[0], generator=torch.Generator().manual_seed(0))
        _, tp2 = reconstruct(frames[perm], state)
        rel = (tp1.planes - tp2.planes).norm() / tp1.planes.norm()
        assert rel < 1e-4
