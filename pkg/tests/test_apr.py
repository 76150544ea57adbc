"""Tests for the pose regressor, feature extractor, and loss functions."""

import numpy as np
import pytest
import torch

from posemap import apr
from posemap import field as fd
from posemap.apr import AprConfig, LossComponents, LossToggles, PoseRegressor
from posemap.se3 import Pose
from posemap.scene import Camera

CFG = AprConfig(height=64, width=64)


def model_with_seed(seed=0, config=CFG) -> PoseRegressor:
    torch.manual_seed(seed)
    return PoseRegressor(config)


def random_image(seed=0, h=64, w=64) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(h, w, 3))


class TestPoseRegressor:
    def test_inference_is_deterministic(self):
        model = model_with_seed()
        img = random_image()
        a = apr.regress_pose(model, img)
        b = apr.regress_pose(model, img)
        np.testing.assert_array_equal(a, b)

    def test_untrained_output_is_finite(self):
        model = model_with_seed()
        out = apr.regress_pose(model, random_image(3))
        assert out.shape == (12,)
        assert np.all(np.isfinite(out))

    def test_fresh_model_starts_at_identity_pose(self):
        model = model_with_seed()
        out = apr.regress_pose(model, random_image(1))
        np.testing.assert_allclose(
            out, Pose.identity().flat, atol=1e-5
        )

    def test_resolution_mismatch_rejected(self):
        model = model_with_seed()
        with pytest.raises(ValueError, match="resolution"):
            apr.regress_pose(model, random_image(0, h=32, w=32))

    def test_batched_forward_shapes(self):
        model = model_with_seed()
        images = torch.rand(5, 3, 64, 64)
        poses, feats = model(images)
        assert poses.shape == (5, 12)
        assert feats.shape == (5, 32, 32, CFG.fusion_channels)


class TestExtractFeatures:
    def test_identical_images_identical_maps(self):
        model = model_with_seed()
        img = random_image(4)
        a = apr.extract_features(model, img)
        b = apr.extract_features(model, img)
        assert torch.equal(a.grid, b.grid)

    def test_per_pixel_unit_norm(self):
        model = model_with_seed()
        feats = apr.extract_features(model, random_image(5))
        norms = feats.grid.norm(dim=-1)
        np.testing.assert_allclose(norms.numpy(), 1.0, atol=1e-6)

    def test_distinct_images_have_nonzero_feature_gap(self):
        model = model_with_seed()
        a = apr.extract_features(model, random_image(6), source="real")
        b = apr.extract_features(model, np.clip(random_image(6) * 0.5, 0, 1),
                                 source="rendered")
        assert apr.feature_distance(a.grid, b.grid).item() > 0

    def test_translation_consistency_two_pixels_one_cell(self):
        # A 2-pixel input shift must shift the (H/2) feature grid by 1 cell
        # away from image borders.
        model = model_with_seed(seed=2)
        rng = np.random.default_rng(0)
        wide = rng.uniform(0, 1, size=(64, 66, 3))
        f_a = apr.extract_features(model, wide[:, :64]).grid.numpy()
        f_b = apr.extract_features(model, wide[:, 2:66]).grid.numpy()
        m = 8
        shifted_a = f_a[m:-m, m + 1 : -m]
        matched_b = f_b[m:-m, m : -m - 1]
        np.testing.assert_allclose(shifted_a, matched_b, atol=1e-3)

    def test_feature_map_source_tag_validated(self):
        with pytest.raises(ValueError, match="source"):
            apr.ImageFeatureMap(torch.zeros(2, 2, 4), "synthetic")


class TestLossPose:
    def test_zero_iff_exact(self):
        p = Pose.identity()
        pred = torch.as_tensor(p.flat, dtype=torch.float32)
        assert apr.loss_pose(pred, p).item() == 0.0

    def test_unit_translation_offset_gives_one(self):
        p = Pose.identity()
        pred = torch.as_tensor(p.flat, dtype=torch.float64)
        pred = pred.clone()
        pred[3] += 1.0  # x-translation entry of the row-major 3x4 layout
        assert apr.loss_pose(pred, p).item() == pytest.approx(1.0, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        target = Pose.identity()
        pred = torch.randn(12, dtype=torch.float64, requires_grad=True)
        apr.loss_pose(pred, target).backward()
        step = 1e-6
        for k in range(12):
            plus = pred.detach().clone()
            minus = pred.detach().clone()
            plus[k] += step
            minus[k] -= step
            fd_grad = (
                apr.loss_pose(plus, target) - apr.loss_pose(minus, target)
            ).item() / (2 * step)
            assert abs(pred.grad[k].item() - fd_grad) <= 1e-4 * max(1.0, abs(fd_grad))

    def test_batch_mean(self):
        target = torch.zeros(2, 12, dtype=torch.float64)
        pred = torch.zeros(2, 12, dtype=torch.float64)
        pred[0, 0] = 2.0  # squared -> 4, averaged over batch -> 2
        assert apr.loss_pose(pred, target).item() == pytest.approx(2.0)


def unit_normalize(grid: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.normalize(grid, dim=-1, eps=1e-12)


class TestLossImage:
    def test_zero_when_positive_perfect_and_negative_far(self):
        anchor = unit_normalize(torch.randn(4, 4, 8, generator=torch.Generator().manual_seed(0)))
        negative = unit_normalize(-anchor)  # maximally far on the unit sphere
        loss = apr.loss_image(anchor, anchor.clone(), [negative], margin=1.0)
        assert loss.item() == 0.0

    def test_equal_positive_and_negative_hinges_at_margin(self):
        anchor = unit_normalize(torch.randn(4, 4, 8, generator=torch.Generator().manual_seed(1)))
        other = unit_normalize(torch.randn(4, 4, 8, generator=torch.Generator().manual_seed(2)))
        loss = apr.loss_image(anchor, other, [other.clone()], margin=1.0)
        assert loss.item() == pytest.approx(1.0, abs=1e-6)

    def test_empty_negatives_rejected(self):
        anchor = torch.zeros(2, 2, 4)
        with pytest.raises(ValueError, match="negative"):
            apr.loss_image(anchor, anchor, [])

    def test_batch_matches_bruteforce_reference(self):
        gen = torch.Generator().manual_seed(3)
        real = unit_normalize(torch.randn(4, 4, 4, 8, generator=gen))
        rendered = unit_normalize(torch.randn(4, 4, 4, 8, generator=gen))
        margin = 1.0
        loss = apr.loss_image_batch(real, rendered, margin).item()

        # Scalar reference: mean over anchors of the hardest-negative hinge.
        def dist(a, b):
            return float(np.linalg.norm(a - b, axis=-1).mean())

        total = 0.0
        for i in range(4):
            d_pos = dist(real[i].numpy(), rendered[i].numpy())
            d_neg = min(
                dist(real[i].numpy(), rendered[j].numpy()) for j in range(4) if j != i
            )
            total += max(0.0, d_pos - d_neg + margin)
        assert loss == pytest.approx(total / 4.0, abs=1e-6)

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError, match="batch"):
            apr.loss_image_batch(torch.zeros(1, 2, 2, 4), torch.zeros(1, 2, 2, 4))


class TestLossPosemap:
    def test_identical_nonzero_maps_give_zero(self):
        grid = torch.randn(3, 3, 6, generator=torch.Generator().manual_seed(0))
        assert apr.loss_posemap(grid, grid.clone()).item() == pytest.approx(0.0, abs=1e-6)

    def test_antiparallel_maps_give_two(self):
        grid = torch.randn(3, 3, 6, generator=torch.Generator().manual_seed(1))
        assert apr.loss_posemap(grid, -grid).item() == pytest.approx(2.0, abs=1e-6)

    def test_positive_scale_invariance(self):
        grid = torch.randn(3, 3, 6, generator=torch.Generator().manual_seed(2))
        assert apr.loss_posemap(3.0 * grid, grid).item() == pytest.approx(0.0, abs=1e-6)
        other = torch.randn(3, 3, 6, generator=torch.Generator().manual_seed(3))
        assert apr.loss_posemap(grid, other).item() == pytest.approx(
            apr.loss_posemap(5.0 * grid, 0.25 * other).item(), abs=1e-6
        )

    def test_zero_norm_pixel_counts_as_orthogonal(self):
        a = torch.ones(1, 2, 4)
        b = torch.ones(1, 2, 4)
        a[0, 1] = 0.0  # one dead pixel: cosine treated as 0 -> contribution 1
        loss = apr.loss_posemap(a, b)
        assert loss.item() == pytest.approx(0.5, abs=1e-7)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="identical shapes"):
            apr.loss_posemap(torch.zeros(2, 2, 4), torch.zeros(2, 2, 5))

    def test_range_is_zero_to_two(self):
        gen = torch.Generator().manual_seed(4)
        for _ in range(20):
            a = torch.randn(4, 4, 8, generator=gen)
            b = torch.randn(4, 4, 8, generator=gen)
            val = apr.loss_posemap(a, b).item()
            assert 0.0 <= val <= 2.0


class TestLossRvs:
    def test_perfect_estimate_gives_zero(self):
        p = Pose.identity()
        pred = torch.as_tensor(p.flat, dtype=torch.float64)
        grid = torch.randn(2, 2, 4, generator=torch.Generator().manual_seed(0))
        assert apr.loss_rvs(pred, p, grid, grid.clone()).item() == 0.0

    def test_translation_345_gives_five(self):
        p = Pose.identity()
        pred = torch.as_tensor(p.flat, dtype=torch.float64).clone()
        pred[7] += 3.0  # y-translation
        pred[11] += 4.0  # z-translation
        grid = torch.zeros(2, 2, 4)
        assert apr.loss_rvs(pred, p, grid, grid).item() == pytest.approx(5.0, abs=1e-9)

    def test_matches_scalar_reference_on_random_inputs(self):
        rng = np.random.default_rng(8)
        pred = rng.normal(size=12)
        target = rng.normal(size=12)
        map_a = rng.normal(size=(3, 3, 5))
        map_b = rng.normal(size=(3, 3, 5))
        loss = apr.loss_rvs(
            torch.as_tensor(pred),
            torch.as_tensor(target),
            torch.as_tensor(map_a),
            torch.as_tensor(map_b),
        ).item()
        expected = np.sqrt(((pred - target) ** 2).sum()) + np.sqrt(
            ((map_a - map_b) ** 2).sum()
        )
        assert loss == pytest.approx(expected, abs=1e-6)


class TestLossTotal:
    def test_single_term_passthrough(self):
        toggles = LossToggles(pose=True, image=False, rvs=False, posemap=False)
        comp = LossComponents(pose=torch.tensor(0.73))
        assert apr.loss_total(comp, toggles).item() == pytest.approx(0.73)

    def test_all_zero_terms_sum_to_zero(self):
        comp = LossComponents(
            pose=torch.tensor(0.0),
            image=torch.tensor(0.0),
            posemap=torch.tensor(0.0),
            rvs=torch.tensor(0.0),
        )
        assert apr.loss_total(comp, LossToggles()).item() == 0.0

    def test_unit_weight_sum_is_exact(self):
        comp = LossComponents(
            pose=torch.tensor(0.125),
            image=torch.tensor(0.25),
            posemap=torch.tensor(0.5),
            rvs=torch.tensor(1.0),
        )
        assert apr.loss_total(comp, LossToggles()).item() == pytest.approx(
            1.875, abs=1e-12
        )

    def test_no_objective_rejected(self):
        toggles = LossToggles(pose=False, image=False, rvs=False, posemap=False)
        with pytest.raises(ValueError, match="no objective"):
            apr.loss_total(LossComponents(), toggles)

    def test_ablation_toggle_grid_is_constructible(self):
        # The four ablation rows: drop posemap / drop image / drop rvs / full.
        rows = [
            LossToggles(pose=True, image=True, rvs=True, posemap=False),
            LossToggles(pose=True, image=False, rvs=True, posemap=True),
            LossToggles(pose=True, image=True, rvs=False, posemap=True),
            LossToggles(pose=True, image=True, rvs=True, posemap=True),
        ]
        assert len(set(rows)) == 4
        comp = LossComponents(
            pose=torch.tensor(1.0),
            image=torch.tensor(2.0),
            posemap=torch.tensor(4.0),
            rvs=torch.tensor(8.0),
        )
        sums = {apr.loss_total(comp, t).item() for t in rows}
        assert sums == {11.0, 13.0, 7.0, 15.0}


class TestLossAlign:
    def test_identical_inputs_give_zero(self):
        anchor = unit_normalize(torch.randn(4, 4, 8, generator=torch.Generator().manual_seed(0)))
        negative = unit_normalize(-anchor)
        grid = torch.randn(2, 2, 4, generator=torch.Generator().manual_seed(1))
        loss = apr.loss_align(anchor, anchor.clone(), [negative], grid, grid.clone())
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_equals_sum_of_parts(self):
        gen = torch.Generator().manual_seed(2)
        a = unit_normalize(torch.randn(4, 4, 8, generator=gen))
        b = unit_normalize(torch.randn(4, 4, 8, generator=gen))
        n = unit_normalize(torch.randn(4, 4, 8, generator=gen))
        ga = torch.randn(2, 2, 4, generator=gen)
        gb = torch.randn(2, 2, 4, generator=gen)
        combined = apr.loss_align(a, b, [n], ga, gb).item()
        parts = apr.loss_image(a, b, [n]).item() + apr.loss_posemap(ga, gb).item()
        assert combined == pytest.approx(parts, abs=1e-9)

    def test_gradients_reach_regressor_but_not_frozen_field(self):
        torch.manual_seed(0)
        apr_model = PoseRegressor(AprConfig(height=32, width=32))
        field_cfg = fd.FieldConfig(
            pe_frequencies_position=3, pe_frequencies_direction=1,
            trunk_width=16, trunk_depth=3, feature_channels=8,
            samples_per_ray=4, near=0.5, far=4.0, posemap_downsample=16,
            decoder_widths=(32, 12),
        )
        field_model = fd.PoseFeatureField(field_cfg)
        field_model.freeze_all()
        camera = Camera(29.0, (16.0, 16.0), 32, 32)

        real = torch.rand(1, 3, 32, 32)
        rendered = torch.rand(1, 3, 32, 32)
        pose_est = apr_model.regress_pose(real)[0]
        pose_est_again = apr_model.regress_pose(rendered)[0]
        map_a = fd.render_posemap(field_model, camera, pose_est.reshape(3, 4),
                                  allow_untrained=True)
        map_b = fd.render_posemap(field_model, camera, pose_est_again.reshape(3, 4),
                                  allow_untrained=True)
        f_real = apr_model.extract_features(real)[0]
        f_rend = apr_model.extract_features(rendered)[0]
        negative = unit_normalize(torch.randn_like(f_real))
        loss = apr.loss_align(f_real, f_rend, [negative], map_a.grid, map_b.grid)
        loss.backward()

        apr_grads = [p.grad for p in apr_model.parameters()]
        assert any(g is not None and torch.any(g != 0) for g in apr_grads)
        assert all(p.grad is None for p in field_model.parameters())


class TestAprCheckpoints:
    def test_roundtrip(self, tmp_path):
        model = model_with_seed(seed=5)
        path = tmp_path / "apr.ckpt"
        digest = apr.save_apr_checkpoint(path, model, "stage3", parent="p0")
        loaded, meta = apr.load_apr_checkpoint(path)
        assert meta["stage"] == "stage3"
        assert meta["parent"] == "p0"
        assert meta["checksum"] == digest
        assert loaded.checksum() == model.checksum()
        img = random_image(11)
        np.testing.assert_array_equal(
            apr.regress_pose(loaded, img), apr.regress_pose(model, img)
        )

    def test_magic_enforced(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"WRONGM" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            apr.load_apr_checkpoint(path)


class TestAprConfig:
    def test_channel_list_must_match_blocks(self):
        with pytest.raises(ValueError):
            AprConfig(backbone_blocks=2, backbone_channels=(16, 24, 32))

    def test_margin_positive(self):
        with pytest.raises(ValueError):
            AprConfig(triplet_margin=0.0)
