"""Generator, augmentation, and dataset IO checks."""

import numpy as np
import pytest

from freespace import data
from freespace.data import (Box, SceneSpec, augment, brightness, crop,
                            hflip, load_dataset, render, rotate, save_sample)
from freespace.errors import ContractError
from freespace.geometry import back_project


def ray_box_enter_naive(u, v, k, box, cam_h):
    """Scalar slab intersection; returns entry distance or None."""
    d = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]
    slabs = [(box.x - box.width / 2, box.x + box.width / 2, d[0]),
             (cam_h - box.height, cam_h, d[1]),
             (box.z - box.depth / 2, box.z + box.depth / 2, d[2])]
    t_lo, t_hi = 0.0, float("inf")
    for lo, hi, dd in slabs:
        if dd == 0.0:
            if not lo <= 0.0 <= hi:
                return None
            continue
        t0, t1 = lo / dd, hi / dd
        if t0 > t1:
            t0, t1 = t1, t0
        t_lo, t_hi = max(t_lo, t0), min(t_hi, t1)
    if t_lo <= t_hi and t_lo > 0:
        return t_lo
    return None


class TestRender:
    def test_empty_scene_labels_every_ground_pixel(self):
        spec = SceneSpec(image_size=(64, 64))
        sample = render(spec)
        k = spec.intrinsics
        below = (np.arange(64)[:, None] - k.cy > 0) * np.ones((1, 64), dtype=bool)
        np.testing.assert_array_equal(sample.labels.astype(bool), below)
        np.testing.assert_array_equal(sample.depth.valid, below)

    def test_ground_depth_is_plane_exact(self):
        spec = SceneSpec(image_size=(64, 64), camera_height=1.65)
        sample = render(spec)
        k = spec.intrinsics
        vs, us = np.nonzero(sample.labels)
        for u, v in zip(us[::97], vs[::97]):
            p = back_project((u, v), sample.depth.values[v, u], k)
            assert abs(p[1] - 1.65) < 1e-9

    def test_box_hole_matches_intersection_oracle(self):
        box = Box(x=0.5, z=7.0, width=1.2, height=1.0, depth=0.8)
        spec = SceneSpec(image_size=(64, 64), obstacles=(box,))
        sample = render(spec)
        k = spec.intrinsics
        base = render(SceneSpec(image_size=(64, 64)))
        for v in range(64):
            for u in range(64):
                t_box = ray_box_enter_naive(u, v, k, box, spec.camera_height)
                dy = (v - k.cy) / k.fy
                t_ground = spec.camera_height / dy if dy > 0 else None
                expect_box = t_box is not None and (t_ground is None or t_box < t_ground)
                if expect_box:
                    assert sample.labels[v, u] == 0
                    assert sample.depth.valid[v, u]
                    assert sample.depth.values[v, u] == pytest.approx(t_box, abs=1e-9)
                else:
                    assert sample.labels[v, u] == base.labels[v, u]

    def test_same_seed_reproduces(self):
        spec = SceneSpec(image_size=(64, 64), obstacles=(Box(0, 8, 1, 1, 1),), seed=5)
        a, b = render(spec), render(spec)
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.depth.values[a.depth.valid],
                                      b.depth.values[b.depth.valid])
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_ramp_normals_are_tilted(self):
        from freespace.geometry import estimate_normals
        spec = SceneSpec(image_size=(64, 64), ramp_angle_deg=10.0, ramp_start=6.0)
        sample = render(spec)
        nm = estimate_normals(sample.depth, spec.intrinsics)
        # pick pixels safely beyond the ramp start
        ramp_zone = sample.depth.valid & (sample.depth.values > 9.0) & nm.valid
        ramp_zone &= np.abs(sample.depth.values - 9.0) > 1.0
        assert ramp_zone.sum() > 20
        th = np.radians(10.0)
        got = nm.vectors[:, ramp_zone]
        expected = np.array([0.0, -np.cos(th), -np.sin(th)])
        np.testing.assert_allclose(got, np.broadcast_to(expected[:, None], got.shape),
                                   atol=1e-2)

    def test_degenerate_spec_rejected(self):
        with pytest.raises(ContractError):
            SceneSpec(camera_height=0.0)
        with pytest.raises(ContractError):
            SceneSpec(image_size=(60, 64))


class TestAugment:
    @pytest.fixture
    def sample(self):
        return render(SceneSpec(image_size=(64, 64),
                                obstacles=(Box(-1.0, 6.0, 1.0, 1.2, 1.0),), seed=2))

    def test_hflip_involution(self, sample):
        twice = hflip(hflip(sample))
        np.testing.assert_array_equal(twice.rgb, sample.rgb)
        np.testing.assert_array_equal(twice.labels, sample.labels)
        np.testing.assert_array_equal(twice.depth.valid, sample.depth.valid)
        assert twice.intrinsics == sample.intrinsics

    def test_hflip_mirrors_back_projection(self, sample):
        flipped = hflip(sample)
        v, u = 40, 10
        if not sample.depth.valid[v, u]:
            pytest.skip("pick a valid pixel")
        p = back_project((u, v), sample.depth.values[v, u], sample.intrinsics)
        u2 = 63 - u
        q = back_project((u2, v), flipped.depth.values[v, u2], flipped.intrinsics)
        np.testing.assert_allclose(q, [-p[0], p[1], p[2]], atol=1e-12)

    def test_brightness_leaves_geometry_untouched(self, sample):
        out = brightness(sample, 1.2)
        assert out.labels is sample.labels
        assert out.depth is sample.depth
        assert not np.array_equal(out.rgb, sample.rgb)

    def test_crop_shifts_principal_point(self, sample):
        out = crop(sample, 8, 16, 32, 32)
        assert out.intrinsics.cx == sample.intrinsics.cx - 8
        assert out.intrinsics.cy == sample.intrinsics.cy - 16
        # back-projection equality: same world point from both frames
        v, u = 40, 20
        if sample.depth.valid[v, u]:
            p = back_project((u, v), sample.depth.values[v, u], sample.intrinsics)
            q = back_project((u - 8, v - 16), out.depth.values[v - 16, u - 8],
                             out.intrinsics)
            np.testing.assert_allclose(p, q, atol=1e-12)

    def test_crop_bounds_checked(self, sample):
        with pytest.raises(ContractError):
            crop(sample, 40, 40, 32, 32)

    def test_rotate_preserves_binarity_and_masks(self, sample):
        out = rotate(sample, 4.0)
        assert set(np.unique(out.labels)) <= {0, 1}
        # every valid rotated depth value existed in the source frame
        src_vals = set(sample.depth.values[sample.depth.valid].tolist())
        rot_vals = set(out.depth.values[out.depth.valid].tolist())
        assert rot_vals <= src_vals

    def test_augment_pipeline_seeded(self, sample):
        a = augment(sample, ("hflip", "rotate", "crop", "brightness"), seed=9)
        b = augment(sample, ("hflip", "rotate", "crop", "brightness"), seed=9)
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.labels.shape == (32, 32)
        assert set(np.unique(a.labels)) <= {0, 1}

    def test_unknown_op_rejected(self, sample):
        with pytest.raises(ContractError):
            augment(sample, ("sharpen",), seed=0)


class TestDatasetIO:
    def test_roundtrip(self, tmp_path):
        sample = render(SceneSpec(image_size=(64, 64), obstacles=(Box(0, 9, 1, 1, 1),)))
        save_sample(sample, tmp_path, "000")
        loaded = data.load_sample(tmp_path, "000")
        np.testing.assert_array_equal(loaded.labels, sample.labels)
        np.testing.assert_array_equal(loaded.depth.valid, sample.depth.valid)
        err = np.abs(loaded.depth.values[loaded.depth.valid]
                     - sample.depth.values[sample.depth.valid])
        assert err.max() <= 0.5 / data.DEPTH_SCALE + 1e-12
        assert np.abs(loaded.rgb - sample.rgb).max() <= 0.5 / 255 + 1e-12
        assert loaded.intrinsics == sample.intrinsics

    def test_empty_directory(self, tmp_path):
        assert load_dataset(tmp_path) == []

    def test_single_triplet(self, tmp_path):
        save_sample(render(SceneSpec()), tmp_path, "a")
        assert len(load_dataset(tmp_path)) == 1

    def test_mixed_valid_invalid_stems(self, tmp_path, caplog):
        save_sample(render(SceneSpec(seed=0)), tmp_path, "a")
        save_sample(render(SceneSpec(seed=1)), tmp_path, "b")
        (tmp_path / "depth" / "b.png").unlink()
        with caplog.at_level("WARNING"):
            samples = load_dataset(tmp_path)
        assert len(samples) == 1
        assert "skipping b" in caplog.text

    def test_malformed_intrinsics_hard_error(self, tmp_path):
        save_sample(render(SceneSpec()), tmp_path, "a")
        (tmp_path / "calib" / "a.txt").write_text("not numbers at all")
        with pytest.raises(ContractError):
            load_dataset(tmp_path)

    def test_iteration_order_stable(self, tmp_path):
        for stem in ("c", "a", "b"):
            save_sample(render(SceneSpec(seed=ord(stem))), tmp_path, stem)
        first = [s.intrinsics for s in load_dataset(tmp_path)]
        second = [s.intrinsics for s in load_dataset(tmp_path)]
        assert first == second
