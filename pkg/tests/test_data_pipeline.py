import math

import numpy as np
import pytest
from PIL import Image

from mitoseg.data_pipeline import (
    AugmentSpec,
    BlobSpec,
    Ellipse,
    PatchSampler,
    StackError,
    VolumeStack,
    load_stack,
    make_synthetic_fixture,
    sample_patch,
    save_stack,
    write_meta,
)
from mitoseg.data_pipeline.augment import bilinear_sample, draw_geometry, sample_grid
from mitoseg.data_pipeline.synthetic import random_ellipses

from oracles import ellipse_area_scan


def _write(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _stack_dir(tmp_path, n=3, size=(6, 5), masks=True):
    rng = np.random.default_rng(0)
    for z in range(n):
        _write(tmp_path / "images" / f"{z:04d}.png", rng.integers(0, 256, size, dtype=np.uint8))
        if masks:
            _write(tmp_path / "masks" / f"{z:04d}.png", (rng.random(size) < 0.3).astype(np.uint8) * 255)
    return tmp_path


class TestLoadStack:
    def test_round_trip(self, tmp_path):
        stack = make_synthetic_fixture(4, (40, 30), blobs=2, seed=0)
        save_stack(tmp_path, stack)
        back = load_stack(tmp_path)
        assert back.shape == (4, 40, 30)
        assert np.array_equal(back.labels, stack.labels)
        # 8-bit storage: within half a gray level
        assert np.abs(back.images - stack.images).max() <= 0.5 / 255 + 1e-7
        assert back.voxel_size_nm == (5.0, 5.0, 5.0)

    def test_pixel_scaling(self, tmp_path):
        _write(tmp_path / "images" / "s0.png", np.array([[0, 51, 255]], np.uint8))
        np.testing.assert_allclose(load_stack(tmp_path).images[0, 0], [0.0, 0.2, 1.0])

    def test_numeric_order(self, tmp_path):
        for k in (10, 2, 1):
            _write(tmp_path / "images" / f"slice_{k}.png", np.full((2, 2), k, np.uint8))
        stack = load_stack(tmp_path)
        assert stack.names == ("slice_1", "slice_2", "slice_10")
        assert [round(float(v) * 255) for v in stack.images[:, 0, 0]] == [1, 2, 10]

    def test_stack_is_read_only(self, tmp_path):
        stack = load_stack(_stack_dir(tmp_path))
        with pytest.raises(ValueError):
            stack.images[0, 0, 0] = 1

    def test_empty_directory(self, tmp_path):
        (tmp_path / "images").mkdir()
        with pytest.raises(StackError, match="no image files"):
            load_stack(tmp_path)

    def test_missing_images_dir(self, tmp_path):
        with pytest.raises(StackError):
            load_stack(tmp_path)

    def test_non_binary_mask_names_file(self, tmp_path):
        _stack_dir(tmp_path)
        bad = np.zeros((6, 5), np.uint8)
        bad[2, 2] = 128
        _write(tmp_path / "masks" / "0001.png", bad)
        with pytest.raises(StackError, match=r"0001\.png.*128"):
            load_stack(tmp_path)

    def test_missing_mask(self, tmp_path):
        _stack_dir(tmp_path)
        (tmp_path / "masks" / "0002.png").unlink()
        with pytest.raises(StackError, match="0002"):
            load_stack(tmp_path)

    def test_inconsistent_sizes(self, tmp_path):
        _stack_dir(tmp_path)
        _write(tmp_path / "images" / "0001.png", np.zeros((7, 5), np.uint8))
        with pytest.raises(StackError, match="0001.png"):
            load_stack(tmp_path)

    def test_rgb_rejected(self, tmp_path):
        _write(tmp_path / "images" / "0.png", np.zeros((3, 3, 3), np.uint8))
        with pytest.raises(StackError, match="single-channel"):
            load_stack(tmp_path)

    def test_meta_disagreement(self, tmp_path):
        _stack_dir(tmp_path)
        write_meta(tmp_path / "stack.meta", depth=4, height=6, width=5)
        with pytest.raises(StackError, match="depth"):
            load_stack(tmp_path)

    def test_masks_optional_unless_required(self, tmp_path):
        _stack_dir(tmp_path, masks=False)
        assert not load_stack(tmp_path).has_labels
        with pytest.raises(StackError):
            load_stack(tmp_path, require_masks=True)

    def test_many_slices(self, tmp_path):
        for z in range(165):
            _write(tmp_path / "images" / f"{z}.png", np.full((4, 3), z, np.uint8))
        assert load_stack(tmp_path).depth == 165


class TestVolumeStack:
    def test_label_shape(self):
        with pytest.raises(StackError):
            VolumeStack(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))

    def test_label_values(self):
        with pytest.raises(StackError):
            VolumeStack(np.zeros((1, 2, 2)), np.full((1, 2, 2), 2))


class TestSamplePatch:
    @pytest.fixture(scope="class")
    @staticmethod
    def stack():
        return make_synthetic_fixture(3, (200, 260), blobs=6, seed=1)

    def test_axis_aligned_identity(self):
        rng = np.random.default_rng(0)
        img = rng.random((1, 64, 64)).astype(np.float32)
        lab = (rng.random((1, 64, 64)) < 0.5).astype(np.uint8)
        st = VolumeStack(img, lab)
        out_img, out_mask, _ = sample_patch(st, AugmentSpec(output_size=64), rng, z=0, side=64, angle=0.0,
                                            flips=(False, False))
        np.testing.assert_allclose(out_img, img[0], atol=1e-6)
        assert np.array_equal(out_mask, lab[0])

    def test_axis_aligned_downsample_is_box_mean(self):
        # s = m = 2 * output: every sample sits at the center of a 2x2 block
        rng = np.random.default_rng(1)
        img = rng.random((1, 128, 128)).astype(np.float32)
        st = VolumeStack(img, np.zeros_like(img, dtype=np.uint8))
        out, mask, _ = sample_patch(st, AugmentSpec(output_size=64), rng, z=0, side=128, angle=0.0,
                                    flips=(False, False))
        box = img[0].reshape(64, 2, 64, 2).mean(axis=(1, 3))
        np.testing.assert_allclose(out, box, atol=1e-6)
        assert set(np.unique(mask)) <= {0, 1}

    def test_flips(self, stack):
        kw = dict(z=1, side=150.0, angle=0.3, center=(100.0, 130.0))
        base, bm, _ = sample_patch(stack, AugmentSpec(output_size=32), None, flips=(False, False), **kw)
        h, hm, _ = sample_patch(stack, AugmentSpec(output_size=32), None, flips=(True, False), **kw)
        v, vm, _ = sample_patch(stack, AugmentSpec(output_size=32), None, flips=(False, True), **kw)
        assert np.array_equal(h, base[:, ::-1]) and np.array_equal(hm, bm[:, ::-1])
        assert np.array_equal(v, base[::-1]) and np.array_equal(vm, bm[::-1])

    def test_masks_stay_binary(self, stack):
        rng = np.random.default_rng(2)
        for _ in range(30):
            _, mask, _ = sample_patch(stack, AugmentSpec(output_size=48), rng)
            assert mask.dtype == np.uint8 and set(np.unique(mask)) <= {0, 1}

    def test_reproducible(self, stack):
        a = sample_patch(stack, AugmentSpec(output_size=32), np.random.default_rng(7))
        b = sample_patch(stack, AugmentSpec(output_size=32), np.random.default_rng(7))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and a[2] == b[2]

    def test_constant_slice(self):
        st = VolumeStack(np.full((2, 90, 70), 0.37, np.float32), np.zeros((2, 90, 70), np.uint8))
        rng = np.random.default_rng(3)
        for _ in range(20):
            img, _, _ = sample_patch(st, AugmentSpec(output_size=40), rng)
            np.testing.assert_allclose(img, 0.37, atol=1e-6)

    def test_unlabelled_rejected(self):
        with pytest.raises(StackError):
            sample_patch(VolumeStack(np.zeros((1, 8, 8))), AugmentSpec(output_size=8), np.random.default_rng())

    def test_pinned_square_must_fit(self, stack):
        with pytest.raises(ValueError, match="does not fit"):
            sample_patch(stack, AugmentSpec(output_size=32), None, z=0, side=200.0, angle=math.pi / 4)

    @pytest.mark.parametrize("size", [(64, 64), (50, 90), (128, 40)])
    def test_poisoned_border_never_read(self, size):
        h, w = size
        pad = 3
        rng = np.random.default_rng(4)
        inner = rng.random((h, w)).astype(np.float32)
        poisoned = np.full((h + 2 * pad, w + 2 * pad), 1e6, np.float32)
        poisoned[pad:pad + h, pad:pad + w] = inner
        spec = AugmentSpec(output_size=32)
        for _ in range(300):
            _, side, angle, (cy, cx) = draw_geometry(h, w, spec, rng)
            rows, cols = sample_grid(side, angle, (cy, cx), spec.output_size)
            assert rows.min() >= 0 and rows.max() <= h - 1
            assert cols.min() >= 0 and cols.max() <= w - 1
            out = bilinear_sample(poisoned, rows + pad, cols + pad)
            assert out.max() <= 1.0 + 1e-5

    def test_side_law(self):
        # 10,000 draws of the coverage law on a 1024 x 768 slice
        rng = np.random.default_rng(5)
        spec = AugmentSpec()
        drawn, used = [], []
        for _ in range(10_000):
            d, s, _, _ = draw_geometry(768, 1024, spec, rng)
            drawn.append(d / 768)
            used.append(s / 768)
        drawn, used = np.array(drawn), np.array(used)
        assert drawn.min() >= 0.6 and drawn.max() <= 1.0
        assert 0.78 <= drawn.mean() <= 0.82
        assert (used <= drawn + 1e-12).all() and used.min() > 0

    def test_sampler_adapter(self, stack):
        img, mask = PatchSampler(stack, AugmentSpec(output_size=24)).sample(np.random.default_rng(0))
        assert img.shape == mask.shape == (24, 24)

    @pytest.mark.parametrize("kw", [{"min_coverage": 0}, {"min_coverage": 1.5}, {"flip_prob": 2}])
    def test_bad_spec(self, kw):
        with pytest.raises(ValueError):
            AugmentSpec(**kw)


class TestSynthetic:
    def test_no_blobs_all_background(self):
        st = make_synthetic_fixture(3, (32, 32), blobs=0, seed=0)
        assert st.labels.sum() == 0

    def test_deterministic(self):
        a = make_synthetic_fixture(4, (48, 48), seed=3)
        b = make_synthetic_fixture(4, (48, 48), seed=3)
        assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
        c = make_synthetic_fixture(4, (48, 48), seed=4)
        assert a.images.tobytes() != c.images.tobytes()

    @pytest.mark.parametrize("e", [
        Ellipse(cy=31.5, cx=31.5, ry=12.0, rx=7.0, angle=0.0, z0=0, z1=1),
        Ellipse(cy=30.2, cx=33.7, ry=15.0, rx=6.5, angle=0.7, z0=0, z1=1),
        Ellipse(cy=32.0, cx=32.0, ry=10.0, rx=10.0, angle=0.0, z0=0, z1=1),
    ])
    def test_label_area_matches_scan(self, e):
        st = make_synthetic_fixture(1, (64, 64), blobs=[e], seed=0)
        assert int(st.labels[0].sum()) == ellipse_area_scan(64, 64, e.cy, e.cx, e.ry, e.rx, e.angle)

    def test_blobs_persist_three_slices(self):
        rng = np.random.default_rng(0)
        for e in random_ellipses(16, 128, 128, BlobSpec(count=50), rng):
            assert e.z1 - e.z0 >= 3

    def test_labels_binary_images_in_unit_range(self):
        st = make_synthetic_fixture(3, (64, 64), seed=2)
        assert set(np.unique(st.labels)) <= {0, 1}
        assert st.images.min() >= 0 and st.images.max() <= 1

    def test_objects_are_darker(self):
        st = make_synthetic_fixture(4, (128, 128), seed=2)
        assert st.images[st.labels == 1].mean() < st.images[st.labels == 0].mean() - 0.2
