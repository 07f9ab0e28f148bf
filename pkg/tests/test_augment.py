import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from fforge.augment import (ImageBatch, PatchRegion, apply_patch_swap, cutmix, cutout, label_smooth,
                            light_augment, paste_regions, regional_dropout, sample_destination,
                            sample_self_mix_regions, self_mix)
from fforge.errors import InvalidArgumentError, UnsatisfiablePlacementError


def batch_of(rng, n=4, c=3, h=8, w=8):
    return ImageBatch(rng.random((n, c, h, w)), rng.integers(0, 5, size=n))


class TestRegionSampling:
    def test_two_by_two_single_cells(self, rng):
        for _ in range(50):
            src, dst = sample_self_mix_regions(rng, 2, 2, 1, 1)
            assert (src.w, src.h) == (dst.w, dst.h) == (1, 1)
            assert (src.x, src.y) != (dst.x, dst.y)

    def test_full_height_forces_horizontal_move(self, rng):
        for _ in range(100):
            src, dst = sample_self_mix_regions(rng, 4, 4, 4, 2)
            assert src.h == dst.h and src.w == dst.w and src.valid_in(4, 4)
            if dst.h == 4:
                assert src.y == dst.y == 0 and src.x != dst.x

    def test_whole_image_is_unsatisfiable(self, rng):
        with pytest.raises(UnsatisfiablePlacementError):
            sample_self_mix_regions(rng, 1, 1, 1, 1)

    def test_bad_lengths(self, rng):
        with pytest.raises(InvalidArgumentError):
            sample_self_mix_regions(rng, 4, 4, 5, 2)
        with pytest.raises(InvalidArgumentError):
            sample_self_mix_regions(rng, 4, 4, 0, 2)

    def test_destination_distribution(self):
        """Top-left frequencies match the push-forward of uniform centres through the clipping."""
        h = w = 8
        length = 4
        expected = {}
        for cy in range(h):
            for cx in range(w):
                key = (max(cx - length // 2, 0), max(cy - length // 2, 0))
                expected[key] = expected.get(key, 0) + 1 / (h * w)
        keys = sorted(expected)
        rng = np.random.default_rng(7)
        counts = dict.fromkeys(keys, 0)
        draws = 10_000
        for _ in range(draws):
            _, dst = sample_self_mix_regions(rng, h, w, length, length)
            counts[(dst.x, dst.y)] += 1
        obs = np.array([counts[k] for k in keys])
        exp = np.array([expected[k] for k in keys]) * draws
        assert chisquare(obs, exp).pvalue > 0.01

    def test_source_uniform_given_destination(self):
        h = w = 8
        rng = np.random.default_rng(11)
        counts = {}
        n = 0
        while n < 6000:
            src, dst = sample_self_mix_regions(rng, h, w, 4, 4)
            if (dst.x, dst.y, dst.w, dst.h) != (2, 2, 4, 4):
                continue
            counts[(src.x, src.y)] = counts.get((src.x, src.y), 0) + 1
            n += 1
        cells = [(x, y) for x in range(5) for y in range(5) if (x, y) != (2, 2)]
        assert set(counts) == set(cells)
        obs = np.array([counts[c] for c in cells])
        assert chisquare(obs).pvalue > 0.01


class TestPatchSwap:
    def test_small_example(self):
        img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out = apply_patch_swap(img, PatchRegion(0, 0, 1, 1), PatchRegion(1, 1, 1, 1))
        assert np.array_equal(out, [[[4.0, 2.0], [3.0, 4.0]]])

    def test_identity(self, rng):
        img = rng.random((3, 5, 5))
        r = PatchRegion(1, 2, 2, 2)
        assert np.array_equal(apply_patch_swap(img, r, r), img)

    def test_size_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError):
            apply_patch_swap(rng.random((1, 4, 4)), PatchRegion(0, 0, 2, 2), PatchRegion(1, 1, 1, 2))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.data())
    def test_coordinate_mapping(self, h, w, data):
        rh, rw = data.draw(st.integers(0, h)), data.draw(st.integers(0, w))
        dst = PatchRegion(data.draw(st.integers(0, w - rw)), data.draw(st.integers(0, h - rh)), rw, rh)
        src = PatchRegion(data.draw(st.integers(0, w - rw)), data.draw(st.integers(0, h - rh)), rw, rh)
        img = np.random.default_rng(h * 31 + w).random((3, h, w))
        out = apply_patch_swap(img, dst, src)
        for c in range(3):
            for y in range(h):
                for x in range(w):
                    inside = dst.x <= x < dst.x + rw and dst.y <= y < dst.y + rh
                    ref = img[c, y - dst.y + src.y, x - dst.x + src.x] if inside else img[c, y, x]
                    assert out[c, y, x] == ref


class TestRegionalDropout:
    def test_self_mix_keeps_labels_and_is_deterministic(self, rng):
        b = batch_of(rng)
        one = self_mix(b, np.random.default_rng(3))
        two = self_mix(b, np.random.default_rng(3))
        assert np.array_equal(one.labels, b.labels)
        assert np.array_equal(one.pixels, two.pixels)
        assert not np.array_equal(one.pixels, b.pixels)

    def test_self_mix_degenerate(self, rng):
        with pytest.raises(UnsatisfiablePlacementError):
            self_mix(ImageBatch(rng.random((1, 1, 1, 1)), [0]), rng, 1.0)

    def test_self_mix_patch_size(self, rng):
        b = ImageBatch(np.zeros((1, 1, 8, 8)), [0])
        b.pixels[0, 0, :, :4] = 1.0
        b.pixels[0, 0, 0, 0] = 0.5
        out = self_mix(b, np.random.default_rng(0), 0.5).pixels[0, 0]
        assert np.count_nonzero(out != b.pixels[0, 0]) <= 16

    def test_cutout_zeroes_only_the_region(self, rng):
        b = ImageBatch(rng.random((3, 2, 8, 8)) * 0.9 + 0.1, [0, 1, 2])
        out = cutout(b, np.random.default_rng(1))
        for i in range(3):
            zero = out.pixels[i].sum(axis=0) == 0
            ys, xs = np.nonzero(zero)
            assert zero.sum() == (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
            assert np.array_equal(out.pixels[i][:, ~zero], b.pixels[i][:, ~zero])
        assert np.array_equal(out.labels, b.labels)

    def test_cutmix_lambda_is_area_fraction(self, rng):
        b = batch_of(rng, n=6)
        out = cutmix(b, np.random.default_rng(2))
        rows = out.label_rows(5)
        np.testing.assert_allclose(rows.sum(axis=1), 1.0)
        assert np.all((out.mix_lambda > 0) & (out.mix_lambda <= 0.25 + 1e-12))

    def test_paste_regions(self, rng):
        b = batch_of(rng, n=2)
        out = paste_regions(b, np.array([1, 0]), [PatchRegion(0, 0, 2, 4), PatchRegion(0, 0, 0, 0)])
        assert np.array_equal(out.pixels[0][:, :4, :2], b.pixels[1][:, :4, :2])
        assert np.array_equal(out.pixels[1], b.pixels[1])
        np.testing.assert_allclose(out.mix_lambda, [8 / 64, 0.0])
        assert list(out.mix_labels) == [b.labels[1], b.labels[0]]

    def test_cutmix_needs_two(self, rng):
        with pytest.raises(InvalidArgumentError):
            cutmix(batch_of(rng, n=1), rng)

    def test_prob_zero_is_identity(self, rng):
        b = batch_of(rng)
        for mode in ("selfmix", "cutout"):
            assert np.array_equal(regional_dropout(b, mode, rng, prob=0.0).pixels, b.pixels)

    def test_unknown_mode(self, rng):
        with pytest.raises(InvalidArgumentError):
            regional_dropout(batch_of(rng), "mixup", rng)


class TestLabels:
    def test_smoothing(self):
        rows = label_smooth(np.eye(4)[[0, 2]], 0.1)
        np.testing.assert_allclose(rows[0], [0.925, 0.025, 0.025, 0.025])
        np.testing.assert_allclose(rows.sum(axis=1), 1.0)

    def test_cutmix_then_smoothing_sums_to_one(self, rng):
        out = cutmix(batch_of(rng, n=5), rng)
        np.testing.assert_allclose(out.label_rows(5, 0.1).sum(axis=1), 1.0)

    def test_invalid_pixels(self):
        with pytest.raises(InvalidArgumentError):
            ImageBatch(np.full((1, 1, 2, 2), 1.5), [0])


class TestLightAugment:
    def test_range_and_shape(self, rng):
        b = batch_of(rng, n=5)
        out = light_augment(b, rng)
        assert out.pixels.shape == b.pixels.shape
        assert out.pixels.min() >= 0 and out.pixels.max() <= 1
        assert np.array_equal(out.labels, b.labels)

    def test_identity_settings(self, rng):
        b = batch_of(rng)
        out = light_augment(b, rng, crop_pad=0, jitter=0.0, hflip_prob=0.0)
        assert np.array_equal(out.pixels, b.pixels)

    def test_always_flip(self, rng):
        b = batch_of(rng)
        out = light_augment(b, rng, crop_pad=0, jitter=0.0, hflip_prob=1.0)
        assert np.array_equal(out.pixels, b.pixels[:, :, :, ::-1])


def test_sample_destination_inside(rng):
    for _ in range(200):
        r = sample_destination(rng, 7, 5, 3, 4)
        assert r.valid_in(7, 5) and 1 <= r.w <= 4 and 1 <= r.h <= 3
