import numpy as np
import pytest

from mitodet import augment as A
from mitodet.data import KIND_HARD_NEGATIVE, KIND_MITOTIC, Annotation
from mitodet.geometry import Box


def gray(value=0.5, size=8):
    return np.full((size, size, 3), value, dtype=np.float32)


class TestJitter:
    def test_brightness_scales(self):
        params = A.JitterParams(brightness=1.35, contrast=1.0, saturation=1.0, hue_shift=0.0)
        out = A.apply_jitter(gray(0.5), params)
        np.testing.assert_allclose(out, 0.675, atol=1e-6)

    def test_clamped_to_unit_range(self):
        params = A.JitterParams(brightness=1.35, contrast=1.0, saturation=1.0, hue_shift=0.0)
        out = A.apply_jitter(gray(0.9), params)
        assert out.max() <= 1.0

    def test_identity_params_are_noop(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(16, 16, 3)).astype(np.float32)
        params = A.JitterParams(brightness=1.0, contrast=1.0, saturation=1.0, hue_shift=0.0)
        out = A.apply_jitter(img, params)
        assert out is not img
        np.testing.assert_array_equal(out, img)

    def test_contrast_moves_toward_mean(self):
        img = gray(0.5)
        img[0, 0] = 0.9
        params = A.JitterParams(brightness=1.0, contrast=0.5, saturation=1.0, hue_shift=0.0)
        out = A.apply_jitter(img, params)
        spread = out.max() - out.min()
        assert spread < 0.9 - out.min()

    def test_saturation_zero_is_grayscale(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(size=(4, 4, 3)).astype(np.float32)
        params = A.JitterParams(brightness=1.0, contrast=1.0, saturation=0.0, hue_shift=0.0)
        out = A.apply_jitter(img, params)
        np.testing.assert_allclose(out[..., 0], out[..., 1], atol=1e-6)
        np.testing.assert_allclose(out[..., 1], out[..., 2], atol=1e-6)

    def test_hue_full_cycle_is_identity(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0.1, 0.9, size=(6, 6, 3)).astype(np.float32)
        half = A.apply_jitter(img, A.JitterParams(1.0, 1.0, 1.0, 0.5))
        back = A.apply_jitter(half, A.JitterParams(1.0, 1.0, 1.0, 0.5))
        np.testing.assert_allclose(back, img, atol=1e-5)

    def test_draw_count_independent_of_magnitudes(self):
        # two configs, same seed: the geometric draws that follow the
        # jitter draws must line up
        big = A.AugmentConfig(brightness=0.35, contrast=0.2, saturation=0.1, hue=0.1)
        none = A.AugmentConfig(brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0)
        r1 = np.random.default_rng(42)
        r2 = np.random.default_rng(42)
        A.sample_jitter(big, r1)
        A.sample_jitter(none, r2)
        assert r1.uniform() == r2.uniform()

    def test_zero_magnitude_draws_exact_identity_factors(self):
        cfg = A.AugmentConfig(brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0)
        p = A.sample_jitter(cfg, np.random.default_rng(0))
        assert (p.brightness, p.contrast, p.saturation, p.hue_shift) == (1.0, 1.0, 1.0, 0.0)

    def test_rejects_out_of_range_image(self):
        cfg = A.AugmentConfig()
        with pytest.raises(ValueError):
            A.color_jitter(np.full((4, 4, 3), 1.5, dtype=np.float32), cfg,
                           np.random.default_rng(0))


class TestFlips:
    def test_horizontal_known_case(self):
        out = A.flip_boxes_h([[1, 2, 3, 4]], 10)
        np.testing.assert_allclose(out, [[7, 2, 9, 4]])

    def test_vertical_known_case(self):
        out = A.flip_boxes_v([[1, 2, 3, 4]], 10)
        np.testing.assert_allclose(out, [[1, 6, 3, 8]])

    def test_involution(self):
        rng = np.random.default_rng(3)
        xy = rng.uniform(0, 40, size=(20, 2))
        wh = rng.uniform(1, 10, size=(20, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        np.testing.assert_allclose(A.flip_boxes_h(A.flip_boxes_h(boxes, 50), 50), boxes)
        np.testing.assert_allclose(A.flip_boxes_v(A.flip_boxes_v(boxes, 50), 50), boxes)


class TestCrop:
    def test_window_contents(self):
        img = np.arange(8 * 8 * 3, dtype=np.float32).reshape(8, 8, 3) / 300
        win, boxes, kept = A.crop_with_boxes(img, [[2, 2, 5, 5]], 2, 2, 4)
        np.testing.assert_array_equal(win, img[2:6, 2:6])
        np.testing.assert_allclose(boxes, [[0, 0, 3, 3]])
        assert kept.tolist() == [0]

    def test_box_dropped_below_survival_fraction(self):
        img = np.zeros((20, 20, 3), dtype=np.float32)
        # 10x10 box with only a 2x10 sliver inside the window: 20 percent
        _, boxes, kept = A.crop_with_boxes(img, [[0, 0, 10, 10]], 8, 0, 10)
        assert kept.size == 0
        assert boxes.shape == (0, 4)

    def test_rejects_out_of_bounds(self):
        img = np.zeros((8, 8, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            A.crop_with_boxes(img, [], 6, 0, 4)
        with pytest.raises(ValueError):
            A.crop_with_boxes(img, [], 0, 0, 9)


class TestCompose:
    def _annotations(self):
        return (
            Annotation(Box(10, 10, 20, 20), KIND_MITOTIC),
            Annotation(Box(30, 5, 38, 13), KIND_HARD_NEGATIVE),
        )

    def _image(self):
        return np.random.default_rng(9).uniform(size=(48, 48, 3)).astype(np.float32)

    def test_deterministic_under_seed(self):
        cfg = A.AugmentConfig(crop_size=32)
        a_img, a_anns, a_fg = A.compose(self._image(), self._annotations(), cfg, seed=7)
        b_img, b_anns, b_fg = A.compose(self._image(), self._annotations(), cfg, seed=7)
        assert a_img.tobytes() == b_img.tobytes()
        assert a_anns == b_anns
        assert a_fg == b_fg

    def test_different_seeds_differ(self):
        cfg = A.AugmentConfig(crop_size=32)
        a_img, _, _ = A.compose(self._image(), self._annotations(), cfg, seed=7)
        b_img, _, _ = A.compose(self._image(), self._annotations(), cfg, seed=8)
        assert a_img.tobytes() != b_img.tobytes()

    def test_disabled_passthrough(self):
        cfg = A.AugmentConfig(enabled=False)
        img = self._image()
        out, anns, fg = A.compose(img, self._annotations(), cfg, seed=1)
        np.testing.assert_array_equal(out, img)
        assert anns == self._annotations()
        assert fg == 1

    def test_identity_config_reproduces_input(self):
        cfg = A.AugmentConfig(brightness=0.0, contrast=0.0, saturation=0.0,
                              hue=0.0, crop_size=48, flip_h_prob=0.0, flip_v_prob=0.0)
        img = self._image()
        out, anns, fg = A.compose(img, self._annotations(), cfg, seed=3)
        assert out.tobytes() == img.tobytes()
        assert anns == self._annotations()

    def test_kinds_survive(self):
        cfg = A.AugmentConfig(crop_size=48, flip_h_prob=1.0)
        _, anns, _ = A.compose(self._image(), self._annotations(), cfg, seed=0)
        assert {a.kind for a in anns} == {KIND_MITOTIC, KIND_HARD_NEGATIVE}

    def test_foreground_recomputed_after_crop(self):
        # tiny crop from the far corner: no annotations survive
        cfg = A.AugmentConfig(crop_size=4, flip_h_prob=0.0, flip_v_prob=0.0)
        found_empty = False
        for seed in range(40):
            _, anns, fg = A.compose(self._image(), self._annotations(), cfg, seed=seed)
            assert fg == (1 if anns else 0)
            found_empty = found_empty or not anns
        assert found_empty

    def test_boxes_stay_inside_window(self):
        cfg = A.AugmentConfig(crop_size=24)
        for seed in range(30):
            _, anns, _ = A.compose(self._image(), self._annotations(), cfg, seed=seed)
            for a in anns:
                assert 0 <= a.box.x1 <= a.box.x2 <= 24
                assert 0 <= a.box.y1 <= a.box.y2 <= 24


def test_config_validation():
    with pytest.raises(ValueError):
        A.AugmentConfig(hue=0.6)
    with pytest.raises(ValueError):
        A.AugmentConfig(brightness=-0.1)
    with pytest.raises(ValueError):
        A.AugmentConfig(flip_h_prob=1.5)
    with pytest.raises(ValueError):
        A.AugmentConfig(crop_size=0)


def test_sample_jitter_ranges():
    cfg = A.AugmentConfig()  # brightness 0.35, contrast 0.2, saturation 0.1, hue 0.1
    rng = np.random.default_rng(0)
    for _ in range(500):
        p = A.sample_jitter(cfg, rng)
        assert 0.65 <= p.brightness <= 1.35
        assert 0.8 <= p.contrast <= 1.2
        assert 0.9 <= p.saturation <= 1.1
        assert -0.1 <= p.hue_shift <= 0.1
