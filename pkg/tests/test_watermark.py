import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anw.watermark import (
    BlueChannelKey,
    ColorBasis,
    WatermarkKey,
    blue_channel_watermark,
    lct,
    lct_derivative,
    luminance,
    random_blue_key,
    random_positions,
    random_user_basis,
    rotation_derivative,
    rotation_matrix,
    watermark_image,
    yiq_matrix,
)

# exact value from tests/oracles/lct_pixel_oracle.py (rational arithmetic, cos/sin 60 in closed form)
ORACLE_K60_RED = (
    0.7939786331645737952314802295044101525130,
    -0.1345229501639243393413141023307574445178,
    1.233029477456280898413498153038034950268,
)

angles = st.floats(-720, 720, allow_nan=False)


def yiq_key(k):
    return WatermarkKey(yiq_matrix(), k)


class TestYiq:
    def test_row0_exact(self):
        assert yiq_matrix().matrix[0].tolist() == [0.299, 0.587, 0.114]

    def test_all_rows(self):
        np.testing.assert_array_equal(
            yiq_matrix().matrix,
            [[0.299, 0.587, 0.114], [0.596, -0.275, -0.321], [0.212, -0.523, 0.311]],
        )

    def test_inverse(self):
        b = yiq_matrix()
        np.testing.assert_allclose(b.matrix @ b.inverse, np.eye(3), atol=1e-9)

    @pytest.mark.parametrize("c", [0.0, 0.2, 0.5, 1.0])
    def test_gray_has_no_chroma(self, c):
        yiq = yiq_matrix().matrix @ np.full(3, c)
        assert abs(yiq[0] - c) < 1e-12
        assert abs(yiq[1]) <= 1e-3 * max(c, 1e-12) and abs(yiq[2]) <= 1e-3 * max(c, 1e-12)


class TestRotation:
    def test_zero(self):
        np.testing.assert_array_equal(rotation_matrix(0), np.eye(3))

    def test_half_turn(self):
        np.testing.assert_allclose(rotation_matrix(180), np.diag([1.0, -1.0, -1.0]), atol=1e-15)

    @given(angles, angles)
    def test_group(self, a, b):
        np.testing.assert_allclose(rotation_matrix(a) @ rotation_matrix(b), rotation_matrix(a + b), atol=1e-9)

    @given(angles)
    def test_fixes_y(self, k):
        r = rotation_matrix(k)
        np.testing.assert_array_equal(r[0], [1, 0, 0])
        np.testing.assert_array_equal(r[:, 0], [1, 0, 0])

    @given(angles)
    def test_derivative_matches_difference(self, k):
        h = 1e-5
        fd = (rotation_matrix(k + h) - rotation_matrix(k - h)) / (2 * h)
        np.testing.assert_allclose(rotation_derivative(k), fd, atol=1e-9)


class TestLct:
    def test_zero_is_identity(self):
        np.testing.assert_allclose(lct(yiq_key(0)), np.eye(3), atol=1e-9)

    def test_full_turn_is_identity(self):
        np.testing.assert_allclose(lct(yiq_key(360)), np.eye(3), atol=1e-8)

    @given(angles)
    def test_inverse(self, k):
        np.testing.assert_allclose(lct(yiq_key(k)) @ lct(yiq_key(-k)), np.eye(3), atol=1e-8)

    @given(angles, angles)
    def test_composition(self, a, b):
        np.testing.assert_allclose(lct(yiq_key(a)) @ lct(yiq_key(b)), lct(yiq_key(a + b)), atol=1e-8)

    @settings(max_examples=50)
    @given(angles, st.lists(st.floats(0, 1), min_size=3, max_size=3))
    def test_luminance_preserved(self, k, pixel):
        v = np.array(pixel)
        np.testing.assert_allclose(yiq_matrix().matrix[0] @ (lct(yiq_key(k)) @ v), yiq_matrix().matrix[0] @ v, atol=1e-9)

    def test_red_pixel_oracle(self):
        out = lct(yiq_key(60)) @ np.array([1.0, 0.0, 0.0])
        np.testing.assert_allclose(out, ORACLE_K60_RED, rtol=0, atol=1e-12)

    def test_user_basis_group(self):
        b = random_user_basis(np.random.default_rng(5))
        np.testing.assert_allclose(lct(WatermarkKey(b, 40)) @ lct(WatermarkKey(b, -40)), np.eye(3), atol=1e-8)

    def test_derivative(self):
        h = 1e-6
        for k in (0.0, 33.0, 200.0):
            fd = (lct(yiq_key(k + h)) - lct(yiq_key(k - h))) / (2 * h)
            np.testing.assert_allclose(lct_derivative(yiq_key(k)), fd, atol=1e-8)

    def test_singular_basis_rejected(self):
        with pytest.raises(ValueError):
            ColorBasis(np.ones((3, 3)))


class TestWatermarkImage:
    def test_gray_unchanged(self):
        img = np.full((6, 6, 3), 0.37)
        for k in (30, 60, 170):
            np.testing.assert_allclose(watermark_image(img, yiq_key(k)), img, atol=1e-6)

    def test_k0_unchanged(self):
        img = np.random.default_rng(0).random((5, 7, 3))
        np.testing.assert_allclose(watermark_image(img, yiq_key(0)), img, atol=1e-6)

    def test_output_in_range_and_new(self):
        img = np.random.default_rng(1).random((8, 8, 3)).astype(np.float32)
        out = watermark_image(img, yiq_key(100))
        assert out is not img and out.dtype == np.float32
        assert out.min() >= 0 and out.max() <= 1

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), angles)
    def test_roundtrip_and_clip_mask(self, seed, k):
        img = np.random.default_rng(seed).random((6, 6, 3))
        raw = watermark_image(img, yiq_key(k), clip=False)
        np.testing.assert_allclose(watermark_image(raw, yiq_key(-k), clip=False), img, atol=1e-5)
        clipped = watermark_image(img, yiq_key(k))
        back = watermark_image(clipped, yiq_key(-k), clip=False)
        saturated = ((raw < 0) | (raw > 1)).any(axis=-1)
        np.testing.assert_allclose(back[~saturated], img[~saturated], atol=1e-5)

    def test_batch_matches_single(self):
        imgs = np.random.default_rng(2).random((3, 4, 4, 3))
        batch = watermark_image(imgs, yiq_key(45))
        for i in range(3):
            np.testing.assert_array_equal(batch[i], watermark_image(imgs[i], yiq_key(45)))


class TestUserBasis:
    def test_reproducible(self):
        a = random_user_basis(np.random.default_rng(11))
        b = random_user_basis(np.random.default_rng(11))
        np.testing.assert_array_equal(a.matrix, b.matrix)

    def test_invariants(self):
        b = random_user_basis(np.random.default_rng(3))
        assert np.all(np.abs(b.matrix) < 1)
        assert abs(np.linalg.det(b.matrix)) > 1e-3
        np.testing.assert_allclose(b.matrix @ b.inverse, np.eye(3), atol=1e-9)

    def test_guard_acceptance_rate(self):
        rng = np.random.default_rng(0)
        dets = np.abs([np.linalg.det(rng.uniform(-1, 1, (3, 3))) for _ in range(1000)])
        assert np.mean(dets > 1e-3) > 0.99

    def test_json_roundtrip(self):
        key = WatermarkKey(random_user_basis(np.random.default_rng(4)), 90.0)
        back = WatermarkKey.from_json(key.to_json())
        np.testing.assert_array_equal(back.basis.matrix, key.basis.matrix)
        assert back.signature == 90.0
        assert "signature" not in key.to_json(include_signature=False)


class TestLuminance:
    @pytest.mark.parametrize("pixel,expected", [((1, 1, 1), 1.0), ((0, 0, 0), 0.0), ((1, 0, 0), 0.299)])
    def test_values(self, pixel, expected):
        assert luminance(np.array(pixel, dtype=np.float64)) == pytest.approx(expected, abs=1e-12)


class TestBlueChannel:
    def test_white_pixel_bit_one(self):
        img = np.ones((4, 4, 3))
        key = BlueChannelKey(0.5, [(1, 2)], [1])
        out = blue_channel_watermark(img, key)
        assert out[1, 2, 2] == pytest.approx(0.5)

    def test_bit_zero_clips(self):
        img = np.ones((4, 4, 3))
        out = blue_channel_watermark(img, BlueChannelKey(0.5, [(0, 0)], [0]))
        assert out[0, 0, 2] == 0.0

    def test_touches_only_listed(self):
        rng = np.random.default_rng(0)
        img = rng.random((64, 64, 3))
        key = random_blue_key(64, 64, 512, 0.3, seed=1)
        out = blue_channel_watermark(img, key)
        changed = out != img
        assert not changed[..., :2].any()
        listed = np.zeros((64, 64), bool)
        listed[key.positions[:, 0], key.positions[:, 1]] = True
        assert not changed[..., 2][~listed].any()
        lum = luminance(img[listed])
        sign = 2 * key.bits[np.lexsort((key.positions[:, 1], key.positions[:, 0]))] - 1
        np.testing.assert_allclose(out[..., 2][listed], np.clip(sign * 0.3 * lum, 0, 1))

    def test_out_of_bounds(self):
        with pytest.raises(ValueError):
            blue_channel_watermark(np.zeros((4, 4, 3)), BlueChannelKey(0.5, [(4, 0)], [1]))

    def test_key_validation(self):
        with pytest.raises(ValueError):
            BlueChannelKey(0.5, [(0, 0), (0, 0)], [1, 0])
        with pytest.raises(ValueError):
            BlueChannelKey(0.5, [(0, 0)], [2])

    def test_stack(self):
        imgs = np.random.default_rng(3).random((2, 8, 8, 3))
        key = random_blue_key(8, 8, 10, 0.3, seed=0)
        out = blue_channel_watermark(imgs, key)
        np.testing.assert_array_equal(out[1], blue_channel_watermark(imgs[1], key))


class TestPositions:
    def test_full_permutation(self):
        pos = random_positions(5, 7, 35, seed=0)
        assert sorted(map(tuple, pos.tolist())) == [(r, c) for r in range(5) for c in range(7)]

    def test_deterministic(self):
        np.testing.assert_array_equal(random_positions(64, 64, 512, 3), random_positions(64, 64, 512, 3))

    def test_unique_512(self):
        pos = random_positions(64, 64, 512, 9)
        assert len({tuple(p) for p in pos.tolist()}) == 512

    def test_too_many(self):
        with pytest.raises(ValueError):
            random_positions(4, 4, 17, 0)
