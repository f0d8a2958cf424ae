import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anw.data import (
    CIFAR_NORM,
    LabeledDataset,
    NormalizationSpec,
    denormalize,
    generate_synthetic,
    normalize,
    read_cifar10,
    read_dataset,
    split_users,
    write_dataset,
)
from anw.errors import FormatError


def cifar_record(label, pixels=None):
    pixels = bytes(3072) if pixels is None else pixels
    return bytes([label]) + pixels


class TestSynthetic:
    def test_balanced_classes(self):
        ds = generate_synthetic(1000, 32, 32, 10, seed=7)
        assert len(ds) == 1000
        assert np.bincount(ds.labels, minlength=10).tolist() == [100] * 10

    def test_deterministic(self):
        a = generate_synthetic(50, 16, 16, 10, seed=3)
        b = generate_synthetic(50, 16, 16, 10, seed=3)
        assert a.equals(b)

    def test_seed_changes_output(self):
        a = generate_synthetic(20, 16, 16, 10, seed=3)
        b = generate_synthetic(20, 16, 16, 10, seed=4)
        assert not a.equals(b)

    def test_unbalanced_count_within_one(self):
        counts = np.bincount(generate_synthetic(103, 8, 8, 10, seed=0).labels, minlength=10)
        assert counts.max() - counts.min() <= 1

    def test_values_on_byte_grid(self):
        ds = generate_synthetic(10, 16, 16, 4, seed=0)
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        on_grid = np.rint(ds.images * 255).astype(np.float32) / np.float32(255)
        np.testing.assert_array_equal(on_grid, ds.images)

    def test_many_classes(self):
        ds = generate_synthetic(40, 16, 16, 20, seed=0)
        assert ds.labels.max() == 19

    @pytest.mark.parametrize("args", [(0, 32, 32, 10), (10, 32, 32, 0), (10, 4, 32, 10)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            generate_synthetic(*args, seed=0)


class TestCifar:
    def test_single_record(self, tmp_path):
        p = tmp_path / "b.bin"
        p.write_bytes(cifar_record(5))
        ds = read_cifar10(p)
        assert len(ds) == 1 and ds.labels[0] == 5
        assert ds.images.shape == (1, 32, 32, 3)

    def test_all_255(self, tmp_path):
        p = tmp_path / "b.bin"
        p.write_bytes(cifar_record(1, bytes([255]) * 3072))
        assert np.all(read_cifar10(p).images == 1.0)

    def test_planar_layout(self, tmp_path):
        # R plane = 10, G plane = 20, B plane = 30, and one marked pixel at (row 1, col 2)
        planes = bytearray([10] * 1024 + [20] * 1024 + [30] * 1024)
        planes[1 * 32 + 2] = 200
        planes[1024 + 1 * 32 + 2] = 201
        planes[2048 + 1 * 32 + 2] = 202
        p = tmp_path / "b.bin"
        p.write_bytes(cifar_record(0, bytes(planes)))
        img = read_cifar10(p).images[0]
        np.testing.assert_allclose(img[0, 0], np.array([10, 20, 30]) / 255, rtol=0, atol=1e-7)
        np.testing.assert_allclose(img[1, 2], np.array([200, 201, 202]) / 255, rtol=0, atol=1e-7)

    def test_stray_byte_offset(self, tmp_path):
        p = tmp_path / "b.bin"
        p.write_bytes(cifar_record(1) + cifar_record(2) + b"\x00")
        assert p.stat().st_size == 6147
        with pytest.raises(FormatError) as exc:
            read_cifar10(p)
        assert exc.value.offset == 6146

    def test_bad_label(self, tmp_path):
        p = tmp_path / "b.bin"
        p.write_bytes(cifar_record(3) + cifar_record(10))
        with pytest.raises(FormatError) as exc:
            read_cifar10(p)
        assert exc.value.offset == 3073

    def test_count_matches_length(self, tmp_path):
        p = tmp_path / "b.bin"
        p.write_bytes(b"".join(cifar_record(i % 10) for i in range(7)))
        assert len(read_cifar10(p)) == p.stat().st_size // 3073


class TestCustomFormat:
    def test_roundtrip(self, tmp_path):
        ds = generate_synthetic(30, 16, 8, 5, seed=1)
        write_dataset(ds, tmp_path / "d.anw")
        assert read_dataset(tmp_path / "d.anw").equals(ds)

    def test_header_layout(self, tmp_path):
        ds = generate_synthetic(4, 8, 12, 3, seed=1)
        write_dataset(ds, tmp_path / "d.anw")
        raw = (tmp_path / "d.anw").read_bytes()
        assert raw[:4] == b"ANW1"
        assert struct.unpack_from("<5I", raw, 4) == (4, 8, 12, 3, 3)
        assert len(raw) == 24 + 2 * 4 + 4 * 8 * 12 * 3

    def test_bad_magic(self, tmp_path):
        ds = generate_synthetic(4, 8, 8, 3, seed=1)
        write_dataset(ds, tmp_path / "d.anw")
        raw = bytearray((tmp_path / "d.anw").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "d.anw").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            read_dataset(tmp_path / "d.anw")

    def test_zero_classes(self, tmp_path):
        ds = generate_synthetic(4, 8, 8, 3, seed=1)
        write_dataset(ds, tmp_path / "d.anw")
        raw = bytearray((tmp_path / "d.anw").read_bytes())
        raw[20:24] = struct.pack("<I", 0)
        (tmp_path / "d.anw").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="num_classes"):
            read_dataset(tmp_path / "d.anw")

    def test_truncated(self, tmp_path):
        ds = generate_synthetic(4, 8, 8, 3, seed=1)
        write_dataset(ds, tmp_path / "d.anw")
        raw = (tmp_path / "d.anw").read_bytes()
        (tmp_path / "d.anw").write_bytes(raw[:-5])
        with pytest.raises(FormatError, match="pixels"):
            read_dataset(tmp_path / "d.anw")

    def test_bad_channels(self, tmp_path):
        ds = generate_synthetic(4, 8, 8, 3, seed=1)
        write_dataset(ds, tmp_path / "d.anw")
        raw = bytearray((tmp_path / "d.anw").read_bytes())
        raw[16:20] = struct.pack("<I", 4)
        (tmp_path / "d.anw").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="channels"):
            read_dataset(tmp_path / "d.anw")

    def test_empty_refused(self, tmp_path):
        empty = LabeledDataset(np.zeros((0, 8, 8, 3), np.float32), np.zeros(0), 3)
        with pytest.raises(ValueError):
            write_dataset(empty, tmp_path / "d.anw")

    @settings(max_examples=25, deadline=None)
    @given(
        n=st.integers(1, 5),
        h=st.integers(1, 6),
        w=st.integers(1, 6),
        classes=st.integers(1, 300),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_roundtrip_property(self, tmp_path_factory, n, h, w, classes, seed):
        rng = np.random.default_rng(seed)
        images = rng.integers(0, 256, size=(n, h, w, 3)).astype(np.float32) / np.float32(255)
        ds = LabeledDataset(images, rng.integers(0, classes, size=n), classes)
        path = tmp_path_factory.mktemp("rt") / "d.anw"
        write_dataset(ds, path)
        assert read_dataset(path).equals(ds)


class TestSplitUsers:
    def test_even(self):
        parts = split_users(100, 10, seed=0)
        assert [len(p) for p in parts] == [10] * 10

    def test_remainder(self):
        sizes = sorted(len(p) for p in split_users(101, 10, seed=0))
        assert sizes == [10] * 9 + [11]

    def test_deterministic(self):
        a = split_users(57, 6, seed=9)
        b = split_users(57, 6, seed=9)
        assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 300), users=st.integers(1, 300), seed=st.integers(0, 10**6))
    def test_disjoint_cover(self, n, users, seed):
        if users > n:
            with pytest.raises(ValueError):
                split_users(n, users, seed)
            return
        parts = split_users(n, users, seed)
        allidx = np.concatenate([p.indices for p in parts])
        assert sorted(allidx.tolist()) == list(range(n))
        sizes = [len(p) for p in parts]
        assert max(sizes) - min(sizes) <= 1

    def test_zero_users(self):
        with pytest.raises(ValueError):
            split_users(10, 0)

    def test_accepts_dataset(self):
        ds = generate_synthetic(20, 8, 8, 2, seed=0)
        assert len(split_users(ds, 4, 0)) == 4


class TestNormalize:
    def test_half_gray_to_zero(self):
        img = np.full((4, 4, 3), 0.5, dtype=np.float32)
        np.testing.assert_array_equal(normalize(img, CIFAR_NORM), 0.0)

    def test_identity(self):
        img = np.random.default_rng(0).random((5, 5, 3))
        spec = NormalizationSpec((0, 0, 0), (1, 1, 1))
        np.testing.assert_allclose(normalize(img, spec, dtype=np.float64), img)

    def test_inverse(self):
        img = np.random.default_rng(1).random((3, 6, 6, 3))
        spec = NormalizationSpec((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))
        back = denormalize(normalize(img, spec, np.float64), spec, np.float64)
        np.testing.assert_allclose(back, img, atol=1e-6)

    def test_linear(self):
        rng = np.random.default_rng(2)
        x, y = rng.random((2, 4, 4, 3))
        spec = NormalizationSpec((0.1, 0.2, 0.3), (0.4, 0.5, 0.6))
        n = lambda z: normalize(z, spec, np.float64)
        # affine map: n(a x + b y) = a n(x) + b n(y) + (a + b - 1) * mean/std
        a, b = 0.3, 0.9
        offset = (a + b - 1) * np.array(spec.mean) / np.array(spec.std)
        np.testing.assert_allclose(n(a * x + b * y), a * n(x) + b * n(y) + offset, atol=1e-12)

    def test_bad_std(self):
        with pytest.raises(ValueError):
            NormalizationSpec((0, 0, 0), (1, 0, 1))
