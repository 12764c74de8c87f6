"""Cube container, file format, whitening, patches, and splits."""

import struct
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hsicaps.data import (
    CubeFormatError,
    HsiCube,
    apply_whitening,
    extract_patch,
    extract_patches,
    fit_whitening,
    invert_whitening,
    load_cube,
    make_synthetic_cube,
    reflect_index,
    save_cube,
    stratified_split,
)

from conftest import nearest_centroid_accuracy


def random_cube(seed=0, height=6, width=5, channels=4, num_classes=3):
    rng = np.random.default_rng(seed)
    # draw values already representable in float32 so file round trips are exact
    values = rng.normal(size=(height, width, channels)).astype(np.float32).astype(np.float64)
    labels = rng.integers(0, num_classes + 1, (height, width)).astype(np.int32)
    return HsiCube(values, labels)


class TestHsiCube:
    def test_validation(self):
        with pytest.raises(ValueError):
            HsiCube(np.zeros((3, 3)), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            HsiCube(np.zeros((3, 3, 2)), np.zeros((4, 3)))
        with pytest.raises(ValueError):
            HsiCube(np.zeros((3, 3, 2)), np.full((3, 3), -1))

    def test_histogram_and_coords(self):
        labels = np.array([[0, 1], [2, 1]])
        cube = HsiCube(np.zeros((2, 2, 3)), labels)
        assert cube.class_histogram() == {0: 1, 1: 2, 2: 1}
        assert cube.num_classes() == 2
        np.testing.assert_array_equal(cube.labeled_coords(1), [[0, 1], [1, 1]])


class TestCubeFile:
    def test_round_trip(self, tmp_path):
        cube = random_cube()
        path = tmp_path / "c.hsic"
        save_cube(cube, str(path))
        loaded = load_cube(str(path))
        np.testing.assert_array_equal(loaded.values, cube.values)
        np.testing.assert_array_equal(loaded.labels, cube.labels)

    def test_unlabeled_round_trip(self, tmp_path):
        cube = HsiCube(random_cube().values, np.zeros((6, 5), dtype=np.int32))
        path = tmp_path / "c.hsic"
        save_cube(cube, str(path))
        loaded = load_cube(str(path))
        assert loaded.num_classes() == 0
        np.testing.assert_array_equal(loaded.labels, 0)
        # the label block is omitted entirely
        assert path.stat().st_size == 18 + 6 * 5 * 4 * 4

    def test_exact_byte_layout(self, tmp_path):
        values = np.arange(4, dtype=np.float64).reshape(1, 2, 2)
        labels = np.array([[3, 7]], dtype=np.int32)
        path = tmp_path / "c.hsic"
        save_cube(HsiCube(values, labels), str(path))
        expected = (
            b"HSIC"
            + struct.pack("<BIIIB", 1, 1, 2, 2, 1)
            + np.array([0, 1, 2, 3], dtype="<f4").tobytes()
            + np.array([3, 7], dtype="<u2").tobytes()
        )
        assert path.read_bytes() == expected

    def test_bad_magic_offset_zero(self, tmp_path):
        path = tmp_path / "bad.hsic"
        path.write_bytes(b"NOPE" + bytes(32))
        with pytest.raises(CubeFormatError) as err:
            load_cube(str(path))
        assert err.value.offset == 0
        assert "magic" in str(err.value)

    def test_truncated_payload_reports_offset(self, tmp_path):
        cube = random_cube()
        path = tmp_path / "c.hsic"
        save_cube(cube, str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(CubeFormatError) as err:
            load_cube(str(path))
        assert "truncated" in str(err.value)
        assert err.value.offset == len(blob) - 10

    def test_trailing_bytes_rejected(self, tmp_path):
        cube = random_cube()
        path = tmp_path / "c.hsic"
        save_cube(cube, str(path))
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CubeFormatError) as err:
            load_cube(str(path))
        assert "mismatch" in str(err.value)

    def test_bad_version_and_dimensions(self, tmp_path):
        path = tmp_path / "c.hsic"
        path.write_bytes(b"HSIC" + struct.pack("<BIIIB", 9, 1, 1, 1, 0) + bytes(4))
        with pytest.raises(CubeFormatError) as err:
            load_cube(str(path))
        assert err.value.offset == 4
        path.write_bytes(b"HSIC" + struct.pack("<BIIIB", 1, 0, 1, 1, 0))
        with pytest.raises(CubeFormatError):
            load_cube(str(path))


class TestWhitening:
    def correlated_cube(self, seed=0, height=40, width=50, channels=12):
        rng = np.random.default_rng(seed)
        mixing = rng.normal(size=(channels, channels))
        latent = rng.normal(size=(height * width, channels))
        values = (latent @ mixing.T + rng.normal(size=channels)).reshape(
            height, width, channels
        )
        return HsiCube(values, np.zeros((height, width), dtype=np.int32))

    def test_output_population_is_white(self):
        cube = self.correlated_cube()
        transform = fit_whitening(cube, epsilon=1e-12)
        out = apply_whitening(cube, transform)
        pixels = out.values.reshape(-1, cube.channels)
        assert np.abs(pixels.mean(axis=0)).max() < 1e-9
        cov = pixels.T @ pixels / pixels.shape[0]
        assert np.abs(cov - np.eye(cube.channels)).max() < 1e-6

    def test_components_ordered_by_decreasing_variance(self):
        cube = self.correlated_cube(seed=4)
        transform = fit_whitening(cube, epsilon=1e-12)
        # inv_sqrt_eigs grows as the eigenvalues shrink
        assert (np.diff(transform.inv_sqrt_eigs) >= 0).all()

    def test_inverse_recovers_pixels(self):
        cube = self.correlated_cube(seed=2)
        transform = fit_whitening(cube)
        restored = invert_whitening(apply_whitening(cube, transform), transform)
        np.testing.assert_allclose(restored.values, cube.values, atol=1e-6)

    def test_constant_channel_stays_finite(self):
        cube = self.correlated_cube(seed=1)
        cube.values[:, :, 3] = 42.0
        transform = fit_whitening(cube, epsilon=1e-5)
        out = apply_whitening(cube, transform)
        assert np.isfinite(out.values).all()

    def test_validation(self):
        small = HsiCube(np.zeros((2, 2, 8)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            fit_whitening(small)  # 4 pixels < 9
        cube = self.correlated_cube()
        with pytest.raises(ValueError):
            fit_whitening(cube, epsilon=0.0)
        transform = fit_whitening(cube)
        other = HsiCube(np.zeros((3, 3, 5)), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            apply_whitening(other, transform)

    def test_non_finite_covariance_raises(self):
        cube = self.correlated_cube()
        cube.values[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            fit_whitening(cube)


def bounce_oracle(index: int, size: int) -> int:
    """Mirror an index into range by simulating the bounces one at a time."""
    if size == 1:
        return 0
    while not 0 <= index < size:
        if index < 0:
            index = -index
        else:
            index = 2 * (size - 1) - index
    return index


class TestReflectIndex:
    def test_known_values(self):
        np.testing.assert_array_equal(
            reflect_index(np.array([-2, -1, 0, 4, 5, 6]), 5), [2, 1, 0, 4, 3, 2]
        )

    @given(st.integers(-30, 30), st.integers(1, 8))
    def test_matches_bounce_oracle(self, index, size):
        assert int(reflect_index(index, size)) == bounce_oracle(index, size)


class TestPatches:
    def test_interior_patch_is_a_slice(self):
        cube = random_cube(height=9, width=9)
        patch = extract_patch(cube, 4, 4, 5)
        np.testing.assert_array_equal(patch.data, cube.values[2:7, 2:7])
        assert patch.label == int(cube.labels[4, 4])
        assert patch.center == (4, 4)

    def test_corner_patch_mirrors(self):
        cube = random_cube(height=6, width=7)
        patch = extract_patch(cube, 0, 0, 3)
        rows = [1, 0, 1]
        cols = [1, 0, 1]
        want = cube.values[np.ix_(rows, cols)]
        np.testing.assert_array_equal(patch.data, want)

    def test_batch_matches_single(self):
        cube = random_cube(height=8, width=11)
        rng = np.random.default_rng(5)
        coords = np.stack(
            [rng.integers(0, 8, 20), rng.integers(0, 11, 20)], axis=1
        )
        batch = extract_patches(cube, coords, 5)
        for idx, (row, col) in enumerate(coords):
            single = extract_patch(cube, int(row), int(col), 5)
            np.testing.assert_array_equal(batch[idx], single.data)

    def test_validation(self):
        cube = random_cube()
        with pytest.raises(ValueError):
            extract_patch(cube, 0, 0, 4)  # even size
        with pytest.raises(ValueError):
            extract_patch(cube, 99, 0, 3)  # outside
        with pytest.raises(ValueError):
            extract_patches(cube, np.array([[0, 99]]), 3)


class TestStratifiedSplit:
    def labeled_cube(self, counts: dict[int, int], width=50):
        total = sum(counts.values())
        height = -(-total // width)
        flat = np.zeros(height * width, dtype=np.int32)
        pos = 0
        for cid, count in counts.items():
            flat[pos : pos + count] = cid
            pos += count
        labels = flat.reshape(height, width)
        return HsiCube(np.zeros((height, width, 1)), labels)

    def test_floor_rule_small_cases(self):
        cube = self.labeled_cube({1: 10, 2: 1, 3: 46})
        split = stratified_split(cube, (0.2, 0.1), seed=0)
        assert split.counts() == {1: (2, 1, 7), 2: (0, 0, 1), 3: (9, 4, 33)}

    def test_partition_is_exact(self):
        cube = self.labeled_cube({1: 37, 2: 12})
        split = stratified_split(cube, (0.2, 0.1), seed=3)
        for cid in (1, 2):
            parts = split.classes[cid]
            combined = np.concatenate([parts.train, parts.val, parts.test])
            combined = set(map(tuple, combined.tolist()))
            want = set(map(tuple, cube.labeled_coords(cid).tolist()))
            assert combined == want
            assert len(parts.train) + len(parts.val) + len(parts.test) == len(want)

    def test_same_seed_reproduces(self):
        cube = self.labeled_cube({1: 30, 2: 25})
        a = stratified_split(cube, (0.2, 0.1), seed=7)
        b = stratified_split(cube, (0.2, 0.1), seed=7)
        for cid in (1, 2):
            np.testing.assert_array_equal(a.classes[cid].train, b.classes[cid].train)
            np.testing.assert_array_equal(a.classes[cid].val, b.classes[cid].val)

    def test_seed_changes_membership_not_counts(self):
        cube = self.labeled_cube({1: 40, 2: 33})
        a = stratified_split(cube, (0.2, 0.1), seed=0)
        b = stratified_split(cube, (0.2, 0.1), seed=1)
        assert a.counts() == b.counts()
        different = any(
            not np.array_equal(a.classes[cid].train, b.classes[cid].train)
            for cid in (1, 2)
        )
        assert different

    def test_empty_class_skipped_with_record(self):
        labels = np.zeros((4, 10), dtype=np.int32)
        labels[0, :] = 1
        labels[1, :] = 3  # class 2 missing
        cube = HsiCube(np.zeros((4, 10, 1)), labels)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            split = stratified_split(cube, (0.2, 0.1), seed=0)
        assert split.skipped == [2]
        assert any("class 2" in str(w.message) for w in caught)
        assert sorted(split.classes) == [1, 3]

    def test_fraction_validation(self):
        cube = self.labeled_cube({1: 10})
        with pytest.raises(ValueError):
            stratified_split(cube, (0.0, 0.1), seed=0)
        with pytest.raises(ValueError):
            stratified_split(cube, (0.7, 0.3), seed=0)

    def test_subset_concatenation_is_class_ordered(self):
        cube = self.labeled_cube({1: 10, 2: 10})
        split = stratified_split(cube, (0.2, 0.1), seed=0)
        coords, labels = split.subset("train")
        assert labels.tolist() == sorted(labels.tolist())
        assert len(coords) == len(labels) == 4


class TestSyntheticCube:
    def test_shapes_and_labels(self):
        cube = make_synthetic_cube(20, 30, 16, 4, seed=0)
        assert cube.values.shape == (20, 30, 16)
        assert cube.num_classes() == 4
        assert (cube.labels >= 1).all()  # fully labeled

    def test_separable_by_nearest_centroid(self):
        cube = make_synthetic_cube(64, 64, 32, 3, noise_sigma=0.25, seed=0)
        split = stratified_split(cube, (0.2, 0.1), seed=0)
        assert nearest_centroid_accuracy(cube, split) >= 0.99

    def test_validation(self):
        with pytest.raises(ValueError):
            make_synthetic_cube(8, 8, 8, 1)
        with pytest.raises(ValueError):
            make_synthetic_cube(8, 8, 8, 2, band_axis=2)
