"""
Test scene storage, band standardisation, patch extraction and splits
"""

import logging

import numpy as np
import pytest

from conftest import mirror
from hsi_rcnet.core.tensor import Tensor
from hsi_rcnet.data.hypercube import (
    INDIAN_PINES_SMALL_CLASSES,
    HyperCube,
    Split,
    SplitSpec,
    extract_batch,
    extract_patch,
    ingest_triplet,
    labels_at,
    load_hypercube,
    save_hypercube,
    split_train_test,
    standardize_bands,
    synthetic_scene,
)
from hsi_rcnet.errors import (
    ConfigError,
    DimensionMismatchError,
    LabelRangeError,
    MalformedHeaderError,
    PatchError,
    SizeMismatchError,
    SplitError,
)

INDIAN_PINES_POPULATIONS = [46, 1428, 830, 237, 483, 730, 28, 478, 20, 972, 2455, 593, 205, 1265, 386, 93]


def write_triplet(directory, h=4, w=4, s=3, k=2, names=("a", "b"), data=None, labels=None):
    dims = directory / "dims.txt"
    dims.write_text(f"{h} {w} {s} {k}\n" + "".join(f"{n}\n" for n in names))
    data_path = directory / "data.csv"
    values = np.arange(h * w * s, dtype=float).reshape(h * w, s) if data is None else data
    np.savetxt(data_path, values, delimiter=",")
    labels_path = directory / "labels.csv"
    np.savetxt(labels_path, np.ones((h, w), dtype=int) if labels is None else labels, delimiter=",", fmt="%d")
    return dims, data_path, labels_path


class TestHyperCube:
    def test_dimensions(self, small_cube):
        assert (small_cube.height, small_cube.width, small_cube.bands) == (4, 4, 3)
        assert small_cube.num_classes == 2

    def test_class_counts(self, small_cube):
        assert small_cube.class_counts() == {1: 7, 2: 8}

    def test_labeled_pixels_are_row_major(self, small_cube):
        pixels = small_cube.labeled_pixels()
        assert len(pixels) == 15
        assert pixels[0].tolist() == [0, 0]
        assert [2, 3] not in pixels.tolist()

    def test_label_out_of_range(self):
        with pytest.raises(LabelRangeError):
            HyperCube(Tensor(np.zeros((2, 2, 1))), np.array([[0, 3], [1, 1]]), ["a", "b"])

    def test_label_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            HyperCube(Tensor(np.zeros((2, 2, 1))), np.zeros((2, 3)), ["a"])

    def test_radiance_rank(self):
        with pytest.raises(DimensionMismatchError):
            HyperCube(Tensor(np.zeros((2, 2))), np.zeros((2, 2)), ["a"])


class TestHSICubeFormat:
    def test_round_trip(self, tmp_path, small_cube):
        path = tmp_path / "scene.hsicube"
        save_hypercube(small_cube, path)
        loaded = load_hypercube(path)
        np.testing.assert_array_equal(loaded.radiance.data, small_cube.radiance.data)
        np.testing.assert_array_equal(loaded.labels, small_cube.labels)
        assert loaded.class_names == ["a", "b"]

    def test_file_size(self, tmp_path, small_cube):
        path = tmp_path / "scene.hsicube"
        save_hypercube(small_cube, path)
        header_length = len(path.read_bytes().split(b"\n", 1)[0]) + 1
        assert path.stat().st_size == header_length + 48 * 4 + 16 * 2

    def test_truncated_payload(self, tmp_path, small_cube):
        path = tmp_path / "scene.hsicube"
        save_hypercube(small_cube, path)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(SizeMismatchError):
            load_hypercube(path)

    @pytest.mark.parametrize(
        "header",
        [
            b"not json\n",
            b"[1, 2]\n",
            b'{"h": 1, "w": 1, "s": 1}\n',
            b'{"h": 0, "w": 1, "s": 1, "k": 1, "class_names": ["a"]}\n',
            b'{"h": 1, "w": 1, "s": 1, "k": 2, "class_names": ["a"]}\n',
            b'{"h": 1, "w": 1, "s": 1, "k": 1, "class_names": ["a"]}',
        ],
    )
    def test_malformed_header(self, tmp_path, header):
        path = tmp_path / "bad.hsicube"
        path.write_bytes(header)
        with pytest.raises(MalformedHeaderError):
            load_hypercube(path)


class TestIngest:
    def test_triplet(self, tmp_path, small_cube):
        dims, data, labels = write_triplet(tmp_path, labels=small_cube.labels)
        cube = ingest_triplet(dims, data, labels)
        np.testing.assert_array_equal(cube.radiance.data, small_cube.radiance.data)
        np.testing.assert_array_equal(cube.labels, small_cube.labels)
        assert cube.class_names == ["a", "b"]

    def test_default_class_names(self, tmp_path):
        dims, data, labels = write_triplet(tmp_path, names=())
        assert ingest_triplet(dims, data, labels).class_names == ["class_1", "class_2"]

    def test_data_shape_mismatch(self, tmp_path):
        dims, data, labels = write_triplet(tmp_path, data=np.zeros((15, 3)))
        with pytest.raises(DimensionMismatchError):
            ingest_triplet(dims, data, labels)

    def test_label_shape_mismatch(self, tmp_path):
        dims, data, labels = write_triplet(tmp_path, labels=np.ones((4, 3), dtype=int))
        with pytest.raises(DimensionMismatchError):
            ingest_triplet(dims, data, labels)

    def test_label_out_of_range(self, tmp_path):
        dims, data, labels = write_triplet(tmp_path, labels=np.full((4, 4), 3))
        with pytest.raises(LabelRangeError):
            ingest_triplet(dims, data, labels)

    def test_bad_dims_line(self, tmp_path):
        dims, data, labels = write_triplet(tmp_path)
        dims.write_text("4 4 three 2\n")
        with pytest.raises(MalformedHeaderError):
            ingest_triplet(dims, data, labels)


class TestStandardize:
    def test_labeled_statistics(self, small_cube):
        out = standardize_bands(small_cube)
        labeled = out.radiance.data[small_cube.labels > 0]
        np.testing.assert_allclose(labeled.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(labeled.std(axis=0), 1.0, atol=1e-5)

    def test_unlabeled_pixels_do_not_contribute(self, small_cube):
        data = small_cube.radiance.data.copy()
        data[2, 3] = 1e6
        altered = HyperCube(Tensor(data), small_cube.labels, small_cube.class_names)
        a = standardize_bands(small_cube).radiance.data
        b = standardize_bands(altered).radiance.data
        mask = small_cube.labels > 0
        np.testing.assert_allclose(a[mask], b[mask], atol=1e-6)

    def test_zero_variance_band(self, small_cube, caplog):
        data = small_cube.radiance.data.copy()
        data[..., 1] = 5.0
        cube = HyperCube(Tensor(data), small_cube.labels, small_cube.class_names)
        with caplog.at_level(logging.WARNING):
            out = standardize_bands(cube)
        assert np.all(out.radiance.data[..., 1] == 0.0)
        assert "zero-variance" in caplog.text

    def test_input_is_not_modified(self, small_cube):
        before = small_cube.radiance.data.copy()
        standardize_bands(small_cube)
        np.testing.assert_array_equal(small_cube.radiance.data, before)


class TestPatches:
    def test_centre_matches_pixel(self, small_cube):
        sample = extract_patch(small_cube, 1, 2, 3)
        assert sample.cube.shape == (3, 3, 3)
        assert sample.label == 2
        assert sample.center == (1, 2)
        np.testing.assert_array_equal(sample.cube.data[1, 1], small_cube.radiance.data[1, 2])

    def test_corner_uses_mirror_padding(self, small_cube):
        sample = extract_patch(small_cube, 0, 0, 3)
        np.testing.assert_array_equal(sample.cube.data[0, 0], small_cube.radiance.data[1, 1])
        np.testing.assert_array_equal(sample.cube.data[0, 1], small_cube.radiance.data[1, 0])

    @pytest.mark.parametrize("s", [1, 3, 5, 7])
    def test_batch_matches_index_oracle(self, small_cube, s):
        indices = small_cube.labeled_pixels()
        batch = extract_batch(small_cube, indices, s)
        assert batch.shape == (len(indices), s, s, 3)
        r = s // 2
        for n, (row, col) in enumerate(indices):
            for i in range(s):
                for j in range(s):
                    expected = small_cube.radiance.data[mirror(row + i - r, 4), mirror(col + j - r, 4)]
                    np.testing.assert_array_equal(batch[n, i, j], expected)

    def test_unlabeled_centre(self, small_cube):
        with pytest.raises(PatchError):
            extract_patch(small_cube, 2, 3, 3)

    def test_outside_scene(self, small_cube):
        with pytest.raises(PatchError):
            extract_patch(small_cube, 4, 0, 3)

    @pytest.mark.parametrize("centre", [(-1, 0), (0, -2), (4, 1), (1, 4)])
    def test_batch_rejects_centres_outside_scene(self, small_cube, centre):
        indices = np.array([[0, 0], centre])
        with pytest.raises(PatchError) as info:
            extract_batch(small_cube, indices, 3)
        assert info.value.details == {"index": 1, "center": list(centre)}

    def test_batch_error_reports_patch_kind(self, small_cube):
        with pytest.raises(PatchError) as info:
            extract_batch(small_cube, np.array([[5, 5], [6, 6]]), 3)
        assert info.value.to_dict()["error"] == "patch_error"
        assert info.value.message.startswith("2 centre(s)")

    @pytest.mark.parametrize("s", [0, 2, 4])
    def test_patch_size_must_be_odd(self, small_cube, s):
        with pytest.raises(PatchError):
            extract_patch(small_cube, 0, 0, s)

    def test_labels_at(self, small_cube):
        assert labels_at(small_cube, np.array([[0, 0], [0, 3], [2, 3]])).tolist() == [1, 2, 0]


def indian_pines_like_scene():
    """A 1-row scene with the Indian Pines class populations in shuffled order"""
    labels = np.concatenate([np.full(n, k) for k, n in enumerate(INDIAN_PINES_POPULATIONS, start=1)])
    labels = np.random.default_rng(0).permutation(labels)[None, :]
    return HyperCube(Tensor(np.zeros(labels.shape + (1,))), labels, [f"c{k}" for k in range(1, 17)])


class TestSplit:
    def test_disjoint_and_complete(self, small_cube):
        split = split_train_test(small_cube, SplitSpec.uniform(2, 3, seed=1))
        train = {tuple(p) for p in split.train.tolist()}
        test = {tuple(p) for p in split.test.tolist()}
        assert not train & test
        assert train | test == {tuple(p) for p in small_cube.labeled_pixels().tolist()}
        assert split.train_counts == {1: 3, 2: 3}
        assert sorted(labels_at(small_cube, split.train).tolist()) == [1, 1, 1, 2, 2, 2]

    def test_same_seed_same_split(self, small_cube):
        a = split_train_test(small_cube, SplitSpec.uniform(2, 3, seed=5))
        b = split_train_test(small_cube, SplitSpec.uniform(2, 3, seed=5))
        np.testing.assert_array_equal(a.train, b.train)
        np.testing.assert_array_equal(a.test, b.test)

    def test_different_seeds_differ(self, toy_scene):
        a = split_train_test(toy_scene, SplitSpec.uniform(3, 20, seed=0))
        b = split_train_test(toy_scene, SplitSpec.uniform(3, 20, seed=1))
        assert not np.array_equal(a.train, b.train)

    def test_whole_class_for_training(self, small_cube):
        split = split_train_test(small_cube, SplitSpec({1: 7, 2: 0}))
        assert len(split.train) == 7
        assert set(labels_at(small_cube, split.test).tolist()) == {2}

    def test_too_many_requested(self, small_cube):
        with pytest.raises(SplitError) as info:
            split_train_test(small_cube, SplitSpec.uniform(2, 8))
        assert info.value.details["class"] == 1

    def test_unknown_class(self, small_cube):
        with pytest.raises(SplitError):
            split_train_test(small_cube, SplitSpec({3: 1}))

    def test_negative_count(self):
        with pytest.raises(ConfigError):
            SplitSpec({1: -1})

    def test_indian_pines_protocol(self):
        cube = indian_pines_like_scene()
        spec = SplitSpec.benchmark_protocol("indian_pines", seed=0)
        assert spec.total == 1560
        split = split_train_test(cube, spec)
        assert len(split.train) == 1560
        assert len(split.test) == sum(INDIAN_PINES_POPULATIONS) - 1560
        counts = np.bincount(labels_at(cube, split.train), minlength=17)
        for k in range(1, 17):
            assert counts[k] == (10 if k in INDIAN_PINES_SMALL_CLASSES else 150)

    def test_other_protocols(self):
        assert SplitSpec.benchmark_protocol("pavia_university").total == 9 * 150
        assert SplitSpec.benchmark_protocol("houston2013").total == 15 * 150
        with pytest.raises(ConfigError):
            SplitSpec.benchmark_protocol("salinas")

    def test_from_settings(self):
        spec = SplitSpec.from_settings({"protocol": "uniform", "train_per_class": 5, "seed": 3, "overrides": {"2": 1}}, 3)
        assert spec.per_class_train == {1: 5, 2: 1, 3: 5}
        assert spec.seed == 3
        assert SplitSpec.from_settings({"protocol": "indian_pines"}, 16).total == 1560

    def test_serialisation(self, small_cube):
        split = split_train_test(small_cube, SplitSpec.uniform(2, 2))
        restored = Split.from_dict(split.to_dict())
        np.testing.assert_array_equal(restored.train, split.train)
        np.testing.assert_array_equal(restored.test, split.test)
        assert restored.train_counts == split.train_counts


class TestSyntheticScene:
    def test_layout(self):
        cube = synthetic_scene(num_classes=3, block=10, gap=4, bands=16)
        assert (cube.height, cube.width, cube.bands) == (10, 38, 16)
        assert cube.class_counts() == {1: 100, 2: 100, 3: 100}
        assert (cube.labels[:, 10:14] == 0).all()

    def test_class_means_are_separated(self):
        cube = synthetic_scene(num_classes=3, separation=3.0, noise=1.0, seed=2)
        data = cube.radiance.data
        means = [data[cube.labels == k].mean() for k in (1, 2, 3)]
        assert means[0] == pytest.approx(0.0, abs=0.3)
        assert means[1] == pytest.approx(3.0, abs=0.3)
        assert means[2] == pytest.approx(6.0, abs=0.3)

    def test_reproducible(self):
        a = synthetic_scene(seed=4).radiance.data
        assert a.tobytes() == synthetic_scene(seed=4).radiance.data.tobytes()

    def test_invalid_extents(self):
        with pytest.raises(ConfigError):
            synthetic_scene(block=0)
