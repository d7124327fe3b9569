import numpy as np
import pytest
from scipy.stats import chisquare

from cal.synthdata import (
    OBJECT_SIZE,
    DatasetSpec,
    class_codes,
    dataset_from_bytes,
    dataset_to_bytes,
    generate_dataset,
    load_dataset,
    load_dataset_with_manifest,
    make_retrieval_split,
    render,
    save_dataset,
)
from cal.tensor import FormatError

SMALL = DatasetSpec(num_classes=5, samples_per_class=8, test_per_class=4, seed=3)


@pytest.fixture(scope="module")
def unbiased():
    return generate_dataset(DatasetSpec(num_classes=10, samples_per_class=60, test_per_class=60, seed=1))


class TestSpec:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"bias_strength": 1.5},
            {"bias_strength": -0.1},
            {"num_classes": 1},
            {"image_size": 8},
            {"image_size": 34},
            {"samples_per_class": 0},
            {"num_identities": 3},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            generate_dataset(DatasetSpec(**kwargs))

    def test_codes_distinct(self):
        codes = class_codes(20)
        for i in range(20):
            for j in range(i):
                assert (codes[i] != codes[j]).sum() >= 2


class TestSamples:
    def test_structure(self):
        train, test = generate_dataset(SMALL)
        assert len(train) == 40 and len(test) == 20
        for s in train + test:
            assert s.image.shape == (3, 32, 32)
            assert 0 <= s.image.min() and s.image.max() <= 1
            x0, y0, x1, y1 = s.object_bbox
            assert 0 <= x0 < x1 <= 32 and 0 <= y0 < y1 <= 32
            assert x1 - x0 == OBJECT_SIZE
            for cx, cy in s.part_centers:
                assert x0 < cx < x1 and y0 < cy < y1
        assert np.bincount([s.class_label for s in train]).tolist() == [8] * 5

    def test_bias_one(self):
        train, test = generate_dataset(DatasetSpec(num_classes=6, samples_per_class=20, bias_strength=1.0, seed=0))
        assert all(s.background_id == s.class_label for s in train)
        # test backgrounds are drawn independently of the label
        agree = np.mean([s.background_id == s.class_label for s in test])
        assert agree < 0.4
        assert chisquare(np.bincount([s.background_id for s in test], minlength=6)).pvalue > 0.01

    def test_bias_zero_distributions_match(self, unbiased):
        train, test = unbiased
        a = np.bincount([s.background_id for s in train], minlength=10)
        b = np.bincount([s.background_id for s in test], minlength=10)
        # two-sample homogeneity: compare train counts against test proportions
        expected = b / b.sum() * a.sum()
        assert chisquare(a, expected).pvalue > 0.01

    def test_background_alone_is_chance_at_test(self, unbiased):
        _, test = unbiased
        assert np.mean([s.background_id == s.class_label for s in test]) < 0.2

    def test_class_pixels_inside_box(self):
        # same draws, different class layouts: every differing pixel lies in the object box
        codes = class_codes(6)
        for i in range(5):
            a, box, _ = render(codes[i], 2, 32, np.random.default_rng(i))
            b, box_b, _ = render(codes[i + 1], 2, 32, np.random.default_rng(i))
            assert box == box_b
            x0, y0, x1, y1 = box
            diff = np.abs(a - b).max(axis=0) > 0
            assert diff.any()
            diff[y0:y1, x0:x1] = False
            assert not diff.any()

    def test_nearest_centroid_on_object_pixels(self, unbiased):
        train, test = unbiased

        def crop(s):
            x0, y0, x1, y1 = s.object_bbox
            return s.image[:, y0:y1, x0:x1].ravel()

        labels = np.array([s.class_label for s in train])
        feats = np.stack([crop(s) for s in train])
        centroids = np.stack([feats[labels == k].mean(axis=0) for k in range(10)])
        tf = np.stack([crop(s) for s in test])
        pred = ((tf[:, None, :] - centroids[None]) ** 2).sum(axis=2).argmin(axis=1)
        assert (pred == np.array([s.class_label for s in test])).mean() == 1.0

    def test_deterministic_and_thread_independent(self):
        a = dataset_to_bytes(generate_dataset(SMALL)[0])
        b = dataset_to_bytes(generate_dataset(SMALL)[0])
        c = dataset_to_bytes(generate_dataset(SMALL, threads=3)[0])
        assert a == b == c

    def test_seed_matters(self):
        a = generate_dataset(SMALL)[0][0].image
        b = generate_dataset(DatasetSpec(num_classes=5, samples_per_class=8, test_per_class=4, seed=4))[0][0].image
        assert not np.array_equal(a, b)


class TestRetrieval:
    def test_minimal(self):
        train, query, gallery = make_retrieval_split(DatasetSpec(num_identities=4, views_per_identity=2))
        assert len(train) == 4 and len(query) == 2 and len(gallery) == 2

    @pytest.mark.parametrize("seed", range(5))
    def test_disjoint_and_covered(self, seed):
        rng = np.random.default_rng(seed)
        spec = DatasetSpec(num_identities=int(rng.integers(4, 12)), views_per_identity=int(rng.integers(2, 5)), seed=seed)
        train, query, gallery = make_retrieval_split(spec)
        train_ids = {s.identity_label for s in train}
        test_ids = {s.identity_label for s in query} | {s.identity_label for s in gallery}
        assert not train_ids & test_ids
        assert {s.identity_label for s in query} == {s.identity_label for s in gallery}
        assert len(query) == len(test_ids)
        gallery_bytes = {s.image.tobytes() for s in gallery}
        assert all(q.image.tobytes() not in gallery_bytes for q in query)

    def test_too_few(self):
        with pytest.raises(ValueError):
            make_retrieval_split(DatasetSpec(num_identities=0))


class TestFiles:
    def test_round_trip(self, tmp_path):
        samples = generate_dataset(DatasetSpec(num_classes=2, samples_per_class=5, seed=0))[0]
        save_dataset(samples, tmp_path / "d.cald", manifest={"note": "x"})
        back, manifest = load_dataset_with_manifest(tmp_path / "d.cald")
        assert back == samples and manifest["note"] == "x"

    def test_retrieval_labels_survive(self, tmp_path):
        _, query, _ = make_retrieval_split(DatasetSpec(num_identities=4, views_per_identity=2))
        save_dataset(query, tmp_path / "q.cald")
        assert [s.identity_label for s in load_dataset(tmp_path / "q.cald")] == [s.identity_label for s in query]

    def test_empty(self):
        assert dataset_from_bytes(dataset_to_bytes([]))[0] == []

    def test_truncation(self):
        buf = dataset_to_bytes(generate_dataset(SMALL)[1][:3])
        for cut in (0, 4, 5, 20, len(buf) // 2, len(buf) - 1):
            with pytest.raises(FormatError):
                dataset_from_bytes(buf[:cut])

    def test_bad_magic_and_version(self):
        buf = dataset_to_bytes([])
        with pytest.raises(FormatError, match="magic"):
            dataset_from_bytes(b"NOPE" + buf[4:])
        with pytest.raises(FormatError, match="version"):
            dataset_from_bytes(buf[:4] + b"\x09" + buf[5:])
