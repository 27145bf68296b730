import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from supmixlab.data import (
    CHASE_RATIOS,
    COVID_RATIOS,
    LABELED,
    TEST,
    UNLABELED,
    DatasetManifest,
    FormatError,
    SyntheticSpec,
    chase_like,
    covid_like,
    decode_pgm,
    decode_ppm,
    encode_pgm,
    encode_ppm,
    generate_blob_dataset,
    generate_vessel_dataset,
    labeled_count,
    load_split,
    read_sample,
    split_dataset,
    write_sample,
)
from supmixlab.evaluation import pixel_ratios
from supmixlab.numerics import IGNORE_INDEX


@pytest.fixture(scope="module")
def vessel(tmp_path_factory):
    root = tmp_path_factory.mktemp("vessel")
    return generate_vessel_dataset(chase_like(n_train=24, n_test=4, seed=3), root)


@pytest.fixture(scope="module")
def blob(tmp_path_factory):
    root = tmp_path_factory.mktemp("blob")
    return generate_blob_dataset(covid_like(n_train=72, n_test=8, seed=1), root)


def test_reference_ratios_sum_to_one():
    assert sum(CHASE_RATIOS) == pytest.approx(1.0, abs=1e-9)
    assert sum(COVID_RATIOS) == pytest.approx(1.0, abs=1e-9)


class TestSpec:
    def test_ratio_sum_checked(self):
        with pytest.raises(ValueError, match="sum"):
            SyntheticSpec("x", "blob", (0.5, 0.3, 0.1))

    def test_nonpositive(self):
        with pytest.raises(ValueError):
            SyntheticSpec("x", "vessel", (1.0, 0.0))

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="bogus"):
            SyntheticSpec.from_dict({"name": "x", "style": "vessel", "ratios": [0.9, 0.1], "bogus": 1})

    def test_style_wrapper_mismatch(self, tmp_path):
        with pytest.raises(ValueError):
            generate_blob_dataset(chase_like(n_train=2, n_test=0), tmp_path)


class TestVessel:
    def test_per_sample_fraction(self, vessel):
        _, labels = load_split(vessel, UNLABELED)
        for lbl in labels:
            frac = np.count_nonzero(lbl == 1) / lbl.size
            assert 0.0464 <= frac <= 0.0864

    def test_binary_labels(self, vessel):
        _, labels = load_split(vessel, UNLABELED)
        assert set(np.unique(np.concatenate([l.ravel() for l in labels])).tolist()) <= {0, 1}

    def test_splits(self, vessel):
        assert len(vessel.by_split(UNLABELED)) == 24 and len(vessel.by_split(TEST)) == 4

    def test_regeneration_bytes(self, vessel, tmp_path):
        again = generate_vessel_dataset(chase_like(n_train=24, n_test=4, seed=3), tmp_path)
        assert again.digest() == vessel.digest()
        for a, b in zip(vessel.samples, again.samples):
            for rel in (a.image, a.label):
                assert (vessel.root / rel).read_bytes() == (tmp_path / rel).read_bytes()

    def test_hashes_recorded(self, vessel):
        s = vessel.samples[0]
        assert hashlib.sha256((vessel.root / s.image).read_bytes()).hexdigest() == s.image_sha256

    def test_ratio_recount_agrees(self, vessel):
        labels = [read_sample(vessel.path(s.image), vessel.path(s.label))[1] for s in vessel.samples]
        assert pixel_ratios(labels, 2) == pytest.approx(vessel.achieved_ratios, abs=1e-12)


class TestBlob:
    def test_dataset_mean_within_relative_tolerance(self, blob):
        for got, want in zip(blob.achieved_ratios, COVID_RATIOS):
            assert abs(got - want) <= 0.2 * want

    def test_class1_window(self, blob):
        assert 0.0171 <= blob.achieved_ratios[1] <= 0.0257

    def test_rare_class_scarce(self, blob):
        labels = [read_sample(blob.path(s.image), blob.path(s.label))[1] for s in blob.samples]
        hosts = sum(bool((l == 3).any()) for l in labels)
        assert 1 <= hosts < len(labels) / 2

    def test_ratio_recount_agrees(self, blob):
        labels = [read_sample(blob.path(s.image), blob.path(s.label))[1] for s in blob.samples]
        assert pixel_ratios(labels, 4) == pytest.approx(blob.achieved_ratios, abs=1e-12)


class TestSplit:
    def _manifest(self, n):
        from supmixlab.data import Sample

        samples = [Sample(f"i{i}", f"l{i}", UNLABELED, i) for i in range(n)]
        samples.append(Sample("t", "t", TEST, n))
        return DatasetManifest("m", 2, ["a", "b"], 8, 0, samples)

    @pytest.mark.parametrize("ratio,count", [(1 / 8, 2), (1 / 4, 5), (1.0, 23)])
    def test_paper_counts(self, ratio, count):
        m = split_dataset(self._manifest(23), ratio, seed=0)
        assert len(m.by_split(LABELED)) == count
        assert len(m.by_split(UNLABELED)) == 23 - count
        assert len(m.by_split(TEST)) == 1

    def test_minimum_one(self):
        assert labeled_count(3, 1 / 8) == 1

    def test_empty_train(self):
        from supmixlab.data import Sample

        m = DatasetManifest("m", 2, ["a", "b"], 8, 0, [Sample("t", "t", TEST, 0)])
        with pytest.raises(ValueError):
            split_dataset(m, 0.5, 0)

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            split_dataset(self._manifest(4), 0.0, 0)

    def test_seed_dependence_and_input_untouched(self):
        m = self._manifest(40)
        before = m.to_json()
        a = {s.index for s in split_dataset(m, 0.25, 1).by_split(LABELED)}
        b = {s.index for s in split_dataset(m, 0.25, 1).by_split(LABELED)}
        assert a == b
        assert m.to_json() == before

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 60), st.sampled_from([1 / 8, 1 / 4, 0.5]), st.integers(0, 1000))
    def test_partition(self, n, ratio, seed):
        m = split_dataset(self._manifest(n), ratio, seed)
        lab = {s.index for s in m.by_split(LABELED)}
        unl = {s.index for s in m.by_split(UNLABELED)}
        assert not lab & unl and len(lab | unl) == n
        assert len(lab) == labeled_count(n, ratio)


class TestNetpbm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(3, 5, 7))
        lbl = rng.integers(0, 4, (5, 7)).astype(np.uint8)
        lbl[0, 0] = IGNORE_INDEX
        write_sample(tmp_path / "a.ppm", tmp_path / "a.pgm", img, lbl)
        img2, lbl2 = read_sample(tmp_path / "a.ppm", tmp_path / "a.pgm")
        assert lbl2.tobytes() == lbl.tobytes()
        assert np.abs(img2 - img).max() <= 0.5 / 255 + 1e-7
        assert lbl2[0, 0] == IGNORE_INDEX

    def test_header_with_comment(self):
        buf = b"P5\n# note\n2 1\n255\n" + bytes([1, 255])
        np.testing.assert_array_equal(decode_pgm(buf), [[1, 255]])

    def test_truncated(self):
        buf = encode_ppm(np.zeros((3, 4, 4)))
        with pytest.raises(FormatError, match="byte"):
            decode_ppm(buf[:-1])

    def test_trailing(self):
        with pytest.raises(FormatError):
            decode_pgm(encode_pgm(np.zeros((2, 2), np.uint8)) + b"x")

    def test_bad_magic_offset(self):
        with pytest.raises(FormatError) as err:
            decode_pgm(b"P6\n1 1\n255\n\0")
        assert err.value.offset == 0

    def test_bad_maxval(self):
        with pytest.raises(FormatError, match="maxval"):
            decode_pgm(b"P5\n1 1\n15\n\0")

    def test_extent_mismatch(self, tmp_path):
        write_sample(tmp_path / "a.ppm", tmp_path / "a.pgm", np.zeros((3, 4, 4)), np.zeros((4, 4), np.uint8))
        with pytest.raises(FormatError):
            read_sample(tmp_path / "a.ppm", tmp_path / "a.pgm", expected_size=8)

    def test_manifest_reload(self, vessel):
        again = DatasetManifest.load(vessel.root)
        assert again.digest() == vessel.digest()
