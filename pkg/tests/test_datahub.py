import json

import numpy as np
import pytest
from PIL import Image

from axoseg import datahub
from axoseg.errors import (
    ConfigError,
    DataError,
    DimensionMismatchError,
    DuplicateSampleError,
    EmptyValidationPoolError,
    MissingFileError,
    NonBinaryMaskError,
    OverlappingMasksError,
)


def write_dataset(root, domain_id, n, size=(24, 32), annotated=True, modality="SYNTH"):
    """Write a tiny valid dataset (images + disjoint masks + manifest)."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(hash(domain_id) % 2**32)
    entries = []
    for i in range(n):
        stem = f"img_{i:03d}"
        image = rng.integers(0, 256, size=size, dtype=np.uint8)
        Image.fromarray(image, mode="L").save(root / f"{stem}.png")
        entry = {"id": stem, "image": f"{stem}.png"}
        if annotated:
            axon = np.zeros(size, dtype=bool)
            myelin = np.zeros(size, dtype=bool)
            axon[4:8, 4:8] = True
            myelin[10:14, 10:14] = True
            datahub.save_mask(root / f"{stem}_seg-axon.png", axon)
            datahub.save_mask(root / f"{stem}_seg-myelin.png", myelin)
            entry["axon_mask"] = f"{stem}_seg-axon.png"
            entry["myelin_mask"] = f"{stem}_seg-myelin.png"
        entries.append(entry)
    manifest = {
        "descriptor": {
            "id": domain_id,
            "modality": modality,
            "species": "synthetic",
            "pathology": "none",
            "organ": "none",
            "pixel_size_um": 0.1,
        },
        "samples": entries,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


class TestDescriptor:
    def test_rejects_unknown_modality(self):
        with pytest.raises(DataError, match="modality"):
            datahub.DomainDescriptor(
                id="d", modality="XRAY", species="s", pathology="p", organ="o", pixel_size_um=0.1
            )

    def test_rejects_nonpositive_pixel_size(self):
        with pytest.raises(DataError, match="pixel_size_um"):
            datahub.DomainDescriptor(
                id="d", modality="TEM", species="s", pathology="p", organ="o", pixel_size_um=0.0
            )


class TestMaskIO:
    def test_roundtrip(self, tmp_path):
        mask = np.random.default_rng(0).random((16, 16)) > 0.5
        p = tmp_path / "m.png"
        datahub.save_mask(p, mask)
        assert np.array_equal(datahub.load_mask_array(p), mask)

    def test_non_binary_values_rejected_naming_sample(self, tmp_path):
        arr = np.full((8, 8), 128, dtype=np.uint8)
        p = tmp_path / "m.png"
        Image.fromarray(arr, mode="L").save(p)
        with pytest.raises(NonBinaryMaskError, match="sample 'd/x'"):
            datahub.load_mask_array(p, "d/x")

    def test_multichannel_mask_rejected(self, tmp_path):
        arr = np.zeros((8, 8, 3), dtype=np.uint8)
        p = tmp_path / "m.png"
        Image.fromarray(arr, mode="RGB").save(p)
        with pytest.raises(NonBinaryMaskError, match="single-channel"):
            datahub.load_mask_array(p, "d/x")


class TestIngest:
    def test_happy_path_namespaces_ids(self, tmp_path):
        mp = write_dataset(tmp_path / "demo", "demo", 3)
        ds = datahub.ingest(mp)
        assert ds.id == "demo"
        assert ds.sample_ids == ["demo/img_000", "demo/img_001", "demo/img_002"]
        assert all(s.annotated for s in ds.samples)
        assert ds.samples[0].height == 24 and ds.samples[0].width == 32

    def test_unannotated_samples_allowed(self, tmp_path):
        mp = write_dataset(tmp_path / "raw", "raw", 2, annotated=False)
        ds = datahub.ingest(mp)
        assert all(not s.annotated for s in ds.samples)
        image, axon, myelin = datahub.load_sample_arrays(ds.samples[0])
        assert image.shape == (24, 32) and axon is None and myelin is None

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFileError):
            datahub.ingest(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text("{not json")
        with pytest.raises(DataError, match="JSON"):
            datahub.ingest(p)

    def test_missing_image_names_sample(self, tmp_path):
        mp = write_dataset(tmp_path / "d", "d", 2)
        (tmp_path / "d" / "img_001.png").unlink()
        with pytest.raises(MissingFileError, match="d/img_001"):
            datahub.ingest(mp)

    def test_missing_mask_names_sample(self, tmp_path):
        mp = write_dataset(tmp_path / "d", "d", 2)
        (tmp_path / "d" / "img_000_seg-myelin.png").unlink()
        with pytest.raises(MissingFileError, match="d/img_000"):
            datahub.ingest(mp)

    def test_dimension_mismatch_names_sample(self, tmp_path):
        mp = write_dataset(tmp_path / "d", "d", 1)
        datahub.save_mask(tmp_path / "d" / "img_000_seg-axon.png", np.zeros((10, 10), dtype=bool))
        with pytest.raises(DimensionMismatchError, match="d/img_000"):
            datahub.ingest(mp)

    def test_overlapping_masks_names_sample(self, tmp_path):
        mp = write_dataset(tmp_path / "d", "d", 1)
        overlap = np.zeros((24, 32), dtype=bool)
        overlap[4:12, 4:12] = True  # covers both the axon and myelin squares
        datahub.save_mask(tmp_path / "d" / "img_000_seg-myelin.png", overlap)
        with pytest.raises(OverlappingMasksError, match="d/img_000"):
            datahub.ingest(mp)

    def test_duplicate_ids_rejected(self, tmp_path):
        mp = write_dataset(tmp_path / "d", "d", 2)
        doc = json.loads(mp.read_text())
        doc["samples"][1]["id"] = doc["samples"][0]["id"]
        mp.write_text(json.dumps(doc))
        with pytest.raises(DuplicateSampleError, match="d/img_000"):
            datahub.ingest(mp)


class TestSplit:
    def make(self, tmp_path, n, domain="d"):
        return datahub.ingest(write_dataset(tmp_path / domain, domain, n))

    def test_partition_properties(self, tmp_path):
        ds = self.make(tmp_path, 10)
        ss = datahub.split(ds, ratios=(0.7, 0.1, 0.2), seed=3)
        assert sorted(ss.all_ids) == sorted(ds.sample_ids)
        assert not (set(ss.train) & set(ss.val))
        assert not (set(ss.train) & set(ss.test))
        assert not (set(ss.val) & set(ss.test))
        assert (len(ss.train), len(ss.val), len(ss.test)) == (7, 1, 2)

    def test_deterministic_in_seed(self, tmp_path):
        ds = self.make(tmp_path, 9)
        a = datahub.split(ds, seed=5)
        b = datahub.split(ds, seed=5)
        c = datahub.split(ds, seed=6)
        assert (a.train, a.val, a.test) == (b.train, b.val, b.test)
        assert a.train != c.train

    def test_every_split_nonempty_even_at_extreme_ratios(self, tmp_path):
        ds = self.make(tmp_path, 5)
        ss = datahub.split(ds, ratios=(0.98, 0.01, 0.01), seed=0)
        assert min(len(ss.train), len(ss.val), len(ss.test)) >= 1

    def test_split_sizes_sweep(self):
        for n in range(3, 40):
            for ratios in [(0.7, 0.1, 0.2), (0.6, 0.2, 0.2), (0.98, 0.01, 0.01)]:
                sizes = datahub._split_sizes(n, ratios)
                assert sum(sizes) == n
                assert min(sizes) >= 1

    def test_too_small_dataset(self, tmp_path):
        ds = self.make(tmp_path, 2)
        with pytest.raises(DataError, match="3"):
            datahub.split(ds)

    def test_bad_ratios(self, tmp_path):
        ds = self.make(tmp_path, 6)
        with pytest.raises(ConfigError):
            datahub.split(ds, ratios=(0.5, 0.5))
        with pytest.raises(ConfigError):
            datahub.split(ds, ratios=(0.5, 0.4, 0.2))
        with pytest.raises(ConfigError):
            datahub.split(ds, ratios=(1.0, 0.0, 0.0))


def make_splitset(domain, n_train, n_val, n_test):
    mk = lambda tag, n: [f"{domain}/{tag}{i}" for i in range(n)]
    return datahub.SplitSet(
        domain_id=domain,
        train=mk("tr", n_train),
        val=mk("va", n_val),
        test=mk("te", n_test),
        seed=0,
        ratios=(0.7, 0.1, 0.2),
    )


class TestAggregate:
    def test_test_set_is_exact_union(self):
        a, b = make_splitset("a", 4, 1, 2), make_splitset("b", 3, 2, 3)
        agg = datahub.aggregate([a, b])
        assert sorted(agg.test) == sorted(a.test + b.test)
        assert sorted(agg.train) == sorted(a.train + b.train)
        assert agg.sources == ["a", "b"]

    def test_every_source_represented_in_val(self):
        sources = [make_splitset(d, 4, 2, 1) for d in "abc"]
        agg = datahub.aggregate(sources)
        val_domains = {sid.split("/")[0] for sid in agg.val}
        assert val_domains == {"a", "b", "c"}

    def test_empty_source_val_pool_rejected(self):
        a, b = make_splitset("a", 4, 1, 2), make_splitset("b", 4, 0, 2)
        with pytest.raises(EmptyValidationPoolError, match="'b'"):
            datahub.aggregate([a, b])

    def test_single_source_rejected(self):
        with pytest.raises(ConfigError):
            datahub.aggregate([make_splitset("a", 4, 1, 2)])

    def test_cross_source_duplicate_rejected(self):
        a = make_splitset("a", 2, 1, 1)
        b = make_splitset("b", 2, 1, 1)
        b.train[0] = a.train[0]
        with pytest.raises(DuplicateSampleError, match=a.train[0]):
            datahub.aggregate([a, b])

    def test_domain_lookup(self):
        agg = datahub.aggregate([make_splitset("a", 2, 1, 1), make_splitset("b", 2, 1, 1)])
        assert agg.domain_of["a/tr0"] == "a"
        assert agg.domain_of["b/te0"] == "b"


class TestLeakage:
    def test_clean_aggregation_reports_nothing(self):
        agg = datahub.aggregate([make_splitset("a", 3, 1, 1), make_splitset("b", 3, 1, 1)])
        assert datahub.verify_no_leakage(agg) == []

    def test_cross_split_leak_reported(self):
        agg = datahub.aggregate([make_splitset("a", 3, 1, 1), make_splitset("b", 3, 1, 1)])
        agg.test.append(agg.train[0])
        findings = datahub.verify_no_leakage(agg)
        assert len(findings) == 1
        assert findings[0].sample_id == agg.train[0]
        assert findings[0].splits == ("train", "test")
