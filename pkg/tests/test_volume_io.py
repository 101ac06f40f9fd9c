import json

import numpy as np
import pytest

from modalseg.volume_io import (
    CaseFormatError,
    CaseRecord,
    DatasetManifest,
    LabelVolume,
    PhantomSpec,
    Volume,
    generate_phantom,
    load_case,
    load_manifest,
    save_case,
    save_manifest,
    zscore_normalize,
)


def small_spec(seed=7, **kw):
    defaults = dict(
        shape=(20, 20, 20),
        seed=seed,
        wt_radii=(5.5, 5.0, 5.5),
        tc_radii=(3.5, 3.2, 3.5),
        et_radii=(2.0, 1.8, 2.0),
    )
    defaults.update(kw)
    return PhantomSpec(**defaults)


def records_equal(a: CaseRecord, b: CaseRecord) -> bool:
    return (
        a.case_id == b.case_id
        and all(np.array_equal(va.data, vb.data) for va, vb in zip(a.volumes, b.volumes))
        and np.array_equal(a.labels.labels, b.labels.labels)
        and np.array_equal(a.brain_mask, b.brain_mask)
    )


def test_phantom_deterministic():
    assert records_equal(generate_phantom(small_spec(7)), generate_phantom(small_spec(7)))


def test_phantom_zero_et_radius():
    rec = generate_phantom(small_spec(3, et_radii=(0.0, 0.0, 0.0)))
    assert (rec.labels.labels == 3).sum() == 0


def test_phantom_seeds_differ_invariants_hold():
    a = generate_phantom(small_spec(7))
    b = generate_phantom(small_spec(8))
    assert not all(
        np.array_equal(va.data, vb.data) for va, vb in zip(a.volumes, b.volumes)
    )
    for rec in (a, b):
        lab = rec.labels.labels
        wt, tc, et = lab > 0, (lab == 1) | (lab == 3), lab == 3
        assert np.all(tc <= wt) and np.all(et <= tc)  # nested regions
        assert np.all(rec.brain_mask[lab > 0])


def test_phantom_nesting_many_seeds():
    for seed in range(10):
        lab = generate_phantom(small_spec(seed)).labels.labels
        et = lab == 3
        tc = et | (lab == 1)
        wt = tc | (lab == 2)
        assert np.all(tc <= wt) and np.all(et <= tc)


def test_phantom_rejects_oversized_radii():
    with pytest.raises(ValueError):
        generate_phantom(small_spec(1, wt_radii=(12.0, 12.0, 12.0), tc_radii=(3.0, 3.0, 3.0)))


def test_phantom_spec_requires_nesting():
    with pytest.raises(ValueError):
        small_spec(1, tc_radii=(6.0, 6.0, 6.0))  # TC > WT


def test_zscore_two_point():
    v = Volume(np.array([1.0, 3.0], dtype=np.float32).reshape(2, 1, 1))
    out = zscore_normalize(v, np.ones((2, 1, 1), dtype=bool))
    assert np.allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-6)


def test_zscore_idempotent():
    rng = np.random.default_rng(0)
    v = Volume(rng.normal(5.0, 3.0, size=(8, 8, 8)).astype(np.float32))
    mask = np.ones(v.shape, dtype=bool)
    once = zscore_normalize(v, mask)
    twice = zscore_normalize(once, mask)
    assert np.allclose(once.data, twice.data, atol=1e-6)


def test_zscore_statistics_full_mask():
    rng = np.random.default_rng(1)
    v = Volume(rng.normal(-2.0, 7.0, size=(10, 9, 8)).astype(np.float32))
    mask = np.ones(v.shape, dtype=bool)
    out = zscore_normalize(v, mask).data.astype(np.float64)
    assert abs(out.mean()) < 1e-5
    assert abs(out.std() - 1.0) < 1e-5


def test_zscore_masked_region_and_outside_zero():
    rng = np.random.default_rng(2)
    v = Volume(rng.normal(3.0, 2.0, size=(12, 12, 12)).astype(np.float32))
    mask = np.zeros(v.shape, dtype=bool)
    mask[2:9, 3:10, 1:7] = True
    out = zscore_normalize(v, mask)
    inside = out.data[mask].astype(np.float64)
    assert abs(inside.mean()) < 1e-5 and abs(inside.std() - 1.0) < 1e-5
    assert np.all(out.data[~mask] == 0.0)


def test_zscore_degenerate_inputs():
    flat = Volume(np.full((4, 4, 4), 2.5, dtype=np.float32))
    with pytest.raises(ValueError):
        zscore_normalize(flat, np.ones((4, 4, 4), dtype=bool))
    v = Volume(np.arange(64, dtype=np.float32).reshape(4, 4, 4))
    tiny_mask = np.zeros((4, 4, 4), dtype=bool)
    tiny_mask[0, 0, 0] = True
    with pytest.raises(ValueError):
        zscore_normalize(v, tiny_mask)


def test_volume_rejects_non_finite():
    bad = np.ones((2, 2, 2), dtype=np.float32)
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        Volume(bad)


def test_case_roundtrip_bit_exact(tmp_path):
    rec = generate_phantom(small_spec(5))
    save_case(rec, tmp_path / "c0")
    loaded = load_case(tmp_path / "c0")
    assert records_equal(rec, loaded)


def test_load_truncated_payload(tmp_path):
    rec = generate_phantom(small_spec(5))
    save_case(rec, tmp_path / "c0")
    raw = (tmp_path / "c0" / "t2.raw").read_bytes()
    (tmp_path / "c0" / "t2.raw").write_bytes(raw[:-8])
    with pytest.raises(CaseFormatError):
        load_case(tmp_path / "c0")


def test_label_byte_count_arithmetic(tmp_path):
    # an 8x8x8 header pairs with exactly 512 one-byte label voxels
    rec = generate_phantom(
        PhantomSpec(shape=(8, 8, 8), seed=1, wt_radii=(1.5, 1.5, 1.5),
                    tc_radii=(1.0, 1.0, 1.0), et_radii=(0.5, 0.5, 0.5))
    )
    save_case(rec, tmp_path / "c8")
    assert (tmp_path / "c8" / "labels.raw").stat().st_size == 512
    assert load_case(tmp_path / "c8").shape == (8, 8, 8)


def test_load_unknown_dtype(tmp_path):
    rec = generate_phantom(small_spec(5))
    save_case(rec, tmp_path / "c0")
    header = json.loads((tmp_path / "c0" / "header.json").read_text())
    header["dtype"] = "f64"
    (tmp_path / "c0" / "header.json").write_text(json.dumps(header))
    with pytest.raises(CaseFormatError):
        load_case(tmp_path / "c0")


def test_load_header_shape_mismatch(tmp_path):
    rec = generate_phantom(small_spec(5))
    save_case(rec, tmp_path / "c0")
    header = json.loads((tmp_path / "c0" / "header.json").read_text())
    header["shape"] = [21, 20, 20]
    (tmp_path / "c0" / "header.json").write_text(json.dumps(header))
    with pytest.raises(CaseFormatError):
        load_case(tmp_path / "c0")


def test_case_record_invariants():
    rec = generate_phantom(small_spec(5))
    with pytest.raises(ValueError):
        CaseRecord(
            case_id="bad",
            volumes=rec.volumes,
            labels=rec.labels,
            brain_mask=np.zeros(rec.shape, dtype=bool),  # labels outside mask
        )
    with pytest.raises(ValueError):
        CaseRecord(
            case_id="bad",
            volumes=rec.volumes[:3] + (Volume(np.zeros((4, 4, 4), np.float32)),),
            labels=rec.labels,
            brain_mask=rec.brain_mask,
        )


def test_manifest_roundtrip_and_validation(tmp_path):
    rec = generate_phantom(small_spec(5))
    save_case(rec, tmp_path / "c0")
    manifest = DatasetManifest(splits={"train": ["c0"], "val": [], "test": []}, seed=3)
    save_manifest(manifest, tmp_path / "manifest.json")
    loaded, base = load_manifest(tmp_path / "manifest.json")
    assert loaded.splits == manifest.splits and loaded.seed == 3
    assert base == tmp_path
    with pytest.raises(ValueError):
        DatasetManifest(splits={"train": ["a"], "test": ["a"]})  # overlap
    manifest_bad = DatasetManifest(splits={"train": ["missing_case"]}, seed=0)
    save_manifest(manifest_bad, tmp_path / "bad.json")
    with pytest.raises(CaseFormatError):
        load_manifest(tmp_path / "bad.json")


def test_label_volume_validation():
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), 7, dtype=np.uint8))
