import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kband import data, grid
from kband.data import Container, ContainerWriter, DatasetRecord, Ellipse, PhantomSpec
from kband.errors import CorruptRecord, InvalidArgument, InvalidRecord, UnsupportedVersion
from kband.operators import fft2c


def test_phantom_trivial_and_deterministic():
    assert not np.any(data.make_phantom(PhantomSpec((16, 16), n_ellipses=0)))
    a = data.make_phantom(PhantomSpec((24, 20), seed=3, noise_std=0.01))
    b = data.make_phantom(PhantomSpec((24, 20), seed=3, noise_std=0.01))
    np.testing.assert_array_equal(a, b)
    assert np.iscomplexobj(a) and np.any(np.abs(np.angle(a[np.abs(a) > 0])) > 0)
    c = data.make_phantom(PhantomSpec((24, 20), seed=4))
    assert np.any(a != c)


def test_ellipse_indicator():
    shape = (32, 32)
    img = data.ellipse_image(shape, [Ellipse((0, 0), (10, 6))])
    yy, xx = np.meshgrid(np.arange(32) - 16, np.arange(32) - 16, indexing="ij")
    inside = (yy / 10.0) ** 2 + (xx / 6.0) ** 2 <= 1
    np.testing.assert_array_equal(img, inside.astype(float))
    assert set(np.unique(img)) == {0.0, 1.0}


def test_phantom_noise_statistics():
    clean = data.make_phantom(PhantomSpec((64, 64), seed=1))
    noisy = data.make_phantom(PhantomSpec((64, 64), seed=1, noise_std=0.5))
    # everything before the noise draw is shared, so the k-space difference is the noise
    diff = fft2c(noisy) - fft2c(clean)
    assert np.mean(np.abs(diff) ** 2) == pytest.approx(0.25, rel=0.1)


def test_phantom_spec_validation():
    with pytest.raises(InvalidArgument):
        PhantomSpec((8, 8), intensity_range=(0, 11))
    with pytest.raises(InvalidArgument):
        PhantomSpec((8, 8), noise_std=-1)


def test_normalize_examples():
    x = 4 * np.exp(1j * np.random.default_rng(0).uniform(0, 6, (8, 8)))
    y, s = data.normalize_slice(x)
    assert s == pytest.approx(4.0) and np.allclose(np.abs(y), 1)
    z, s2 = data.normalize_slice(y)
    assert abs(s2 - 1) <= 1e-12
    with pytest.raises(InvalidArgument):
        data.normalize_slice(np.zeros((4, 4)))


def _exclusive_percentile(values, q):
    v = np.sort(values)
    pos = q / 100 * (len(v) + 1)  # 1-based rank
    lo = int(np.floor(pos))
    frac = pos - lo
    lo = min(max(lo, 1), len(v))
    hi = min(lo + 1, len(v))
    return v[lo - 1] + frac * (v[hi - 1] - v[lo - 1])


def test_normalize_ramp():
    ramp = np.arange(1, 101, dtype=float)[::-1].reshape(10, 10)
    _, s = data.normalize_slice(ramp)
    assert 95 < s < 96
    assert s == pytest.approx(_exclusive_percentile(ramp.ravel(), 95), abs=1e-12)
    assert s == pytest.approx(95.95, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=5, max_size=60))
def test_normalize_matches_order_statistics(vals):
    _, s = data.normalize_slice(np.array(vals))
    assert s == pytest.approx(_exclusive_percentile(np.array(vals), 95), rel=1e-12)


def _small_dataset(tmp_path, **kw):
    args = dict(shape=(16, 16), n_train=4, n_test=2, r_band=3, r_vd=2, seed=5)
    args.update(kw)
    return data.build_dataset(**args, out_dir=tmp_path / "ds")


def test_roundtrip(tmp_path):
    man, recs = _small_dataset(tmp_path)
    c = Container(tmp_path / "ds")
    assert c.ids("train") == [f"train-{i:05d}" for i in range(4)]
    assert c.ids("test") == ["test-00000", "test-00001"]
    for r in recs:
        back = c.read_record(r.record_id)
        np.testing.assert_array_equal(back.kspace, r.kspace)
        assert back.kspace.dtype == np.complex64
        if r.band is not None:
            np.testing.assert_array_equal(back.band.bits, r.band.bits)
            assert back.band.angle_deg == r.band.angle_deg
        else:
            assert back.band is None
            np.testing.assert_array_equal(back.ground_truth, r.ground_truth)
        np.testing.assert_array_equal(back.vd.bits, r.vd.bits)
        assert back.normalization_scale == r.normalization_scale
        assert back.meta == r.meta
    # rebuild gives byte-identical payloads
    _small_dataset(tmp_path / "again")
    assert Container(tmp_path / "again" / "ds").checksums() == c.checksums()


def test_training_records_zero_off_band(tmp_path):
    _, recs = _small_dataset(tmp_path)
    for r in recs:
        if r.split == "train":
            assert not np.any(r.kspace[r.band.bits == 0])
            assert r.meta["angle_draw"] == data.sample_angle(5, r.meta["index"])
            assert r.band.angle_deg == r.meta["angle_draw"]
        else:
            assert r.ground_truth is not None and r.band is None


def test_r_band_one_gives_full_masks():
    _, recs = data.build_dataset((12, 12), 5, 0, 1, 2, seed=0)
    assert all(np.all(r.band.bits == 1) for r in recs)


def test_angle_histogram_uniform():
    n = 1800
    angles = np.array([data.sample_angle(0, i) for i in range(n)])
    assert angles.min() >= 0 and angles.max() <= 179
    counts = np.bincount(angles, minlength=180)
    p = 1 / 180
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 5 * sigma)


def test_policies_share_slices_and_vd():
    _, a = data.build_dataset((16, 16), 3, 1, 4, 2, seed=9, policy="uniform")
    _, b = data.build_dataset((16, 16), 3, 1, 4, 2, seed=9, policy="vertical")
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.vd.bits, rb.vd.bits)
        assert ra.normalization_scale == rb.normalization_scale
    assert b[0].band.kind == "vertical"


def test_truncated_file(tmp_path):
    _small_dataset(tmp_path)
    p = tmp_path / "ds" / "records.kbnd"
    p.write_bytes(p.read_bytes()[:-10])
    c = Container(tmp_path / "ds")
    c.read_record(0)
    with pytest.raises(CorruptRecord):
        c.read_record(5)


def test_checksum_mismatch(tmp_path):
    _small_dataset(tmp_path)
    p = tmp_path / "ds" / "records.kbnd"
    blob = bytearray(p.read_bytes())
    blob[40] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(CorruptRecord):
        Container(tmp_path / "ds").read_record(0)


def _rewrite_blob(tmp_path, mutate):
    _small_dataset(tmp_path)
    root = tmp_path / "ds"
    man = json.loads((root / "manifest.json").read_text())
    e = man["records"][0]
    raw = bytearray((root / "records.kbnd").read_bytes())
    blob = bytearray(raw[e["offset"]:e["offset"] + e["length"]])
    mutate(blob)
    raw[e["offset"]:e["offset"] + e["length"]] = blob
    (root / "records.kbnd").write_bytes(bytes(raw))
    import crc32c
    e["crc32c"] = crc32c.crc32c(bytes(blob))
    (root / "manifest.json").write_text(json.dumps(man))
    return Container(root)


def test_foreign_endian_rejected(tmp_path):
    def to_big_endian(blob):
        _, v, flags, rows, cols = struct.unpack_from("<4sBBII", blob)
        struct.pack_into(">4sBBII", blob, 0, b"KBND", v, flags | data.FLAG_BIG_ENDIAN, rows, cols)

    c = _rewrite_blob(tmp_path, to_big_endian)
    with pytest.raises(UnsupportedVersion):
        c.read_record(0)


def test_bad_magic_and_version(tmp_path):
    def bad_magic(blob):
        blob[0:4] = b"XBND"

    with pytest.raises(CorruptRecord):
        _rewrite_blob(tmp_path / "a", bad_magic).read_record(0)

    def bad_version(blob):
        blob[4] = 2

    with pytest.raises(UnsupportedVersion):
        _rewrite_blob(tmp_path / "b", bad_version).read_record(0)


def test_manifest_version(tmp_path):
    _small_dataset(tmp_path)
    root = tmp_path / "ds"
    man = json.loads((root / "manifest.json").read_text())
    man["version"] = "KBND-2"
    (root / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(UnsupportedVersion):
        Container(root)


def test_duplicate_ids_and_invariant(tmp_path):
    _, recs = data.build_dataset((8, 8), 1, 0, 2, 2, seed=0)
    man = data.DatasetManifest(grid.as_shape((8, 8)), 2, 2, "uniform", {}, {})
    with ContainerWriter(tmp_path / "c", man) as w:
        w.write_record(recs[0])
        with pytest.raises(InvalidRecord):
            w.write_record(recs[0])
        bad = DatasetRecord("x", "train", np.ones((8, 8), np.complex64), recs[0].band, recs[0].vd,
                            None, 1.0, {})
        with pytest.raises(InvalidRecord):
            w.write_record(bad)


def test_ingestion(tmp_path):
    img = data.make_phantom(PhantomSpec((16, 12), seed=2)).astype(np.complex64)
    k = fft2c(img).astype(np.complex64)
    k.astype("<c8").tofile(tmp_path / "slice.c64")
    (tmp_path / "slice.json").write_text(json.dumps({"rows": 16, "cols": 12, "domain": "kspace"}))
    back = data.ingest_slice(tmp_path / "slice.c64")
    np.testing.assert_allclose(back, img, atol=1e-5)
    _, recs = data.build_dataset((16, 12), 1, 0, 2, 2, images=[back], out_dir=tmp_path / "ds")
    assert not np.any(recs[0].kspace[recs[0].band.bits == 0])
    assert Container(tmp_path / "ds").manifest.params["source"] == "ingested"
    (tmp_path / "slice.json").write_text(json.dumps({"rows": 15, "cols": 12}))
    with pytest.raises(InvalidRecord):
        data.ingest_slice(tmp_path / "slice.c64")


def test_build_validation():
    with pytest.raises(InvalidArgument):
        data.build_dataset((8, 8), 1, 0, 0.5, 2)
    with pytest.raises(InvalidArgument):
        data.build_dataset((8, 8), 1, 0, 2, 2, policy="spiral")
    with pytest.raises(InvalidArgument):
        data.build_dataset((8, 8), 2, 0, 2, 2, images=[np.ones((8, 8))])
