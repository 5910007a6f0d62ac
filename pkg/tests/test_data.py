import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from xmodalseg.data import (IGNORE_VALUE, LabelMask, ModalityPair, RVolCorruptionError, RVolFormatError,
                            ScribbleMask, Volume, check_scribbles, gen_scribbles, pad_to_multiple,
                            random_crop, read_scribble, read_volume, synth_pair, write_mask,
                            write_volume)
from xmodalseg.data.dataset import add_scribbles, write_synth_dataset
from xmodalseg.data.sampling import crop_offset
from xmodalseg.data.scribbles import AUTO_BG_RADIUS
from xmodalseg.data.synth import GenerationError
from xmodalseg.data.volume import load_dataset


def test_rvol_roundtrip_zeros(tmp_path):
    v = Volume(np.zeros((4, 4, 4)), spacing=(0.5, 0.7, 3.0), origin=(1, 2, 3))
    write_volume(v, tmp_path / "z")
    back = read_volume(tmp_path / "z.json")
    assert np.array_equal(back.values, v.values)
    assert back.spacing == v.spacing and back.origin == v.origin


def test_rvol_roundtrip_random_bit_exact(tmp_path):
    a = np.random.default_rng(3).standard_normal((16, 16, 8)).astype(np.float32)
    write_volume(Volume(a), tmp_path / "r")
    back = read_volume(tmp_path / "r")
    assert np.abs(back.values - a).max() == 0
    assert back.values.tobytes() == a.tobytes()


def test_rvol_header_fields(tmp_path):
    write_volume(Volume(np.ones((2, 3, 4))), tmp_path / "h")
    header = json.loads((tmp_path / "h.json").read_text())
    assert header == {"dims": [2, 3, 4], "spacing_mm": [1.0, 1.0, 1.0], "origin_mm": [0.0, 0.0, 0.0],
                      "dtype": "float32", "byte_order": "little"}
    assert (tmp_path / "h.raw").stat().st_size == 2 * 3 * 4 * 4


def test_rvol_short_payload_is_corruption(tmp_path):
    write_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "c")
    (tmp_path / "c.raw").write_bytes(np.zeros(7, "<f4").tobytes())
    with pytest.raises(RVolCorruptionError):
        read_volume(tmp_path / "c")


def test_rvol_malformed_header(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    (tmp_path / "m.raw").write_bytes(b"")
    with pytest.raises(RVolFormatError):
        read_volume(tmp_path / "m")
    (tmp_path / "m.json").write_text(json.dumps({"dims": [2, 2], "spacing_mm": [1, 1, 1], "dtype": "float32"}))
    with pytest.raises(RVolFormatError):
        read_volume(tmp_path / "m")


def test_scribble_file_uses_255(tmp_path):
    vals = np.full((3, 3, 3), IGNORE_VALUE, np.uint8)
    vals[1, 1, 1] = 1
    write_mask(ScribbleMask(vals, 2), tmp_path / "s")
    header = json.loads((tmp_path / "s.json").read_text())
    assert header["dtype"] == "uint8"
    back = read_scribble(tmp_path / "s", 2)
    assert np.array_equal(back.values, vals)


def test_volume_rejects_nan_and_bad_spacing():
    with pytest.raises(ValueError):
        Volume(np.array([[[np.nan]]]))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))


def test_synth_deterministic():
    a = synth_pair(11, (32, 32, 16), 2)
    b = synth_pair(11, (32, 32, 16), 2)
    for name in ("ct", "mr", "gt"):
        assert getattr(a, name).values.tobytes() == getattr(b, name).values.tobytes()
    c = synth_pair(12, (32, 32, 16), 2)
    assert c.gt.values.tobytes() != a.gt.values.tobytes()


def test_synth_shared_geometry_and_ranges():
    p = synth_pair(5, (48, 40, 16), 1)
    assert p.ct.shape == p.mr.shape == p.gt.shape == (48, 40, 16)
    assert p.ct.spacing == p.mr.spacing == p.gt.spacing
    for v in (p.ct.values, p.mr.values):
        assert v.min() == 0.0 and v.max() == 1.0
    # one object -> one connected foreground component
    _, n = ndimage.label(p.gt.values > 0)
    assert n == 1
    # both modalities separate foreground from background on the same mask
    fg = p.gt.values > 0
    assert p.ct.values[fg].mean() > p.ct.values[~fg].mean() + 0.1
    assert p.mr.values[fg].mean() > p.mr.values[~fg].mean() + 0.1


def test_synth_foreground_fraction_over_100_seeds():
    fr = [(synth_pair(s, (64, 64, 16), 2).gt.values > 0).mean() for s in range(100)]
    assert 0.005 <= min(fr) and max(fr) <= 0.15


def test_synth_rejects_small_dims():
    with pytest.raises(GenerationError):
        synth_pair(0, (7, 32, 32), 1)
    with pytest.raises(GenerationError):
        synth_pair(0, (32, 32, 16), 6)


@pytest.mark.parametrize("mode", ["manual-sim", "auto-bg"])
@pytest.mark.parametrize("classes", [2, 3])
def test_scribbles_contract(mode, classes):
    for seed in range(4):
        gt = synth_pair(seed, (64, 64, 16), 2, num_classes=classes).gt
        s = gen_scribbles(gt, mode, seed=seed)
        n = s.values.size
        assert check_scribbles(s, gt) == 0
        assert s.labeled_fraction() < 0.01
        bg_target = 0.0008 if mode == "manual-sim" else 0.0006
        assert abs((s.values == 0).sum() / n - bg_target) <= 0.5 * bg_target
        for c in range(1, classes):
            if (gt.values == c).any():
                assert abs((s.values == c).sum() / n - 0.0004) <= 0.5 * 0.0004
        # background scribbles never land on foreground
        assert not (gt.values[s.values == 0] > 0).any()


def test_auto_bg_clearance():
    for seed in range(6):
        gt = synth_pair(seed, (64, 64, 16), 2).gt
        s = gen_scribbles(gt, "auto-bg", seed=seed)
        dist = ndimage.distance_transform_edt(gt.values == 0)
        assert dist[s.values == 0].min() >= AUTO_BG_RADIUS


def test_scribbles_deterministic_and_custom_coverage():
    gt = synth_pair(2, (64, 64, 16), 2).gt
    a = gen_scribbles(gt, "manual-sim", seed=4)
    b = gen_scribbles(gt, "manual-sim", seed=4)
    assert np.array_equal(a.values, b.values)
    big = gen_scribbles(gt, "manual-sim", seed=4, target_coverage={"fg": 0.001})
    assert (big.values == 1).sum() > (a.values == 1).sum()
    with pytest.raises(ValueError):
        gen_scribbles(gt, "manual-sim", target_coverage={"fg": 0.02})


def test_foreground_scribbles_are_curves():
    gt = synth_pair(8, (64, 64, 16), 1).gt
    s = gen_scribbles(gt, "manual-sim", seed=1)
    fg = s.values == 1
    # per slice, scribble pixels form few 8-connected pieces
    for z in range(fg.shape[2]):
        if fg[:, :, z].any():
            _, n = ndimage.label(fg[:, :, z], structure=np.ones((3, 3)))
            assert n <= 3


def test_thin_class_is_reported_not_fatal():
    vals = np.zeros((32, 32, 8), np.uint8)
    vals[10, 5:20, 3] = 1  # one-voxel-wide line erodes to nothing
    s = gen_scribbles(LabelMask(vals, 2), "manual-sim", seed=0)
    assert 1 in s.skipped
    assert not (s.values == 1).any()


def _pair(dims=(128, 128, 32), scribble_at=None):
    rng = np.random.default_rng(0)
    ct = Volume(rng.random(dims))
    mr = Volume(rng.random(dims))
    gt = LabelMask((rng.random(dims) > 0.5).astype(np.uint8), 2)
    scr = None
    if scribble_at is not None:
        v = np.full(dims, IGNORE_VALUE, np.uint8)
        v[scribble_at] = 1
        scr = ScribbleMask(v, 2)
    return ModalityPair(ct, mr, gt, scr, "p")


def test_crop_full_size_is_identity():
    p = _pair((16, 16, 8))
    c = random_crop(p, (16, 16, 8), seed=3)
    assert np.array_equal(c.ct.values, p.ct.values)
    assert np.array_equal(c.gt.values, p.gt.values)


def test_crop_96x96x16_aligned():
    p = _pair()
    c = random_crop(p, (96, 96, 16), seed=1)
    assert c.ct.shape == c.mr.shape == c.gt.shape == (96, 96, 16)
    # locate the offset from the ct crop and check the others used it
    off = c.ct.origin
    sl = tuple(slice(int(o), int(o) + n) for o, n in zip(off, (96, 96, 16)))
    assert np.array_equal(c.ct.values, p.ct.values[sl])
    assert np.array_equal(c.mr.values, p.mr.values[sl])
    assert np.array_equal(c.gt.values, p.gt.values[sl])


def test_crop_too_large():
    with pytest.raises(ValueError):
        random_crop(_pair((16, 16, 8)), (17, 16, 8))


def test_biased_crops_contain_single_scribble():
    v = tuple(np.random.default_rng(42).integers(0, n) for n in (128, 128, 32))
    p = _pair(scribble_at=v)
    rng = np.random.default_rng(0)
    hits = 0
    for _ in range(1000):
        c = random_crop(p, (96, 96, 16), rng)
        hits += int(c.scribble.labeled.any())
    assert hits >= 950


def test_unbiased_offsets_cover_range():
    rng = np.random.default_rng(0)
    offs = np.array([crop_offset((10, 10, 10), (4, 4, 4), rng, bias=0.0) for _ in range(500)])
    assert offs.min() == 0 and offs.max() == 6


def test_pad_identity_when_aligned():
    v = Volume(np.random.default_rng(0).random((32, 16, 16)))
    p, rec = pad_to_multiple(v, 16)
    assert p.shape == v.shape
    assert np.array_equal(rec.uncrop(p.values), v.values)


def test_pad_ceiling_dims():
    p, rec = pad_to_multiple(Volume(np.zeros((100, 100, 20))), 16)
    assert p.shape == (112, 112, 32)
    assert rec.original == (100, 100, 20)


@settings(max_examples=30, deadline=None)
@given(st.tuples(*[st.integers(1, 20)] * 3), st.integers(1, 9), st.integers(0, 2 ** 16))
def test_pad_uncrop_roundtrip(dims, m, seed):
    a = np.random.default_rng(seed).random(dims).astype(np.float32)
    p, rec = pad_to_multiple(Volume(a), m)
    assert all(n % m == 0 for n in p.shape)
    assert rec.uncrop(p.values).tobytes() == a.tobytes()
    # replicate-edge padding
    assert np.array_equal(p.values[-1, : dims[1], : dims[2]], a[-1])


def test_dataset_roundtrip(tmp_path):
    idx = write_synth_dataset(tmp_path / "d", 3, (32, 32, 16), 1, 2, seed=7, n_val=1)
    add_scribbles(idx, "auto-bg", seed=1)
    pairs = load_dataset(idx)
    assert [p.case_id for p in pairs] == ["case_0000", "case_0001", "case_0002"]
    for p in pairs:
        assert p.scribble is not None and check_scribbles(p.scribble, p.gt) == 0
    recs = json.loads(idx.read_text())
    assert recs[2]["split"] == "val" and recs[0]["scribble"] == "case_0000/scribble.json"
