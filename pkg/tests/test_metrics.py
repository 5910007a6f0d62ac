import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from xmodalseg.metrics import CaseMetrics, asd, dsc, evaluate_case, write_metrics_csv
from xmodalseg.oracle import asd_bruteforce, dsc_bruteforce


def cube(shape, lo, hi):
    m = np.zeros(shape, np.uint8)
    m[tuple(slice(a, b) for a, b in zip(lo, hi))] = 1
    return m


def blob(seed, shape=(12, 12, 12)):
    rng = np.random.default_rng(seed)
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), 1.5)
    return (noise > np.quantile(noise, rng.uniform(0.6, 0.9))).astype(np.uint8)


def test_dsc_basic():
    a = cube((6, 6, 6), (1, 1, 1), (4, 4, 4))
    assert dsc(a, a) == 1.0
    assert dsc(a, cube((6, 6, 6), (4, 4, 4), (6, 6, 6))) == 0.0
    assert dsc(np.zeros((3, 3, 3)), np.zeros((3, 3, 3))) == 1.0


def test_dsc_half_overlap_cubes():
    a = cube((6, 6, 6), (0, 0, 0), (2, 2, 2))
    b = cube((6, 6, 6), (0, 0, 1), (2, 2, 3))
    assert dsc(a, b) == 0.5


def test_asd_identical_and_empty():
    a = cube((6, 6, 6), (1, 1, 1), (4, 4, 4))
    assert asd(a, a) == 0.0
    z = np.zeros((6, 6, 6))
    assert asd(z, z) == 0.0
    assert math.isnan(asd(a, z))


def test_asd_single_voxels_3mm():
    a = np.zeros((3, 3, 3), np.uint8)
    b = np.zeros((3, 3, 3), np.uint8)
    a[1, 1, 0] = 1
    b[1, 1, 1] = 1
    assert asd(a, b, 1, (1.0, 1.0, 3.0)) == 3.0
    assert asd_bruteforce(a, b, 1, (1.0, 1.0, 3.0)) == 3.0


def test_asd_matches_bruteforce_on_blobs():
    for seed in range(10):
        a, b = blob(seed), blob(seed + 1000)
        sp = (1.0, 0.8, 2.5)
        assert asd(a, b, 1, sp) == pytest.approx(asd_bruteforce(a, b, 1, sp), abs=1e-6)


def test_metric_symmetry_and_translation():
    a, b = blob(1), blob(2)
    assert dsc(a, b) == dsc(b, a)
    assert asd(a, b, 1, (1, 1, 2)) == pytest.approx(asd(b, a, 1, (1, 1, 2)), abs=1e-12)
    pad = [(2, 2)] * 3
    A, B = np.pad(a, pad), np.pad(b, pad)
    At, Bt = np.roll(A, (1, -2, 1), axis=(0, 1, 2)), np.roll(B, (1, -2, 1), axis=(0, 1, 2))
    assert dsc(At, Bt) == dsc(A, B)
    assert asd(At, Bt, 1, (1, 1, 2)) == pytest.approx(asd(A, B, 1, (1, 1, 2)), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(0, 20))
def test_dsc_monotone_in_overlap(size, shift):
    # two 1D-like bars of fixed sizes; sliding toward each other grows the overlap
    n = 60
    def bar(start):
        m = np.zeros((n, 1, 1), np.uint8)
        m[start:start + size] = 1
        return m
    far = dsc(bar(0), bar(shift + 1))
    near = dsc(bar(0), bar(shift))
    assert near >= far


def test_dsc_matches_oracle():
    a, b = blob(3), blob(4)
    assert dsc(a, b) == pytest.approx(dsc_bruteforce(a, b, 1), abs=1e-15)


def test_evaluate_case_composition(tmp_path):
    gt = np.zeros((10, 10, 6), np.uint8)
    gt[1:4, 1:4, 1:3] = 1
    gt[6:9, 5:9, 2:5] = 2
    pred = gt.copy()
    pred[6:9, 5:9, 2] = 0
    m = evaluate_case(pred, gt, (1, 1, 3), "c", classes=[1, 2])
    assert m.dsc == {1: dsc(pred, gt, 1), 2: dsc(pred, gt, 2)}
    assert m.asd == {1: asd(pred, gt, 1, (1, 1, 3)), 2: asd(pred, gt, 2, (1, 1, 3))}
    assert m.mean_dsc == pytest.approx((m.dsc[1] + m.dsc[2]) / 2)
    perfect = evaluate_case(gt, gt, (1, 1, 3), "p", classes=[1, 2])
    assert perfect.mean_dsc == 1.0 and perfect.mean_asd == 0.0
    summary = write_metrics_csv([m, perfect], tmp_path / "m.csv")
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert rows[0] == "case_id,class,dsc,asd_mm"
    assert rows[-2].startswith("mean,all,") and rows[-1].startswith("std,all,")
    assert summary["dsc_mean"] == pytest.approx((m.mean_dsc + 1.0) / 2)


def test_evaluate_case_from_outputs():
    import torch
    gt = np.zeros((4, 4, 2), np.uint8)
    gt[1:3, 1:3, :] = 1
    y = torch.nn.functional.one_hot(torch.from_numpy(gt.astype(np.int64)), 2).permute(3, 0, 1, 2)[None].float()
    m = evaluate_case({"y_mm": y}, gt, (1, 1, 1), "o", classes=[1])
    assert m.mean_dsc == 1.0


def test_undefined_asd_excluded_from_mean():
    m = CaseMetrics("x", {1: 0.0, 2: 1.0}, {1: float("nan"), 2: 2.0})
    assert m.mean_asd == 2.0
