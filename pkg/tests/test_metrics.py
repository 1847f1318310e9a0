import csv
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hseg import metrics as M
from hseg.errors import DimensionError, UndefinedCorrelationError, UndefinedDistanceError


def brute_mhd(a, b):
    """All-pairs modified Hausdorff distance in plain Python."""
    def directed(p, q):
        return math.fsum(min(math.sqrt((x - u) ** 2 + (y - v) ** 2) for u, v in q) for x, y in p) / len(p)
    a = [tuple(map(float, p)) for p in a]
    b = [tuple(map(float, p)) for p in b]
    return max(directed(a, b), directed(b, a))


def mp_pearson(x, y):
    """Correlation and two-sided t-test p-value at 50 significant digits."""
    with mpmath.workdps(50):
        x = [mpmath.mpf(float(v)) for v in x]
        y = [mpmath.mpf(float(v)) for v in y]
        n = len(x)
        mx, my = mpmath.fsum(x) / n, mpmath.fsum(y) / n
        sxy = mpmath.fsum((a - mx) * (b - my) for a, b in zip(x, y))
        sxx = mpmath.fsum((a - mx) ** 2 for a in x)
        syy = mpmath.fsum((b - my) ** 2 for b in y)
        r = sxy / mpmath.sqrt(sxx * syy)
        df = n - 2
        t = r * mpmath.sqrt(df / (1 - r ** 2))
        # two-sided tail of Student t: I_{df/(df+t^2)}(df/2, 1/2)
        p = mpmath.betainc(mpmath.mpf(df) / 2, mpmath.mpf(1) / 2, 0, df / (df + t ** 2), regularized=True)
        return float(r), float(p)


labelmaps = arrays(np.uint8, (6, 7), elements=st.integers(0, 3))


# dice

def test_dice_examples():
    gt = np.array([[2, 2], [0, 1]])
    assert M.dice_score(gt, gt, 2) == 1.0
    assert M.dice_score(np.array([[2, 0], [0, 0]]), np.array([[0, 2], [0, 0]]), 2) == 0.0
    pred = np.array([[2, 2, 0]])
    ref = np.array([[2, 0, 2]])
    assert M.dice_score(pred, ref, 2) == 0.5
    assert M.dice_score(np.zeros((2, 2)), np.zeros((2, 2)), 3) == 1.0
    assert M.dice_score(np.full((2, 2), 3), np.zeros((2, 2)), 3) == 0.0


def test_binary_dice_examples():
    gt = np.array([[0, 1, 3, 3]])
    pred = np.array([[0, 1, 2, 2]])
    assert M.dice_score(pred, gt, 2) == 0 and M.dice_score(pred, gt, 3) == 0
    assert M.binary_pathology_dice(pred, gt) == 1.0
    assert M.binary_pathology_dice(np.ones((3, 3)), np.zeros((3, 3))) == 1.0
    # 4x4 hand count: |P|=4, |G|=4, overlap 3
    pred = np.array([[2, 2, 3, 0], [0, 3, 1, 1], [0, 0, 0, 0], [1, 1, 0, 0]])
    gt = np.array([[2, 3, 0, 0], [0, 2, 1, 1], [0, 0, 2, 0], [1, 1, 0, 0]])
    assert M.binary_pathology_dice(pred, gt) == pytest.approx(2 * 3 / (4 + 4))


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        M.dice_score(np.zeros((2, 2)), np.zeros((2, 3)), 2)


@settings(max_examples=80, deadline=None)
@given(labelmaps, labelmaps, st.integers(0, 2**31 - 1))
def test_dice_symmetry_and_permutation(p, g, seed):
    for label in (1, 2, 3, M.PATHOLOGY):
        d = M.dice_score(p, g, label)
        assert 0.0 <= d <= 1.0
        assert d == M.dice_score(g, p, label)
    perm = np.random.default_rng(seed).permutation(p.size)
    assert M.binary_pathology_dice(p, g) == M.binary_pathology_dice(p.reshape(-1)[perm], g.reshape(-1)[perm])


@settings(max_examples=80, deadline=None)
@given(labelmaps, labelmaps)
def test_dice_matches_counts(p, g):
    for label in (2, 3):
        inter = int(np.sum((p == label) & (g == label)))
        total = int(np.sum(p == label) + np.sum(g == label))
        expected = 1.0 if total == 0 else 2 * inter / total
        assert M.dice_score(p, g, label) == expected


# MHD

def test_mhd_examples():
    pts = np.array([[1, 2], [3, 4], [0, 0]])
    assert M.mhd(pts, pts) == 0
    assert M.mhd([[0, 0]], [[3, 4]]) == 5
    assert M.mhd([[0, 0], [0, 2]], [[0, 1]]) == 1


def test_mhd_empty():
    with pytest.raises(UndefinedDistanceError):
        M.mhd(np.zeros((0, 2)), [[1, 1]])


@pytest.mark.parametrize("seed", range(100))
def test_mhd_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 40, (rng.integers(1, 51), 2))
    b = rng.integers(0, 40, (rng.integers(1, 51), 2))
    assert M.mhd(a, b) == brute_mhd(a, b)
    assert M.mhd(a, b) == M.mhd(b, a)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=20, unique=True),
       st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=20, unique=True))
def test_mhd_zero_iff_equal_sets(a, b):
    d = M.mhd(a, b)
    assert d >= 0
    assert (d == 0) == (set(a) == set(b))


def test_boundary_points_8_connectivity():
    mask = np.zeros((5, 5), bool)
    mask[1:4, 1:4] = True
    pts = {tuple(map(int, p)) for p in M.boundary_points(mask)}
    assert (2, 2) not in pts and len(pts) == 8
    full = np.ones((3, 3), bool)
    assert len(M.boundary_points(full)) == 8  # image edge counts as outside
    assert M.region_mhd(np.zeros((4, 4)), np.full((4, 4), 2), 2) is None


# F1

def test_f1_examples():
    gt = np.array([[2, 3, 1, 0]])
    assert M.pixel_f1(gt, gt) == 1.0
    assert M.pixel_f1(np.ones_like(gt), gt) == 0.0
    assert M.pixel_f1(np.zeros((2, 2)), np.ones((2, 2))) == 1.0
    # TP=3, FP=1, FN=2
    pred = np.array([[2, 2, 3, 2, 1, 1]])
    gt = np.array([[2, 2, 3, 0, 2, 3]])
    assert M.f1_counts(pred, gt) == (3, 1, 2)
    assert M.pixel_f1(pred, gt) == pytest.approx(2 / 3)


@settings(max_examples=80, deadline=None)
@given(labelmaps, labelmaps)
def test_f1_range_and_merged_class(p, g):
    f = M.pixel_f1(p, g)
    assert 0.0 <= f <= 1.0
    assert M.pixel_f1(p, g, classes=(M.PATHOLOGY,)) == M.binary_pathology_dice(p, g)


# Pearson

def test_pearson_examples():
    x = np.arange(6.0)
    assert M.pearson(x, 2 * x + 1)[0] == pytest.approx(1, abs=1e-12)
    assert M.pearson(x, -x)[0] == pytest.approx(-1, abs=1e-12)
    r, p = M.pearson([1, 2, 3, 4, 5], [2, 1, 4, 3, 5])
    assert r == pytest.approx(0.8, abs=1e-12)
    assert p == pytest.approx(0.104, abs=5e-4)
    assert (r, p) == pytest.approx(mp_pearson([1, 2, 3, 4, 5], [2, 1, 4, 3, 5]), abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_pearson_matches_high_precision(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 60))
    x = rng.standard_normal(n)
    y = 0.5 * x + rng.standard_normal(n)
    r, p = M.pearson(x, y)
    r_mp, p_mp = mp_pearson(x, y)
    assert abs(r - r_mp) < 1e-9 and abs(p - p_mp) < 1e-9


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(3, 30), elements=st.floats(-1e3, 1e3)),
       st.floats(0.01, 100), st.floats(-100, 100))
def test_pearson_affine(x, a, b):
    if np.ptp(x) < 1e-3:
        return
    assert M.pearson(x, a * x + b)[0] == pytest.approx(1, abs=1e-9)
    assert M.pearson(x, -a * x + b)[0] == pytest.approx(-1, abs=1e-9)


def test_pearson_errors():
    with pytest.raises(UndefinedCorrelationError):
        M.pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(DimensionError):
        M.pearson([1, 2], [1, 2])
    with pytest.raises(DimensionError):
        M.pearson([1, 2, 3], [1, 2])


# reports

def test_report_identical_maps(tmp_path):
    rng = np.random.default_rng(0)
    maps = [rng.integers(0, 4, (8, 8)) for _ in range(3)]
    report = M.evaluate((f"s{i}", m, m) for i, m in enumerate(maps))
    assert report.dice == {"ggo": 1.0, "con": 1.0, "binary": 1.0}
    assert report.pixel_f1 == 1.0
    assert all(v == 0 for v in report.mhd_mean.values())
    path = tmp_path / "r.csv"
    report.write_csv(path)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == M.CSV_COLUMNS
    assert len(rows) == 1 + len(maps) + 1 and rows[-1][0] == "ALL"


def test_report_pools_counts_and_counts_exclusions():
    a_pred = np.array([[2, 2, 0, 0]])
    a_gt = np.array([[2, 0, 0, 0]])
    b_pred = np.array([[0, 0, 0, 0]])
    b_gt = np.array([[0, 0, 0, 2]])
    report = M.evaluate([("a", a_pred, a_gt), ("b", b_pred, b_gt)])
    # pooled: overlap 1, |P| 2, |G| 2
    assert report.dice["ggo"] == 0.5
    assert report.excluded["ggo"] == 1 and report.excluded["con"] == 2
    assert report.mhd_mean["con"] is None
    row = next(r for r in report.rows() if r[0] == "b")
    assert row[4] is None
