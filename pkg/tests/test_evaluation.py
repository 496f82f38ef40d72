import numpy as np
import pytest

from ctsfm import evaluation as ev
from ctsfm import lie


def curve(n=200):
    t = np.linspace(0, 4, n)
    return np.column_stack([np.cos(t), np.sin(1.3 * t), 0.3 * t])


def random_rotation(rng):
    return lie.quat_to_rotmat(lie.quat_exp(rng.normal(size=3)))


def test_rectangle_area():
    x = np.linspace(0.0, 2.0, 101)
    f = np.column_stack([x, np.zeros_like(x), np.zeros_like(x)])
    g = f + [0.0, 0.1, 0.0]
    assert abs(ev.area_between(f, g) - 0.2) < 1e-9


def test_identical_zero_and_symmetric(rng):
    f = curve()
    g = f + 0.05 * rng.normal(size=f.shape)
    assert ev.area_between(f, f) == 0.0
    assert ev.area_between(f, g) == ev.area_between(g, f)


def test_area_rigid_invariance(rng):
    f = curve()
    g = f + 0.05 * rng.normal(size=f.shape)
    R = random_rotation(rng)
    p = rng.normal(size=3)
    a = ev.area_between(f, g)
    b = ev.area_between(f @ R.T + p, g @ R.T + p)
    assert abs(a - b) < 1e-9


def test_area_linear_in_offset(rng):
    f = curve()
    d = rng.normal(size=f.shape)
    a1 = ev.area_between(f, f + 1e-4 * d)
    a2 = ev.area_between(f, f + 2e-4 * d)
    assert a2 / a1 == pytest.approx(2.0, rel=1e-2)


def test_area_errors():
    with pytest.raises(ValueError):
        ev.area_between(np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        ev.area_between(np.zeros((3, 3)), np.zeros((4, 3)))


def test_align_self_identity():
    f = curve()
    pair = ev.align(f, f)
    assert np.allclose(pair.R, np.eye(3), atol=1e-12)
    assert np.allclose(pair.p, 0.0, atol=1e-12)


def test_align_recovers_transform(rng):
    f = curve()
    R = random_rotation(rng)
    p = rng.normal(size=3)
    # estimate = R^T (f - p) so aligning it onto f must give (R, p)
    est = (f - p) @ R
    pair = ev.align(est, f)
    assert np.allclose(pair.R, R, atol=1e-9)
    assert np.allclose(pair.p, p, atol=1e-9)
    assert np.linalg.det(pair.R) == pytest.approx(1.0)
    assert ev.area_error(pair) < 1e-9


def test_align_noise_bound(rng):
    f = curve()
    sigma = 1e-3
    errs = []
    for _ in range(100):
        R = random_rotation(rng)
        est = f @ R.T + sigma * rng.normal(size=f.shape)
        pair = ev.align(est, f)
        errs.append(np.linalg.norm(lie.so3_log(pair.R @ R)))
    # rotation error scales like sigma / (sqrt(n) * spread)
    spread = np.sqrt(np.mean(np.sum((f - f.mean(0)) ** 2, axis=1)))
    bound = 3 * sigma / (np.sqrt(len(f)) * spread) * np.sqrt(3)
    assert np.max(errs) < 3 * bound


def test_align_degenerate():
    x = np.linspace(0, 1, 20)
    line = np.column_stack([x, 2 * x, -x])
    with pytest.raises(ev.DegenerateAlignmentError):
        ev.align(line, line)
    with pytest.raises(ev.DegenerateAlignmentError):
        ev.align(np.ones((10, 3)), np.ones((10, 3)))


def test_alignment_never_hurts(rng):
    for _ in range(100):
        f = curve(100) + 0.1 * rng.normal(size=(100, 3))
        R = random_rotation(rng)
        g = f @ R.T + rng.normal(size=3) + 0.05 * rng.normal(size=f.shape)
        before = ev.area_between(g, f)
        after = ev.area_error(ev.align(g, f))
        assert after <= before + 1e-12


def test_summarize_examples():
    s = ev.summarize([0.0, 0.0, 0.0])
    assert s.inlier_ratio == 1.0 and s.count == 3
    assert ev.summarize([0.1, 0.3], 0.25).inlier_ratio == 0.5
    errs = [0.01, 0.2, 0.05, 0.12, 0.3, 0.9, 0.07]
    s = ev.summarize(errs)
    inl = sorted(e for e in errs if e < 0.25)
    assert s.median == pytest.approx(np.median(inl))
    # linear interpolation between order statistics
    pos = 0.4 * (len(inl) - 1)
    lo = int(np.floor(pos))
    assert s.p40 == pytest.approx(inl[lo] + (pos - lo) * (inl[lo + 1] - inl[lo]))
    assert s.p60 == pytest.approx(np.quantile(inl, 0.6))


def test_summarize_no_inliers():
    s = ev.summarize([1.0, 2.0])
    assert s.inlier_ratio == 0.0 and np.isnan(s.median)
    with pytest.raises(ValueError):
        ev.summarize([])


def test_common_grid():
    g = ev.common_grid((0.1, 2.0), (0.0, 1.5))
    assert g[0] == 0.1 and g[-1] == pytest.approx(1.5)
    assert np.allclose(np.diff(g), 0.01)
    with pytest.raises(ValueError):
        ev.common_grid((0, 1), (2, 3))
