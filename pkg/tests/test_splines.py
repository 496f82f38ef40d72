import numpy as np
import pytest

from ctsfm import lie
from ctsfm.splines import (CUMULATIVE, KnotGrid, R3Spline, Se3Spline, So3Spline, SupportError, WindowBasis,
                           cumulative_basis, r3_window, so3_window)

from conftest import away_from_knots


def cox_de_boor(i, k, x, knots):
    if k == 0:
        return 1.0 if knots[i] <= x < knots[i + 1] else 0.0
    a = (x - knots[i]) / (knots[i + k] - knots[i]) * cox_de_boor(i, k - 1, x, knots)
    b = (knots[i + k + 1] - x) / (knots[i + k + 1] - knots[i + 1]) * cox_de_boor(i + 1, k - 1, x, knots)
    return a + b


def reference_cumulative(u):
    knots = np.arange(8.0)
    b = np.array([cox_de_boor(j, 3, 3.0 + u, knots) for j in range(4)])
    return np.cumsum(b[::-1])[::-1]


def test_basis_matrix_matches_recurrence():
    for u in np.linspace(0, 0.999, 37):
        p = np.array([1, u, u * u, u ** 3])
        assert np.allclose(CUMULATIVE @ p, reference_cumulative(u), atol=1e-14)


def test_cumulative_basis_examples():
    grid = KnotGrid(0.0, 0.5, 8)
    cb = cumulative_basis(grid, grid.t0 + grid.dt)
    assert np.allclose(cb.btilde, [1, 5 / 6, 1 / 6, 0], atol=1e-15)
    assert cb.btilde[0] == 1.0
    cb = cumulative_basis(grid, grid.t0 + 2 * grid.dt - 1e-12)
    assert np.allclose(cb.btilde, [1, 1, 5 / 6, 1 / 6], atol=1e-9)
    assert np.allclose(reference_cumulative(1 - 1e-12), [1, 1, 5 / 6, 1 / 6], atol=1e-9)


def test_cumulative_basis_properties(rng):
    grid = KnotGrid(-1.0, 0.2, 12)
    for t in rng.uniform(grid.start, grid.end, 200):
        cb = cumulative_basis(grid, t)
        assert cb.btilde[0] == 1.0
        assert np.all((cb.btilde >= 0) & (cb.btilde <= 1))
        assert np.all(np.diff(cb.btilde) <= 1e-15)


def test_partition_of_unity(rng):
    grid = KnotGrid(0.0, 0.1, 20)
    basis = WindowBasis.at(grid, rng.uniform(grid.start, grid.end, 1000))
    assert np.max(np.abs(basis.b.sum(axis=1) - 1)) <= 1e-12
    assert np.max(np.abs(basis.db.sum(axis=1))) <= 1e-9
    diffs = np.concatenate([basis.bt[:, :-1] - basis.bt[:, 1:], basis.bt[:, -1:]], axis=1)
    assert np.max(np.abs(diffs.sum(axis=1) - 1)) <= 1e-12


def test_support_errors():
    grid = KnotGrid(0.0, 0.1, 6)
    assert grid.start == pytest.approx(0.1) and grid.end == pytest.approx(0.4)
    with pytest.raises(SupportError, match="out of spline support"):
        cumulative_basis(grid, 0.05)
    with pytest.raises(SupportError):
        WindowBasis.at(grid, [0.2, 0.5])
    with pytest.raises(ValueError):
        KnotGrid(0.0, 0.1, 3)
    with pytest.raises(ValueError):
        KnotGrid(0.0, 0.0, 5)


def test_covering_padding():
    g = KnotGrid.covering(1.0, 3.0, 0.25)
    assert g.start <= 1.0 - 0.25 + 1e-12 and g.end >= 3.0 + 0.25 - 1e-12


def test_r3_constant():
    grid = KnotGrid(0.0, 0.1, 8)
    s = R3Spline(grid, np.tile([1.0, -2.0, 3.0], (8, 1)))
    t = np.linspace(grid.start, grid.end, 50)
    assert np.allclose(s.eval(t), [1, -2, 3], atol=1e-14)
    assert np.allclose(s.eval(t, 1), 0, atol=1e-12)
    assert np.allclose(s.eval(t, 2), 0, atol=1e-10)


def test_r3_cumulative_equals_direct(rng):
    grid = KnotGrid(0.0, 0.1, 15)
    s = R3Spline(grid, rng.normal(size=(15, 3)))
    t = rng.uniform(grid.start, grid.end, 1000)
    for order in range(3):
        direct, cum = s.eval(t, order), s.eval_cumulative(t, order)
        assert np.max(np.abs(direct - cum)) < 1e-12 * max(1.0, np.abs(direct).max())


def test_r3_derivatives_fd(rng):
    grid = KnotGrid(0.0, 0.1, 15)
    s = R3Spline(grid, rng.normal(size=(15, 3)))
    t = rng.uniform(grid.start + 0.01, grid.end - 0.01, 200)
    h = 1e-5
    fd = (s.eval(t + h) - s.eval(t - h)) / (2 * h)
    assert np.max(np.abs(fd - s.eval(t, 1))) < 1e-6 * np.abs(s.eval(t, 1)).max()
    fd2 = (s.eval(t + h, 1) - s.eval(t - h, 1)) / (2 * h)
    assert np.max(np.abs(fd2 - s.eval(t, 2))) < 1e-6 * np.abs(s.eval(t, 2)).max()


def knot_sides(grid, k):
    """Bases of the segments left and right of knot ``k``, both evaluated exactly at the knot."""
    tk = np.array([grid.t0 + k * grid.dt])
    return WindowBasis.on_segment(grid, tk, np.array([k - 2])), WindowBasis.on_segment(grid, tk, np.array([k - 1]))


def test_r3_c2_continuity(rng):
    grid = KnotGrid(0.0, 0.1, 10)
    P = rng.normal(size=(10, 3))
    for k in range(3, 8):
        left, right = knot_sides(grid, k)
        for order in range(3):
            a = r3_window(P[left.window_indices()], left, 2)[order]
            b = r3_window(P[right.window_indices()], right, 2)[order]
            assert np.max(np.abs(a - b)) < 1e-9 * max(1.0, np.abs(a).max())


def test_so3_constant():
    grid = KnotGrid(0.0, 0.1, 8)
    q0 = lie.quat_exp(np.array([0.3, -0.2, 0.5]))
    s = So3Spline(grid, np.tile(q0, (8, 1)))
    q, dq, ddq = s.eval(np.linspace(grid.start, grid.end, 20))
    assert np.allclose(q, q0, atol=1e-14) and np.allclose(dq, 0, atol=1e-14)


def test_so3_constant_rate():
    grid = KnotGrid(0.0, 0.1, 12)
    w = 0.7
    s = So3Spline(grid, lie.quat_exp(np.outer(np.arange(12) * grid.dt * w, [0, 0, 1])))
    t = np.linspace(grid.start, grid.end, 100)
    _, omega, _ = s.rates(t)
    assert np.max(np.abs(omega - [0, 0, w])) < 1e-6
    # finite-difference oracle of the body rate
    h = 1e-6
    qa, qb = s.rates(t[1:-1] - h, 0)[0], s.rates(t[1:-1] + h, 0)[0]
    fd = lie.quat_log(lie.quat_mul(lie.quat_conj(qa), qb)) / (2 * h)
    assert np.max(np.abs(fd - [0, 0, w])) < 1e-6


def test_so3_unit_norm_and_rates(rng):
    grid = KnotGrid(0.0, 0.1, 15)
    quats = lie.quat_exp(np.cumsum(rng.normal(scale=0.4, size=(15, 3)), axis=0))
    s = So3Spline(grid, quats)
    t = rng.uniform(grid.start + 1e-3, grid.end - 1e-3, 1000)
    q, dq, ddq = s.eval(t)
    assert np.max(np.abs(np.linalg.norm(q, axis=1) - 1)) < 1e-9
    h = 1e-6
    fd = (s.eval(t + h)[0] - s.eval(t - h)[0]) / (2 * h)
    assert np.max(np.abs(fd - dq)) < 1e-6 * np.abs(dq).max()
    fd2 = (s.eval(t + h)[1] - s.eval(t - h)[1]) / (2 * h)
    assert np.max(np.abs(fd2 - ddq)) < 1e-5 * np.abs(ddq).max()


def test_so3_sign_continuity(rng):
    grid = KnotGrid(0.0, 0.1, 10)
    q = lie.quat_normalize(rng.normal(size=(10, 4)))
    s = So3Spline(grid, q * rng.choice([-1, 1], (10, 1)))
    assert np.all(np.sum(s.quats[1:] * s.quats[:-1], axis=1) >= 0)


def test_so3_continuity(rng):
    grid = KnotGrid(0.0, 0.1, 10)
    s = So3Spline(grid, lie.quat_exp(np.cumsum(rng.normal(scale=0.3, size=(10, 3)), axis=0)))
    for k in range(3, 8):
        left, right = knot_sides(grid, k)
        a = so3_window(s.quats[left.window_indices()], left, 2)
        b = so3_window(s.quats[right.window_indices()], right, 2)
        for x, y in zip(a, b):
            assert np.max(np.abs(x - y)) < 1e-9 * max(1.0, np.abs(x).max())


def test_se3_constant():
    grid = KnotGrid(0.0, 0.1, 8)
    q0 = lie.quat_exp(np.array([0.2, 0.1, -0.4]))
    s = Se3Spline(grid, np.tile(q0, (8, 1)), np.tile([1.0, 2.0, 3.0], (8, 1)))
    poses, dT, ddT = s.eval(np.linspace(grid.start, grid.end, 10))
    for T in poses:
        assert np.allclose(T.p, [1, 2, 3], atol=1e-13)
        assert np.allclose(T.R, lie.quat_to_rotmat(q0), atol=1e-13)
    assert np.allclose(dT, 0, atol=1e-12) and np.allclose(ddT, 0, atol=1e-10)


def test_se3_identity_orientation_matches_r3(rng):
    grid = KnotGrid(0.0, 0.1, 12)
    P = rng.normal(size=(12, 3))
    se3 = Se3Spline(grid, lie.quat_identity((12,)), P)
    r3 = R3Spline(grid, P)
    t = rng.uniform(grid.start, grid.end, 200)
    poses, _, _ = se3.eval(t)
    assert np.max(np.abs(np.stack([T.p for T in poses]) - r3.eval(t))) < 1e-12


def rotating_se3(rng, count=12):
    grid = KnotGrid(0.0, 0.1, count)
    q = lie.quat_exp(np.cumsum(rng.normal(scale=0.4, size=(count, 3)), axis=0))
    return Se3Spline(grid, q, rng.normal(size=(count, 3)))


def test_se3_velocity_fd(rng):
    s = rotating_se3(rng)
    t = rng.uniform(s.grid.start + 1e-3, s.grid.end - 1e-3, 200)
    h = 1e-5
    pa = np.stack([T.p for T in s.eval(t - h)[0]])
    pb = np.stack([T.p for T in s.eval(t + h)[0]])
    dT = s.eval(t)[1]
    fd = (pb - pa) / (2 * h)
    assert np.max(np.abs(fd - dT[:, :3, 3])) < 1e-6 * np.abs(dT[:, :3, 3]).max()
    Ra = np.stack([T.R for T in s.eval(t - h)[0]])
    Rb = np.stack([T.R for T in s.eval(t + h)[0]])
    assert np.max(np.abs((Rb - Ra) / (2 * h) - dT[:, :3, :3])) < 1e-6 * np.abs(dT[:, :3, :3]).max()


def test_se3_acceleration_pathology(rng):
    s = rotating_se3(rng)
    t = away_from_knots(s.grid, 200, rng)
    h = 1e-4
    fd2 = (s.eval(t + h)[1][:, :3, 3] - s.eval(t - h)[1][:, :3, 3]) / (2 * h)
    ddT = s.eval(t)[2][:, :3, 3]
    rel = np.max(np.abs(fd2 - ddT)) / np.abs(fd2).max()
    assert rel > 10 * 1e-6
    # the exact kinematic acceleration does agree
    assert np.max(np.abs(fd2 - s.kinematic_acceleration(t))) < 1e-6 * np.abs(fd2).max()


def test_se3_constant_orientation_acceleration(rng):
    grid = KnotGrid(0.0, 0.1, 12)
    q0 = lie.quat_exp(np.array([0.4, -0.1, 0.2]))
    s = Se3Spline(grid, np.tile(q0, (12, 1)), rng.normal(size=(12, 3)))
    t = away_from_knots(grid, 200, rng)
    h = 1e-4
    fd2 = (s.eval(t + h)[1][:, :3, 3] - s.eval(t - h)[1][:, :3, 3]) / (2 * h)
    ddT = s.eval(t)[2][:, :3, 3]
    assert np.max(np.abs(fd2 - ddT)) < 1e-6 * np.abs(fd2).max()


def test_se3_branch_error():
    grid = KnotGrid(0.0, 0.1, 5)
    q = lie.quat_identity((5,))
    q[3] = lie.quat_exp(np.array([0, 0, np.pi - 1e-9]))
    s = Se3Spline(grid, q, np.zeros((5, 3)))
    with pytest.raises(lie.LogBranchError, match="log branch boundary"):
        s.eval(0.2)
