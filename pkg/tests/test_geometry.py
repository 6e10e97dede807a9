import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from structnav.geometry import (
    DegenerateLine,
    ImuState,
    LineCP,
    PlaneCP,
    PlueckerLine,
    Point3,
    Pose,
    SlidingWindowState,
    boxplus,
    cp_to_pluecker,
    pluecker_to_cp,
    quat_exp,
    quat_to_rot,
    rot_to_quat,
    so3_exp,
    so3_log,
    transform_line,
    transform_line_to_global,
    transform_plane,
    transform_plane_to_global,
    transform_point,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)
vec4 = arrays(np.float64, 4, elements=finite)


def pose_from(rv, p):
    return Pose(quat_exp(rv), p)


def line_from(point, direction):
    return PlueckerLine.from_points(point, point + direction)


# -- boxplus -----------------------------------------------------------------


def test_boxplus_identity_pose_zero():
    x = Pose()
    y = boxplus(x, np.zeros(6))
    assert np.array_equal(y.q, x.q) and np.array_equal(y.p, x.p)


def test_boxplus_quarter_turn_about_z():
    y = Pose().boxplus(np.array([0, 0, np.pi / 2, 0, 0, 0]))
    c = np.cos(np.pi / 4)
    assert np.allclose(y.q, [c, 0, 0, c], atol=1e-15)
    assert np.allclose(y.R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_boxplus_second_order_composition():
    rng = np.random.default_rng(3)
    x = ImuState(pose_from(rng.normal(size=3), rng.normal(size=3)), rng.normal(size=3))
    d1 = 1e-4 * rng.normal(size=15)
    d2 = 1e-4 * rng.normal(size=15)
    a = x.boxplus(d1).boxplus(d2)
    b = x.boxplus(d1 + d2)
    assert np.linalg.norm(a.boxminus(b)) <= 1e-7


def test_boxplus_dimension_mismatch():
    with pytest.raises(ValueError):
        Pose().boxplus(np.zeros(5))
    with pytest.raises(ValueError):
        LineCP.from_qd([1, 0, 0, 0], 1.0).boxplus(np.zeros(3))


@given(vec3, vec3, arrays(np.float64, 6, elements=st.floats(-3, 3)))
def test_pose_unit_quaternion_after_retraction(rv, p, d):
    y = pose_from(rv, p).boxplus(d)
    assert abs(np.linalg.norm(y.q) - 1.0) <= 1e-12
    assert y.q[0] >= 0
    R = y.R
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1.0) <= 1e-9


@given(vec3, vec3, vec3, vec4)
def test_zero_boxplus_is_exact(rv, p, v, x):
    s = ImuState(pose_from(rv, p), v)
    out = s.boxplus(np.zeros(15))
    assert np.array_equal(out.pose.q, s.pose.q) and np.array_equal(out.v, s.v)
    for obj in (Point3(v), LineCP(x + 0.1), PlaneCP(v + 0.1)):
        out = obj.boxplus(np.zeros(obj.DIM))
        assert np.array_equal(obj.boxminus(out), np.zeros(obj.DIM))


def test_window_tangent_dimension_and_order():
    w = SlidingWindowState()
    w[("imu", 0)] = ImuState()
    w[("plane", 7)] = PlaneCP([0, 0, 2.0])
    w[("point", 3)] = Point3([1, 2, 3])
    w[("line", 1)] = LineCP.from_qd([1, 0, 0, 0], 1.0)
    w[("imu", 1)] = ImuState()
    assert w.dim == 2 * 15 + 3 + 4 + 3
    assert w.keys() == [("imu", 0), ("imu", 1), ("point", 3), ("line", 1), ("plane", 7)]
    offsets, dim = w.layout()
    assert dim == w.dim and offsets[("line", 1)] == (33, 4)


# -- conversions -----------------------------------------------------------------


def test_pluecker_to_cp_hand_example():
    line = PlueckerLine([0, -1, 0], [0, 0, 1])
    assert np.allclose(line.n, np.cross([1, 0, 0], [1, 0, 1]))
    cp = pluecker_to_cp(line)
    assert cp.d == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(cp.R, np.column_stack([[0, -1, 0], [0, 0, 1], [-1, 0, 0]]), atol=1e-12)
    back = cp_to_pluecker(cp)
    assert np.allclose(back.n, [0, -1, 0], atol=1e-12)
    assert np.allclose(back.v, [0, 0, 1], atol=1e-12)


def test_pluecker_scale_invariance():
    line = line_from(np.array([1.0, 2.0, 0.5]), np.array([0.3, -1.0, 0.2]))
    a = pluecker_to_cp(line)
    b = pluecker_to_cp(PlueckerLine(2 * line.n, 2 * line.v))
    assert np.allclose(a.x, b.x, atol=1e-12)


def test_zero_distance_cp_gives_zero_normal():
    for q in ([1, 0, 0, 0], quat_exp([0.3, 0.1, -0.2])):
        cp = LineCP.from_qd(q, 0.0)
        assert cp.d == 0.0
        line = cp_to_pluecker(cp)
        assert np.array_equal(line.n, np.zeros(3))
        assert np.linalg.norm(line.v) == pytest.approx(1.0)


def test_degenerate_line_through_origin():
    with pytest.raises(DegenerateLine):
        pluecker_to_cp(PlueckerLine([0, 0, 0], [0, 0, 1]))
    with pytest.raises(DegenerateLine):
        pluecker_to_cp(PlueckerLine([1, 0, 0], [0, 0, 0]))


def test_closest_point_sign():
    # line x = 1, y = 0 along z
    line = PlueckerLine([0, -1, 0], [0, 0, 1])
    assert np.allclose(line.closest_point(), [1, 0, 0])
    cp = pluecker_to_cp(line)
    assert np.allclose(-cp.d * cp.R[:, 2], [1, 0, 0], atol=1e-12)


@settings(max_examples=200)
@given(vec3, vec3)
def test_line_round_trip(point, direction):
    if np.linalg.norm(direction) < 1e-2:
        return
    line = line_from(point, direction)
    if np.linalg.norm(line.n) / np.linalg.norm(line.v) < 1e-3:
        return
    back = cp_to_pluecker(pluecker_to_cp(line))
    s = np.linalg.norm(line.v)
    assert np.allclose(back.v, line.v / s, atol=1e-12)
    assert np.allclose(back.n, line.n / s, atol=1e-11 * max(1.0, np.linalg.norm(line.n / s)))
    assert abs(back.n @ back.v) <= 1e-12 * max(1.0, np.linalg.norm(back.n))


@settings(max_examples=200)
@given(vec4, st.floats(0.01, 20))
def test_random_cp_orthogonal(q, d):
    if np.linalg.norm(q) < 1e-3:
        return
    cp = LineCP.from_qd(q, d)
    R = cp.R
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    line = cp_to_pluecker(cp)
    assert abs(line.n @ line.v) <= 1e-12 * max(d, 1.0)
    assert np.linalg.norm(line.n) / np.linalg.norm(line.v) == pytest.approx(d, abs=1e-9)


@given(vec3)
def test_rotation_round_trip(rv):
    R = so3_exp(rv)
    assert np.allclose(quat_to_rot(rot_to_quat(R)), R, atol=1e-12)
    theta = np.linalg.norm(rv)
    if theta < np.pi - 1e-3:
        assert np.allclose(so3_log(R), rv, atol=1e-9)


# -- transforms --------------------------------------------------------------------


def test_transform_line_identity_pose():
    line = PlueckerLine([0, -1, 0], [0, 0, 1])
    out = transform_line(Pose(), line)
    assert np.array_equal(out.n, line.n) and np.array_equal(out.v, line.v)


def test_transform_line_through_sensor():
    line = line_from(np.array([1.0, 0, 0]), np.array([0, 0, 1.0]))
    out = transform_line(Pose(p=[1, 0, 0]), line)
    assert np.allclose(out.n, 0.0, atol=1e-15)
    assert np.allclose(out.v, [0, 0, 1])


def test_transform_plane_examples():
    n, d = transform_plane(Pose(), [0, 0, 1], 2.0)
    assert np.allclose(n, [0, 0, 1]) and d == 2.0
    n, d = transform_plane(Pose(p=[0, 0, 1]), [0, 0, 1], 2.0)
    assert np.allclose(n, [0, 0, 1]) and d == pytest.approx(1.0)


@settings(max_examples=100)
@given(vec3, vec3, vec3, vec3, st.floats(-4, 4))
def test_line_transform_round_trip_and_incidence(rv, p, a, direction, s):
    if np.linalg.norm(direction) < 1e-2:
        return
    pose = pose_from(rv, p)
    line = line_from(a, direction)
    local = transform_line(pose, line)
    back = transform_line_to_global(pose, local)
    assert np.allclose(back.n, line.n, atol=1e-12 * (1 + np.linalg.norm(line.n) + 10 * np.linalg.norm(line.v)))
    assert np.allclose(back.v, line.v, atol=1e-12 * (1 + np.linalg.norm(line.v)))
    x = a + s * direction
    assert local.distance_to(transform_point(pose, x)) <= 1e-9 * (1 + np.linalg.norm(x))


@settings(max_examples=100)
@given(vec3, vec3, vec3, st.floats(0.1, 10), vec3)
def test_plane_transform_round_trip_and_incidence(rv, p, n, d, t):
    if np.linalg.norm(n) < 1e-2:
        return
    n = n / np.linalg.norm(n)
    pose = pose_from(rv, p)
    nl, dl = transform_plane(pose, n, d)
    assert np.linalg.norm(nl) == pytest.approx(1.0, abs=1e-12)
    ng, dg = transform_plane_to_global(pose, nl, dl)
    assert np.allclose(ng, n, atol=1e-12) and dg == pytest.approx(d, abs=1e-12 * (1 + abs(d) + np.linalg.norm(p)))
    # a point on the plane stays on it
    x = d * n + t - (t @ n) * n
    assert abs(nl @ transform_point(pose, x) - dl) <= 1e-9 * (1 + np.linalg.norm(x) + np.linalg.norm(p))
