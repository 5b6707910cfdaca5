import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import SQUARE, box_arrangement, random_flat_arrangement, wedge_arrangement
from waitermpc.balance import (
    TRAY,
    Arrangement,
    BalanceError,
    ContactPoint,
    Patch,
    RigidObject,
    balance_residual,
    box_inertia,
    contact_wrench,
    feasibility_oracle,
    friction_pyramid_residual,
    friction_utilization,
    gravito_inertial_wrench,
    polygon_margin,
    support_plane,
    zmp,
)
from waitermpc.kinematics import EEState, rpy_to_matrix

G = 9.81


def accel(a, R=None):
    e = EEState.at_rest(R)
    e.varpi_dot[:3] = a
    return e


def test_static_gravity_wrench():
    obj = RigidObject("o", 0.5, np.zeros(3), np.zeros((3, 3)))
    np.testing.assert_allclose(gravito_inertial_wrench(EEState.at_rest(), obj), [0, 0, -4.905, 0, 0, 0])


def test_linear_acceleration_wrench():
    obj = RigidObject("o", 0.5, np.zeros(3), np.zeros((3, 3)))
    w = gravito_inertial_wrench(accel([1.0, 0.0, 0.0]), obj)
    np.testing.assert_allclose(w[:3], [-0.5, 0.0, -4.905])


def test_centripetal_term():
    obj = RigidObject("o", 1.0, [0.1, 0.0, 0.0], np.zeros((3, 3)))
    e = EEState.at_rest()
    e.varpi[3:] = [0.0, 0.0, 2.0]
    w = gravito_inertial_wrench(e, obj)
    np.testing.assert_allclose(w[:3] - [0.0, 0.0, -9.81], [0.4, 0.0, 0.0], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-np.pi, np.pi), min_size=3, max_size=3))
def test_static_wrench_any_orientation(rpy):
    R = rpy_to_matrix(rpy)
    obj = RigidObject("o", 0.7, [0.01, 0.02, 0.1], box_inertia(0.7, (0.1, 0.1, 0.2)))
    w = gravito_inertial_wrench(EEState.at_rest(R), obj)
    np.testing.assert_allclose(w, np.r_[0.7 * R.T @ [0, 0, -G], np.zeros(3)], atol=1e-12)


def test_symmetric_contacts_cancel_gravity():
    arr = box_arrangement()
    f = np.tile([0.0, 0.0, 1.22625], 4)
    np.testing.assert_allclose(contact_wrench(f, arr, 0), [0, 0, 4.905, 0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(balance_residual(EEState.at_rest(), f, arr, scaled=False), 0.0, atol=1e-12)
    # removing one contact leaves exactly its contribution
    f2 = f.copy()
    f2[:3] = 0.0
    r = balance_residual(EEState.at_rest(), f2, arr, scaled=False)
    p = arr.contacts[0].position - arr.objects[0].com
    np.testing.assert_allclose(r, -np.r_[f[:3], np.cross(p, f[:3])], atol=1e-12)


def test_single_contact_wrench():
    obj = RigidObject("o", 1.0, np.zeros(3), np.eye(3) * 1e-3)
    verts = np.array([[0.1, 0, 0], [-0.1, 0.1, 0], [-0.1, -0.1, 0]])
    arr = Arrangement([obj], [Patch(verts, [0, 0, 1], 0.5, 0.5, TRAY, 0)])
    f = np.zeros(9)
    f[2] = 1.0
    np.testing.assert_allclose(contact_wrench(f, arr, 0), [0, 0, 1, 0, -0.1, 0], atol=1e-12)


def test_shared_contact_is_equal_and_opposite():
    arr = wedge_arrangement()
    shared = [i for i, c in enumerate(arr.contacts) if c.supporter == 0]
    xi = np.zeros(3 * arr.N)
    xi[3 * shared[0] : 3 * shared[0] + 3] = [0.1, 0.2, 1.0]
    on_box = contact_wrench(xi, arr, 1)
    on_wedge = contact_wrench(xi, arr, 0)
    np.testing.assert_allclose(on_box[:3], -on_wedge[:3])
    np.testing.assert_allclose(on_box[:3], [0.1, 0.2, 1.0])


def test_unknown_object():
    with pytest.raises(BalanceError):
        contact_wrench(np.zeros(12), box_arrangement(), 3)


def test_pyramid_rows():
    S = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    cp = ContactPoint(np.zeros(3), np.array([0, 0, 1.0]), S, 0.2, 0.2, TRAY, 0)
    np.testing.assert_allclose(friction_pyramid_residual([0, 0, 1], cp), [1, 0.2, 0.2, 0.2, 0.2])
    r = friction_pyramid_residual([0.3, 0, 1], cp)
    assert r.min() == pytest.approx(-0.1)
    cp0 = ContactPoint(np.zeros(3), np.array([0, 0, 1.0]), S, 0.0, 0.0, TRAY, 0)
    assert friction_pyramid_residual([0, 0, 2], cp0).min() >= 0
    assert friction_pyramid_residual([1e-3, 0, 2], cp0).min() < 0


def test_contact_point_invariants():
    S = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    with pytest.raises(BalanceError):
        ContactPoint(np.zeros(3), np.array([0, 0, 2.0]), S, 0.2, 0.2, TRAY, 0)
    with pytest.raises(BalanceError):
        ContactPoint(np.zeros(3), np.array([0, 0, 1.0]), S, -0.1, 0.2, TRAY, 0)


def test_object_invariants():
    with pytest.raises(BalanceError):
        RigidObject("o", 0.0, np.zeros(3), np.eye(3))
    with pytest.raises(BalanceError):
        RigidObject("o", 1.0, np.zeros(3), np.diag([1.0, 1.0, 3.0]))


def test_collinear_contacts_rejected():
    obj = RigidObject("o", 1.0, np.zeros(3), np.eye(3) * 1e-3)
    verts = np.array([[0.1, 0, 0], [0.0, 0, 0], [-0.1, 0, 0]])
    with pytest.raises(BalanceError):
        Arrangement([obj], [Patch(verts, [0, 0, 1], 0.5, 0.5, TRAY, 0)])


def test_scaled_residual_ratio():
    objs, patches = [], []
    for k in range(7):
        objs.append(RigidObject(f"c{k}", 0.2, [0.1 * k, 0, 0.05], box_inertia(0.2, (0.05, 0.05, 0.1))))
        patches.append(Patch(0.02 * SQUARE + [0.1 * k, 0, 0], [0, 0, 1], 0.3, 0.3, TRAY, k))
    arr = Arrangement(objs, patches)
    assert arr.N == 28
    e = accel([0.3, -0.2, 0.1])
    xi = np.random.default_rng(0).normal(size=3 * arr.N)
    W = arr.wrench_matrix()
    wgi = np.concatenate([gravito_inertial_wrench(e, o) for o in objs])
    np.testing.assert_allclose(balance_residual(e, xi, arr), (W @ xi + wgi / np.sqrt(28)) / 0.2)


def test_zmp_static_centered():
    arr = box_arrangement()
    p = zmp(EEState.at_rest(), arr.objects[0], support_plane(arr, 0))
    np.testing.assert_allclose(p, 0.0, atol=1e-12)


def test_zmp_offset_under_acceleration():
    arr = box_arrangement()
    p = zmp(accel([1.0, 0.0, 0.0]), arr.objects[0], support_plane(arr, 0))
    np.testing.assert_allclose(p, [-0.1 / G, 0.0], atol=1e-12)
    assert abs(p[0]) == pytest.approx(0.0102, abs=5e-5)


def test_zmp_tipping_limit():
    arr = box_arrangement()
    plane = support_plane(arr, 0)
    a_tip = G * 0.03 / 0.1
    assert a_tip == pytest.approx(2.943)
    assert polygon_margin(zmp(accel([a_tip - 1e-3, 0, 0]), arr.objects[0], plane), plane.polygon) > 0
    assert polygon_margin(zmp(accel([a_tip + 1e-3, 0, 0]), arr.objects[0], plane), plane.polygon) < 0
    # with ample friction the LP fails exactly where the ZMP leaves the polygon
    big = arr.with_mu(10.0)
    assert feasibility_oracle(accel([a_tip - 1e-3, 0, 0]), big).feasible
    assert not feasibility_oracle(accel([a_tip + 1e-3, 0, 0]), big).feasible


def test_zmp_unloaded():
    arr = box_arrangement()
    with pytest.raises(BalanceError):
        zmp(accel([0.0, 0.0, -2 * G]), arr.objects[0], support_plane(arr, 0))


def test_oracle_slip_limit():
    arr = box_arrangement()
    assert feasibility_oracle(EEState.at_rest(), arr).feasible
    assert feasibility_oracle(accel([1.9, 0, 0]), arr).feasible
    assert not feasibility_oracle(accel([2.1, 0, 0]), arr).feasible


def test_oracle_wedge_threshold():
    t = np.tan(np.deg2rad(15.0))
    assert feasibility_oracle(EEState.at_rest(), wedge_arrangement(mu=t + 1e-3)).feasible
    assert not feasibility_oracle(EEState.at_rest(), wedge_arrangement(mu=t - 1e-3)).feasible


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 1.0), st.floats(-np.pi, np.pi))
def test_oracle_level_support_feasible(seed, mu, yaw):
    arr = random_flat_arrangement(np.random.default_rng(seed), mu=mu)
    e = EEState.at_rest(rpy_to_matrix([0.0, 0.0, yaw]))
    res = feasibility_oracle(e, arr)
    assert res.feasible
    f = res.forces.reshape(-1, 3)
    for i, cp in enumerate(arr.contacts):
        assert friction_pyramid_residual(f[i], cp).min() >= -1e-9
    assert np.abs(balance_residual(e, res.forces, arr, scaled=False)).max() <= 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_scalar_full_equivalence_random_states(seed):
    rng = np.random.default_rng(seed)
    arr = random_flat_arrangement(rng, mu=0.0)
    agree = 0
    for _ in range(20):
        e = EEState.at_rest(rpy_to_matrix(rng.normal(scale=0.05, size=3)))
        e.varpi_dot[:] = rng.normal(scale=0.5, size=6) * (rng.random() < 0.5)
        agree += feasibility_oracle(e, arr).feasible == feasibility_oracle(e, arr, scalar=True).feasible
    assert agree == 20


def test_shrunk_patch():
    arr = box_arrangement()
    s = arr.shrunk(0.005)
    np.testing.assert_allclose(np.abs(s.contacts[0].position[:2]), [0.025, 0.025])
    with pytest.raises(BalanceError):
        arr.shrunk(0.05)


def test_friction_utilization():
    arr = box_arrangement()
    assert friction_utilization(EEState.at_rest(), arr) == 0.0
    u = friction_utilization(accel([1.0, 0, 0]), arr, tol=1e-4)
    assert u == pytest.approx(1.0 / (0.2 * G), abs=2e-4)
    assert friction_utilization(accel([0.0, 0, -2 * G]), arr) == np.inf
