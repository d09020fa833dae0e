import numpy as np
import pytest

from fecbf.cbf import SafetyParams, jacobians, normalized_frames, virtual_state
from fecbf.kinematics import UavLimits, UavState, velocity_components
from fecbf.sign_consistency import (NeighborHistory, cone_axis, input_box, sc_coefficients,
                                    worst_case_sdot, worst_case_sdots)

P = SafetyParams()
R3 = np.sqrt(3) / 3
BETA = 7 * np.pi / 24


def _vel(s):
    return velocity_components(s.speed, s.pitch, s.yaw)


def test_cone_axis_level_flight():
    d = cone_axis(UavState([0, 0, 0], 2.0, 0.0, 0.0), np.array([3.0, -2.0, 5.0]))
    # frame columns are heading, up, left: local [3, 5, -2]
    np.testing.assert_allclose(d, R3 * np.array([1, 1, -1]))
    world = normalized_frames(0.0, 0.0) @ d
    np.testing.assert_allclose(world, R3 * np.array([1, -1, 1]), atol=1e-15)


def test_cone_axis_zero_component_and_norm():
    d = cone_axis(UavState([1, 1, 1], 2.0, 0.0, 0.0), np.array([1.0, 1.0, 4.0]))
    assert d[2] == pytest.approx(R3)          # lateral component is exactly zero
    rng = np.random.default_rng(0)
    for _ in range(50):
        st = UavState(rng.normal(size=3) * 50, 2.0, rng.uniform(-1.5, 1.5), rng.uniform(0, 6.28))
        goal = rng.normal(size=3) * 100
        d = cone_axis(st, goal)
        assert np.linalg.norm(d) == pytest.approx(1.0, abs=1e-12)
        scaled = st.position + rng.uniform(0.1, 10) * (goal - st.position)
        np.testing.assert_array_equal(cone_axis(st, scaled), d)


def test_history_estimates():
    lim = UavLimits.from_vmax(2.5)
    h = NeighborHistory()
    h.append(0.0, UavState([0, 0, 0], 2.0, 0.1, 0.2))
    assert h.input_estimate(lim) is None
    h.append(0.1, UavState([0.2, 0, 0], 2.0, 0.1, 0.2))
    np.testing.assert_allclose(h.input_estimate(lim), 0.0)
    h.append(0.2, UavState([0.4, 0, 0], 3.0, 0.1, 0.2))     # 10 m/s^2 clamps to a_max
    assert h.input_estimate(lim)[0] == pytest.approx(lim.u_max[0])
    with pytest.raises(ValueError):
        h.append(0.2, UavState([0, 0, 0], 2.0, 0, 0))


def test_single_sample_uses_full_box_corner():
    lim = UavLimits.from_vmax(2.5)
    st = UavState([10, 0, 0], 2.0, 0.0, 0.0)
    h = NeighborHistory()
    h.append(0.0, st)
    # axis pointing against every column of W_j: all coefficients negative
    Wt = normalized_frames(0.0, 0.0)
    d = -R3 * np.ones(3)
    sd = worst_case_sdot(h, d, Wt, lim, P)
    expected = _vel(st) + P.zeta * jacobians(2.0, 0.0, 0.0) @ lim.u_min
    np.testing.assert_allclose(sd, expected)


def test_worst_case_matches_dense_sampling():
    rng = np.random.default_rng(1)
    lim = UavLimits.from_vmax(2.5)
    for _ in range(20):
        h = NeighborHistory()
        st0 = UavState(rng.normal(size=3), rng.uniform(1, 2.5), rng.uniform(-1, 1), rng.uniform(0, 6))
        st1 = UavState(rng.normal(size=3), np.clip(st0.speed + rng.normal(0, 0.05), 0.7, 2.5),
                       st0.pitch + rng.normal(0, 0.005), st0.yaw + rng.normal(0, 0.01))
        h.append(0.0, st0)
        h.append(0.1, st1)
        Wt = normalized_frames(rng.uniform(-1, 1), rng.uniform(0, 6))
        d = R3 * rng.choice([-1.0, 1.0], size=3)
        sd = worst_case_sdot(h, d, Wt, lim, P)
        lo, hi = input_box(h.input_estimate(lim), lim.u_min, lim.u_max)
        samples = rng.uniform(lo, hi, size=(1000, 3))
        W = jacobians(st1.speed, st1.pitch, st1.yaw)
        axis = Wt @ d
        vals = (_vel(st1) + P.zeta * samples @ W.T) @ axis
        best = axis @ sd
        assert best >= vals.max() - 1e-9
        # the corner itself is admissible, so the maximum is attained
        corner = np.linalg.lstsq(P.zeta * W, sd - _vel(st1), rcond=None)[0]
        assert np.all(corner >= lo - 1e-9) and np.all(corner <= hi + 1e-9)


def test_worst_case_monotone_in_box():
    rng = np.random.default_rng(2)
    for _ in range(50):
        Wt = normalized_frames(rng.uniform(-1, 1, 1), rng.uniform(0, 6, 1))
        W = jacobians(rng.uniform(1, 3, 1), rng.uniform(-1, 1, 1), rng.uniform(0, 6, 1))
        d = R3 * rng.choice([-1.0, 1.0], size=(1, 3))
        v = rng.normal(size=(1, 3))
        lo, hi = -rng.uniform(0, 1, (1, 3)), rng.uniform(0, 1, (1, 3))
        grow = rng.uniform(0, 0.5, (1, 3))
        a = worst_case_sdots(d, Wt, v, W, lo, hi, 0.5)[0, 0]
        b = worst_case_sdots(d, Wt, v, W, lo - grow, hi + grow, 0.5)[0, 0]
        axis = Wt[0] @ d[0]
        assert axis @ b >= axis @ a - 1e-12


def test_aligned_case_and_right_angle_limit():
    si = UavState([0, 0, 0], 2.0, 0.2, 0.4)
    d = R3 * np.array([1.0, -1.0, 1.0])
    axis = normalized_frames(si.pitch, si.yaw) @ d
    vj_state = UavState([0, 0, 0], 2.5, -0.1, 2.0)
    # place j so that s_i + v_i - s_j - v_j = 40 * axis
    s_j = virtual_state(si, P) + _vel(si) - _vel(vj_state) - 40 * axis
    sj = UavState(s_j - P.zeta * _vel(vj_state), vj_state.speed, vj_state.pitch, vj_state.yaw)
    row = sc_coefficients(si, sj, _vel(sj), d, P, BETA)
    assert row.delta == pytest.approx(1 - np.cos(BETA), abs=1e-12)
    flat = sc_coefficients(si, sj, _vel(sj), d, P, np.pi / 2)
    assert flat.delta == pytest.approx(1.0, abs=1e-12)


def test_round_trip_and_cone_membership():
    rng = np.random.default_rng(3)
    for _ in range(100):
        si = UavState(rng.normal(size=3) * 30, rng.uniform(1, 2.5), rng.uniform(-1, 1), rng.uniform(0, 6))
        sj = UavState(rng.normal(size=3) * 30, rng.uniform(1, 2.5), rng.uniform(-1, 1), rng.uniform(0, 6))
        d = R3 * rng.choice([-1.0, 1.0], size=3)
        sdot_j = _vel(sj) + P.zeta * jacobians(sj.speed, sj.pitch, sj.yaw) @ rng.normal(size=3) * 0.1
        row = sc_coefficients(si, sj, sdot_j, d, P, BETA)
        u = rng.normal(size=3) * 0.1
        axis = normalized_frames(si.pitch, si.yaw) @ d
        sdot_i = _vel(si) + P.zeta * jacobians(si.speed, si.pitch, si.yaw) @ u
        rel = virtual_state(si, P) + sdot_i - virtual_state(sj, P) - sdot_j
        den = np.linalg.norm(virtual_state(si, P) + _vel(si) - virtual_state(sj, P) - _vel(sj))
        assert -row.lhs(u) + row.delta + np.cos(BETA) == pytest.approx(axis @ rel / den, abs=1e-9)
        # with zero inputs everywhere the linear row is exact cone membership
        exact = sc_coefficients(si, sj, _vel(sj), d, P, BETA)
        rel0 = virtual_state(si, P) + _vel(si) - virtual_state(sj, P) - _vel(sj)
        inside = axis @ rel0 / np.linalg.norm(rel0) >= np.cos(BETA)
        assert (exact.lhs(np.zeros(3)) <= exact.delta) == inside


def test_degenerate_normaliser_omits_row():
    si = UavState([0, 0, 0], 2.0, 0.0, 0.0)
    assert sc_coefficients(si, si, _vel(si), R3 * np.ones(3), P, BETA) is None
