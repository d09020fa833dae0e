import numpy as np
import pytest

from fecbf.cbf import SafetyParams, jacobians, virtual_state
from fecbf.compatibility import (ConstraintSystem, Verdict, build_centralized_system,
                                 certificate_valid, farkas_check, left_nullspace_dim,
                                 nullspace_dim_bounds, sign_consistency_holds,
                                 solve_centralized_qp, uav_block, witness_valid)
from fecbf.kinematics import UavLimits, UavState, velocity_components
from fecbf.qp import QpStatus

from helpers import random_states, sign_consistent_configuration
from oracles import farkas_incompatible, kkt_enumeration

P = SafetyParams()


def test_shapes_and_pair_order():
    rng = np.random.default_rng(1)
    sys2 = build_centralized_system(*random_states(rng, 2), P)
    assert sys2.C.shape == (1, 6) and sys2.b.shape == (1,)
    sys7 = build_centralized_system(*random_states(rng, 7), P)
    assert sys7.C.shape == (21, 21)
    assert sys7.pair_index[:3] == [(0, 1), (0, 2), (0, 3)] and sys7.pair_index[-1] == (5, 6)
    for r, (i, j) in enumerate(sys7.pair_index):
        nz = {c // 3 for c in np.flatnonzero(sys7.C[r])}
        assert nz == {i, j}


def test_too_few_uavs():
    with pytest.raises(ValueError):
        build_centralized_system([UavState([0, 0, 0], 2, 0, 0)], [UavLimits.from_vmax(2.5)], P)


def test_rows_reproduce_barrier_condition():
    rng = np.random.default_rng(2)
    states, limits = random_states(rng, 5)
    sys = build_centralized_system(states, limits, P)
    for _ in range(5):
        u = rng.normal(size=15)
        lhs = sys.residual(u)
        for r, (i, j) in enumerate(sys.pair_index):
            si, sj = virtual_state(states[i], P), virtual_state(states[j], P)
            dsi = velocity_components(states[i].speed, states[i].pitch, states[i].yaw) \
                + P.zeta * jacobians(states[i].speed, states[i].pitch, states[i].yaw) @ u[3 * i:3 * i + 3]
            dsj = velocity_components(states[j].speed, states[j].pitch, states[j].yaw) \
                + P.zeta * jacobians(states[j].speed, states[j].pitch, states[j].yaw) @ u[3 * j:3 * j + 3]
            d = limits[i].radius + limits[j].radius + P.zeta * (states[i].speed + states[j].speed)
            h = (si - sj) @ (si - sj) - d * d
            hdot = 2 * (si - sj) @ (dsi - dsj)
            assert lhs[r] == pytest.approx(-(hdot + P.kappa * h), abs=1e-10 * (1 + abs(h)))


def test_farkas_textbook_cases():
    out = farkas_check((np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0])))
    assert out.verdict is Verdict.INCOMPATIBLE
    np.testing.assert_allclose(out.certificate / out.certificate.max(), [1, 1], atol=1e-9)
    assert out.witness is None
    out = farkas_check((np.array([[1.0]]), np.array([0.0])))
    assert out.compatible and out.certificate is None
    assert out.witness[0] <= 1e-8


def test_farkas_agrees_with_simplex_oracle():
    rng = np.random.default_rng(3)
    verdicts = []
    for _ in range(150):
        m, k = int(rng.integers(5, 41)), int(rng.integers(3, 13))
        C, b = rng.normal(size=(m, k)), rng.normal(size=m)
        out = farkas_check((C, b))
        assert (not out.compatible) == farkas_incompatible(C, b)
        if out.compatible:
            assert witness_valid(C, b, out.witness)
        else:
            assert certificate_valid(C, b, out.certificate)
        verdicts.append(out.compatible)
    assert 0 < sum(verdicts) < len(verdicts)


@pytest.mark.parametrize("n, expected", [(7, (0, 21)), (2, (0, 1)), (150, (10725, 11175)), (10, (15, 45))])
def test_nullspace_bounds(n, expected):
    assert nullspace_dim_bounds(n) == expected


def test_nullspace_sandwich_small():
    rng = np.random.default_rng(4)
    for n in (3, 7, 10):
        sys = build_centralized_system(*random_states(rng, n), P)
        lo, hi = nullspace_dim_bounds(n)
        assert lo <= left_nullspace_dim(sys.C) <= hi


def test_sign_consistency_on_construction():
    rng = np.random.default_rng(5)
    for n in (2, 3, 4):
        sys = build_centralized_system(*sign_consistent_configuration(rng, n), P)
        per, overall = sign_consistency_holds(sys)
        assert overall and per.all()
        # direct column-sign inspection of every block
        for i in range(n):
            block = uav_block(sys, i)
            assert block.shape == (n - 1, 3)
            assert np.all(np.abs(np.sign(block).sum(axis=0)) == n - 1)
        assert farkas_check(sys).compatible


def test_sign_consistency_zero_entry_is_false():
    C = np.array([[1.0, 2.0, 0.0, -1.0, -1.0, -1.0]])
    per, overall = sign_consistency_holds(ConstraintSystem(C, np.zeros(1), [(0, 1)]))
    assert per.tolist() == [False, True] and not overall


def test_centralized_qp_distant_pair_keeps_nominal():
    lim = UavLimits.from_vmax(2.5)
    states = [UavState([0, 0, 0], 2.0, 0, 0), UavState([0, 5000, 0], 2.0, 0, 0)]
    u_nom = np.array([0.3, 0.01, -0.02, -0.1, 0.0, 0.05])
    out = solve_centralized_qp(states, [lim, lim], P, u_nom)
    assert out.status is QpStatus.OPTIMAL
    np.testing.assert_allclose(out.solution, u_nom, atol=1e-12)


def test_centralized_qp_matches_kkt_oracle():
    lim = UavLimits.from_vmax(2.5)
    states = [UavState([0, 0, 0], 2.0, 0, 0), UavState([90, 1, 0], 2.0, 0, np.pi)]
    u_nom = np.zeros(6)
    sys = build_centralized_system(states, [lim, lim], P)
    assert sys.b[0] < 0          # the nominal input violates the single row
    out = solve_centralized_qp(states, [lim, lim], P, u_nom)
    lower, upper = np.tile(lim.u_min, 2), np.tile(lim.u_max, 2)
    status, x_ref, f_ref = kkt_enumeration(u_nom, np.ones(6), sys.C, sys.b, lower, upper)
    assert status == "optimal" and out.status is QpStatus.OPTIMAL
    assert np.sum((out.solution - u_nom) ** 2) == pytest.approx(f_ref, abs=1e-6)
    np.testing.assert_allclose(out.solution, x_ref, atol=1e-5)


def test_centralized_qp_contradictory_rows():
    lim = UavLimits.from_vmax(2.5)
    states = [UavState([0, 0, 0], 2.0, 0, 0), UavState([0, 5000, 0], 2.0, 0, 0)]
    C = np.zeros((2, 6))
    C[0, 0], C[1, 0] = 1.0, -1.0
    bad = ConstraintSystem(C, np.array([-1.0, -1.0]), [(0, 1), (0, 1)])
    out = solve_centralized_qp(states, [lim, lim], P, np.zeros(6), system=bad)
    assert out.status is QpStatus.INFEASIBLE
