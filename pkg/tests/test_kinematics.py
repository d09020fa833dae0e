import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fecbf.kinematics import (ControlInput, Fleet, UavLimits, UavState, clamp_input, step,
                              velocity_vector, wrap_angle, wrap_yaw)

LIM = UavLimits.from_vmax(3.0)


def state(v=2.0, pitch=0.0, yaw=0.0, p=(0.0, 0.0, 0.0)):
    return UavState(np.array(p, dtype=float), v, pitch, yaw)


@pytest.mark.parametrize("v, pitch, yaw, expected", [
    (2.0, 0.0, 0.0, [2, 0, 0]),
    (2.0, 0.0, np.pi / 2, [0, 2, 0]),
    (3.0, np.pi / 2, 1.234, [0, 0, 3]),
])
def test_velocity_vector_examples(v, pitch, yaw, expected):
    np.testing.assert_allclose(velocity_vector(state(v, pitch, yaw)), expected, atol=1e-12)


@given(st.floats(0.1, 5), st.floats(-np.pi / 2, np.pi / 2), st.floats(0, 2 * np.pi))
def test_velocity_norm_equals_speed(v, pitch, yaw):
    assert abs(np.linalg.norm(velocity_vector(state(v, pitch, yaw))) - v) <= 1e-12


def test_clamp_input_examples():
    assert clamp_input(ControlInput(5.0, 0.0, 0.0), LIM).accel == 1.0
    u = ControlInput(0.3, 0.01, -0.02)
    assert clamp_input(u, LIM) == u
    assert clamp_input(ControlInput(0.0, -1.0, 0.0), LIM).pitch_rate == pytest.approx(-np.pi / 36)


def test_step_examples():
    assert step(state(2.0), ControlInput(1.0, 0, 0), LIM, 0.1).speed == pytest.approx(2.1)
    assert step(state(2.95), ControlInput(1.0, 0, 0), LIM, 0.1).speed == 3.0
    nxt = step(state(2.0), ControlInput(0, 0, 0), LIM, 0.1)
    np.testing.assert_allclose(nxt.position, [0.2, 0, 0], atol=1e-15)


def test_step_rejects_bad_dt():
    with pytest.raises(ValueError):
        step(state(), ControlInput(0, 0, 0), LIM, 0.0)


def test_limits_validation_and_defaults():
    lim = UavLimits.from_vmax(2.4)
    assert lim.v_min == pytest.approx(0.6)
    assert lim.gamma_max == pytest.approx(np.pi / 36) and lim.omega_max == pytest.approx(np.pi / 18)
    with pytest.raises(ValueError):
        UavLimits(v_min=2.0, v_max=1.0)
    with pytest.raises(ValueError):
        UavLimits(v_min=0.0, v_max=1.0)


@settings(max_examples=200)
@given(st.floats(0.75, 3.0), st.floats(-np.pi / 2, np.pi / 2), st.floats(0, 2 * np.pi - 1e-9),
       st.floats(-1, 1), st.floats(-0.09, 0.09), st.floats(-0.18, 0.18), st.floats(1e-3, 1.0))
def test_step_preserves_state_invariants(v, pitch, yaw, a, g, w, dt):
    u = clamp_input(ControlInput(a, g, w), LIM)
    nxt = step(state(v, pitch, yaw), u, LIM, dt)
    assert LIM.v_min <= nxt.speed <= LIM.v_max
    assert LIM.theta_min <= nxt.pitch <= LIM.theta_max
    assert 0.0 <= nxt.yaw < 2 * np.pi
    again = step(state(v, pitch, yaw), u, LIM, dt)
    assert again.as_array().tobytes() == nxt.as_array().tobytes()


def test_wrap_helpers():
    assert wrap_angle(3 * np.pi / 2) == pytest.approx(-np.pi / 2)
    assert wrap_angle(np.pi) == pytest.approx(np.pi)
    assert wrap_yaw(-0.1) == pytest.approx(2 * np.pi - 0.1)
    assert wrap_yaw(-1e-18) < 2 * np.pi


def test_fleet_matches_scalar_step():
    rng = np.random.default_rng(3)
    states = [state(rng.uniform(1, 3), rng.uniform(-1, 1), rng.uniform(0, 6), rng.normal(size=3))
              for _ in range(5)]
    limits = [LIM] * 5
    fleet = Fleet.from_lists(states, limits)
    U = rng.uniform(-0.05, 0.05, size=(5, 3))
    nxt = fleet.advance(U, 0.1)
    for i, s in enumerate(states):
        ref = step(s, ControlInput.from_array(U[i]), LIM, 0.1)
        np.testing.assert_allclose(nxt.state(i).as_array(), ref.as_array(), atol=1e-14)
    masked = fleet.advance(U, 0.1, mask=np.array([True, False, True, False, True]))
    np.testing.assert_array_equal(masked.position[1], fleet.position[1])
