"""Sign-consistency cone constraint for the decentralised QP.

UAV i asks that every lookahead relative vector s_i + sdot_i - s_j - sdot_j
stays inside a cone of half-angle beta around the axis d_i of its own
normalised frame, where d_i points into the octant containing the goal.
The neighbour's sdot_j is unknown; it is replaced by the worst case over the
inputs consistent with the neighbour's recent state history.

The lookahead adds a position (m) and a rate (m/s) with an implicit 1 s
horizon, exactly as written in the cone condition.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .cbf import SafetyParams, jacobians, normalized_frames, virtual_state
from .kinematics import UavLimits, UavState, velocity_components, wrap_angle

log = logging.getLogger(__name__)

INV_SQRT3 = np.sqrt(3.0) / 3.0
EPS_DEN = 1e-6


class NeighborHistory:
    """Most recent (time, state) samples of one neighbour, oldest first."""

    def __init__(self, capacity: int = 3):
        if capacity < 2:
            raise ValueError(f"history capacity must be >= 2, got {capacity}")
        self.capacity = capacity
        self._samples: deque[tuple[float, UavState]] = deque(maxlen=capacity)

    def append(self, t: float, state: UavState) -> None:
        if self._samples and t <= self._samples[-1][0]:
            raise ValueError(f"timestamps must increase: {t} after {self._samples[-1][0]}")
        self._samples.append((float(t), state))

    def __len__(self):
        return len(self._samples)

    @property
    def latest(self) -> UavState:
        return self._samples[-1][1]

    def samples(self) -> list[tuple[float, UavState]]:
        return list(self._samples)

    def input_estimate(self, limits: UavLimits) -> np.ndarray | None:
        """Backward difference of (v, theta, psi) over the two newest samples."""
        if len(self._samples) < 2:
            return None
        (t0, s0), (t1, s1) = self._samples[-2], self._samples[-1]
        dt = t1 - t0
        raw = np.array([
            (s1.speed - s0.speed) / dt,
            (s1.pitch - s0.pitch) / dt,
            wrap_angle(s1.yaw - s0.yaw) / dt,
        ])
        return np.clip(raw, limits.u_min, limits.u_max)


@dataclass(frozen=True)
class ScConstraint:
    l: np.ndarray
    delta: float
    beta: float
    d_axis: np.ndarray

    def lhs(self, u_i) -> float:
        return float(self.l @ np.asarray(u_i))


def _sign(x):
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def cone_axes(position, pitch, yaw, goal) -> np.ndarray:
    """Batched cone axis, (n, 3). sign(0) is taken as +1."""
    Wt = normalized_frames(pitch, yaw)
    local = np.einsum("...rc,...r->...c", Wt, np.asarray(goal) - np.asarray(position))
    return INV_SQRT3 * _sign(local)


def cone_axis(state: UavState, goal) -> np.ndarray:
    return cone_axes(state.position, state.pitch, state.yaw, goal)


def input_box(u_hat, limits_lo, limits_hi, u_tol=None):
    """Admissible input box around an estimate, intersected with the limits.

    ``u_hat`` of None (no difference available) gives the full limit box.
    """
    lo = np.asarray(limits_lo, dtype=float)
    hi = np.asarray(limits_hi, dtype=float)
    if u_hat is None:
        return lo.copy(), hi.copy()
    tol = 0.5 * (hi - lo) if u_tol is None else np.asarray(u_tol, dtype=float)
    return np.maximum(u_hat - tol, lo), np.minimum(u_hat + tol, hi)


def worst_case_sdots(d_axes, Wt_own, vel_seen, W_seen, box_lo, box_hi, zeta) -> np.ndarray:
    """For every (i, j): the sdot_j maximising d_i' Wt_i' sdot_j over j's input box.

    The objective is linear in u_j, so the maximiser is the box corner picked
    by the coefficient signs (ties go to the upper corner). Shape (n_own, n_seen, 3).
    """
    # coef[i, j, c] = zeta * (W_j' Wt_i d_i)[c]
    axis_world = np.einsum("irk,ik->ir", Wt_own, d_axes)
    coef = np.tensordot(axis_world, W_seen, axes=([1], [1]))
    u_star = np.where(coef >= 0, box_hi[None, :, :], box_lo[None, :, :])
    return vel_seen[None, :, :] + zeta * np.matmul(W_seen[None], u_star[..., None])[..., 0]


def worst_case_sdot(history: NeighborHistory, d_axis, Wtilde_i, limits_j: UavLimits,
                    params: SafetyParams, u_tol=None) -> np.ndarray:
    if len(history) == 0:
        raise ValueError("neighbour history is empty")
    state = history.latest
    u_hat = history.input_estimate(limits_j)
    lo, hi = input_box(u_hat, limits_j.u_min, limits_j.u_max, u_tol)
    W_j = jacobians(state.speed, state.pitch, state.yaw)
    vel = velocity_components(state.speed, state.pitch, state.yaw)
    out = worst_case_sdots(np.asarray(d_axis)[None], np.asarray(Wtilde_i)[None], vel[None],
                           W_j[None], lo[None], hi[None], params.zeta)
    return out[0, 0]


def sc_terms(s_own, s_seen, vel_own, vel_seen, W_own, Wt_own, d_axes, sdot_hat, zeta, beta):
    """Batched linearised cone rows l_ij . u_i - eps_ij <= delta_ij.

    Returns (l (n, m, 3), delta (n, m), valid (n, m)); rows whose
    normaliser |s_i + v_i - s_j - v_j| is below EPS_DEN are marked invalid.
    """
    look = (s_own + vel_own)[:, None, :] - (s_seen + vel_seen)[None, :, :]
    den = np.linalg.norm(look, axis=-1)
    valid = den > EPS_DEN
    den = np.where(valid, den, 1.0)
    axis_world = np.einsum("irk,ik->ir", Wt_own, d_axes)        # Wt_i d_i
    # control-free part of s_i + sdot_i is s_i + v_i
    rel = (s_own + vel_own)[:, None, :] - s_seen[None, :, :] - sdot_hat
    delta = np.matmul(rel, axis_world[:, :, None])[..., 0] / den - np.cos(beta)
    gain = -zeta * np.einsum("ir,irc->ic", axis_world, W_own)   # -zeta d' Wt' W
    l = gain[:, None, :] / den[..., None]
    return l, delta, valid


def sc_coefficients(state_i: UavState, state_j: UavState, sdot_hat, d_axis,
                    params: SafetyParams, beta: float) -> ScConstraint | None:
    """Cone row for one pair, or None when the normaliser degenerates."""
    s_i = virtual_state(state_i, params)
    s_j = virtual_state(state_j, params)
    v_i = velocity_components(state_i.speed, state_i.pitch, state_i.yaw)
    v_j = velocity_components(state_j.speed, state_j.pitch, state_j.yaw)
    W_i = jacobians(state_i.speed, state_i.pitch, state_i.yaw)
    Wt_i = normalized_frames(state_i.pitch, state_i.yaw)
    d_axis = np.asarray(d_axis, dtype=float)
    l, delta, valid = sc_terms(s_i[None], s_j[None], v_i[None], v_j[None], W_i[None],
                               Wt_i[None], d_axis[None], np.asarray(sdot_hat)[None, None],
                               params.zeta, beta)
    if not valid[0, 0]:
        log.debug("cone row omitted: degenerate normaliser")
        return None
    return ScConstraint(l[0, 0], float(delta[0, 0]), float(beta), d_axis)
