"""Pairwise distance barrier on the virtual (lead-point) state.

The virtual state s = p + zeta * v gives the squared-distance barrier
relative degree one, so the barrier condition for a pair is affine in both
UAVs' inputs::

    hdot + kappa * h = k_ij . u_i + k_ji . u_j + xi_ij >= 0

The velocity-dependent part of the safety distance d_ij is held constant
inside a control step; its derivative is not part of hdot.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import UavLimits, UavState, velocity_components


@dataclass(frozen=True)
class SafetyParams:
    zeta: float = 0.5
    kappa: float = 0.08

    def __post_init__(self):
        if self.zeta <= 0:
            raise ValueError(f"zeta must be positive, got {self.zeta}")
        if self.kappa <= 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")


@dataclass(frozen=True)
class PairwiseCbf:
    k_ij: np.ndarray
    k_ji: np.ndarray
    xi: float
    h: float
    d: float

    def rate(self, u_i, u_j) -> float:
        """hdot + kappa*h for the given inputs (>= 0 means the pair constraint holds)."""
        return float(self.k_ij @ np.asarray(u_i) + self.k_ji @ np.asarray(u_j) + self.xi)


def rotation_matrix(pitch, yaw) -> np.ndarray:
    """Velocity-direction Jacobian frame, shape (..., 3, 3).

    Columns are d(v_hat)/d(v), d(v_hat)/d(theta), d(v_hat)/d(psi) for unit
    speed. They are mutually orthogonal; the third has norm |cos(theta)|.
    """
    pitch = np.asarray(pitch, dtype=float)
    yaw = np.asarray(yaw, dtype=float)
    ct, st = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    zero = np.zeros(np.broadcast(ct, cy).shape)
    rows = [
        [ct * cy, -st * cy, -ct * sy],
        [ct * sy, -st * sy, ct * cy],
        [st + zero, ct + zero, zero],
    ]
    return np.stack([np.stack(np.broadcast_arrays(*r), axis=-1) for r in rows], axis=-2)


def jacobians(speed, pitch, yaw) -> np.ndarray:
    """W = R diag(1, v, v), batched over leading axes."""
    speed = np.asarray(speed, dtype=float)
    if np.any(speed <= 0):
        raise ValueError("kinematic Jacobian needs strictly positive speed")
    R = rotation_matrix(pitch, yaw)
    scale = np.stack(np.broadcast_arrays(np.ones_like(speed), speed, speed), axis=-1)
    return R * scale[..., None, :]


def normalized_frames(pitch, yaw) -> np.ndarray:
    """Columns of W normalised to unit length (W-tilde), batched.

    The third column is the horizontal unit vector [-sin(psi), cos(psi), 0]
    (the limit of R's third column over |cos(theta)|), so the frame stays
    orthonormal at theta = +-pi/2 as well.
    """
    pitch = np.asarray(pitch, dtype=float)
    yaw = np.asarray(yaw, dtype=float)
    ct, st = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    zero = np.zeros(np.broadcast(ct, cy).shape)
    rows = [
        [ct * cy, -st * cy, -sy + zero],
        [ct * sy, -st * sy, cy + zero],
        [st + zero, ct + zero, zero],
    ]
    return np.stack([np.stack(np.broadcast_arrays(*r), axis=-1) for r in rows], axis=-2)


def kinematic_jacobian(state: UavState) -> np.ndarray:
    return jacobians(state.speed, state.pitch, state.yaw)


def normalized_jacobian(state: UavState) -> np.ndarray:
    return normalized_frames(state.pitch, state.yaw)


def virtual_state(state: UavState, params: SafetyParams) -> np.ndarray:
    return state.position + params.zeta * velocity_components(state.speed, state.pitch, state.yaw)


def safety_distance(limits_i: UavLimits, limits_j: UavLimits, speed_i, speed_j,
                    params: SafetyParams):
    return limits_i.radius + limits_j.radius + params.zeta * (speed_i + speed_j)


def barrier_value(state_i: UavState, state_j: UavState, limits_i: UavLimits,
                  limits_j: UavLimits, params: SafetyParams) -> tuple[float, float]:
    """Return (h, d) with h = |s_i - s_j|^2 - d^2."""
    diff = virtual_state(state_i, params) - virtual_state(state_j, params)
    d = safety_distance(limits_i, limits_j, state_i.speed, state_j.speed, params)
    return float(diff @ diff - d * d), float(d)


def pairwise_coefficients(state_i: UavState, state_j: UavState, limits_i: UavLimits,
                          limits_j: UavLimits, params: SafetyParams) -> PairwiseCbf:
    W_i = kinematic_jacobian(state_i)
    W_j = kinematic_jacobian(state_j)
    diff = virtual_state(state_i, params) - virtual_state(state_j, params)
    h, d = barrier_value(state_i, state_j, limits_i, limits_j, params)
    dv = (velocity_components(state_i.speed, state_i.pitch, state_i.yaw)
          - velocity_components(state_j.speed, state_j.pitch, state_j.yaw))
    return PairwiseCbf(
        k_ij=2.0 * params.zeta * W_i.T @ diff,
        k_ji=-2.0 * params.zeta * W_j.T @ diff,
        xi=float(2.0 * diff @ dv + params.kappa * h),
        h=h,
        d=d,
    )


@dataclass
class PairTerms:
    """Barrier data for every (own i, seen j) combination.

    ``own`` is each UAV's current state; ``seen`` is what it knows of the
    others (possibly delayed). Entry [i, j] describes the pair (i, j) from
    UAV i's point of view.
    """

    s_own: np.ndarray      # (n, 3)
    s_seen: np.ndarray     # (n, 3)
    diff: np.ndarray       # (n, n, 3), s_i - s_j
    vel_own: np.ndarray    # (n, 3)
    vel_seen: np.ndarray   # (n, 3)
    W_own: np.ndarray      # (n, 3, 3)
    W_seen: np.ndarray     # (n, 3, 3)
    k_own: np.ndarray      # (n, n, 3), k_ij
    k_seen: np.ndarray     # (n, n, 3), k_ji
    xi: np.ndarray         # (n, n)
    h: np.ndarray          # (n, n)
    d: np.ndarray          # (n, n)


def pair_terms(own, seen, params: SafetyParams) -> PairTerms:
    """Vectorised ``pairwise_coefficients`` over two fleets (see ``PairTerms``)."""
    zeta = params.zeta
    vel_own = own.velocity()
    vel_seen = seen.velocity()
    s_own = own.position + zeta * vel_own
    s_seen = seen.position + zeta * vel_seen
    diff = s_own[:, None, :] - s_seen[None, :, :]
    W_own = jacobians(own.speed, own.pitch, own.yaw)
    W_seen = jacobians(seen.speed, seen.pitch, seen.yaw)
    d = (own.radius[:, None] + seen.radius[None, :]
         + zeta * (own.speed[:, None] + seen.speed[None, :]))
    h = np.einsum("ijk,ijk->ij", diff, diff) - d * d
    # k_ij[c] = 2 zeta * sum_r diff[r] W_i[r, c]
    k_own = 2.0 * zeta * np.matmul(diff, W_own)
    k_seen = -2.0 * zeta * np.matmul(diff.transpose(1, 0, 2), W_seen).transpose(1, 0, 2)
    dv = vel_own[:, None, :] - vel_seen[None, :, :]
    xi = 2.0 * np.einsum("ijk,ijk->ij", diff, dv) + params.kappa * h
    return PairTerms(s_own, s_seen, diff, vel_own, vel_seen, W_own, W_seen,
                     k_own, k_seen, xi, h, d)


def barrier_pairs(fleet, params: SafetyParams) -> np.ndarray:
    """h_ij for every ordered pair of one fleet, (n, n); the diagonal is meaningless."""
    vel = fleet.velocity()
    s = fleet.position + params.zeta * vel
    diff = s[:, None, :] - s[None, :, :]
    d = (fleet.radius[:, None] + fleet.radius[None, :]
         + params.zeta * (fleet.speed[:, None] + fleet.speed[None, :]))
    return np.einsum("ijk,ijk->ij", diff, diff) - d * d
