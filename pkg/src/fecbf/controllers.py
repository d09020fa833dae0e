"""Nominal navigation law and the CBF safety filters (FECBF, DRCBF, VOCBF, centralised).

All decentralised filters share the half-responsibility barrier rows
``-k_ij . u_i <= xi_ij / 2`` for every neighbour. FECBF adds the slackened
sign-consistency cone rows; VOCBF adds a velocity-obstacle half-space for
neighbours whose relative velocity points into their collision cone.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from .cbf import SafetyParams, normalized_frames, pair_terms
from .kinematics import ControlInput, Fleet, UavLimits, UavState, wrap_angle
from .qp import QpProblem, QpStatus, filter_batch, solve, solve_with_slacks
from .sign_consistency import (NeighborHistory, cone_axes, input_box, sc_terms,
                               worst_case_sdots)

ROW_TOL = 1e-9


class ControllerKind(str, enum.Enum):
    FECBF = "FECBF"
    DRCBF = "DRCBF"
    VOCBF = "VOCBF"
    CENTRALIZED = "Centralized"


class Fallback(str, enum.Enum):
    BRAKE = "brake"
    HOLD = "hold"
    # least-violation input: hard rows become heavily penalised soft rows
    RELAX = "relax"


RELAX_WEIGHT = 1e4


@dataclass(frozen=True)
class ControllerConfig:
    kind: ControllerKind = ControllerKind.FECBF
    lam: float = 3.0
    beta: float = 7 * np.pi / 24
    neighbor_radius: float = np.inf
    fallback: Fallback = Fallback.BRAKE
    k_psi: float = 1.0
    k_theta: float = 1.0
    k_v: float = 0.5
    # half-width of the neighbour input box, as a fraction of each input range
    u_tol_fraction: float = 0.5
    # 1.0 asks the relative velocity to leave the VO cone within one step
    vo_rate: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ControllerKind(self.kind))
        object.__setattr__(self, "fallback", Fallback(self.fallback))
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not 0 < self.beta < np.pi / 2:
            raise ValueError(f"beta must lie in (0, pi/2), got {self.beta}")
        if not self.neighbor_radius > 0:
            raise ValueError(f"neighbor_radius must be positive, got {self.neighbor_radius}")
        if not 0 < self.vo_rate <= 1:
            raise ValueError(f"vo_rate must lie in (0, 1], got {self.vo_rate}")

    @property
    def name(self) -> str:
        return self.kind.value


@dataclass
class ControlDecision:
    input: ControlInput
    feasible: bool
    slack_norm: float = 0.0
    solve_time: float = 0.0


# ---------------------------------------------------------------------------
# nominal input and fallback


def nominal_inputs(position, speed, pitch, yaw, goals, u_min, u_max, v_max,
                   theta_min, theta_max, config: ControllerConfig) -> np.ndarray:
    """Proportional line-of-sight law, batched over UAVs; returns (n, 3)."""
    los = np.asarray(goals, dtype=float) - np.asarray(position, dtype=float)
    yaw_des = np.arctan2(los[..., 1], los[..., 0])
    pitch_des = np.arctan2(los[..., 2], np.hypot(los[..., 0], los[..., 1]))
    pitch_des = np.clip(pitch_des, theta_min, theta_max)
    u = np.stack([
        config.k_v * (np.asarray(v_max) - speed),
        config.k_theta * (pitch_des - pitch),
        config.k_psi * wrap_angle(yaw_des - yaw),
    ], axis=-1)
    return np.clip(u, u_min, u_max)


def nominal_input(state: UavState, goal, limits: UavLimits,
                  config: ControllerConfig = ControllerConfig()) -> ControlInput:
    u = nominal_inputs(state.position, state.speed, state.pitch, state.yaw, goal,
                       limits.u_min, limits.u_max, limits.v_max,
                       limits.theta_min, limits.theta_max, config)
    return ControlInput.from_array(u)


def fallback_input(last_feasible: ControlInput | None, limits: UavLimits,
                   mode: Fallback | str = Fallback.BRAKE) -> ControlInput:
    """Input applied when the filter QP is infeasible: full braking, zero rates."""
    if Fallback(mode) is Fallback.HOLD and last_feasible is not None:
        return last_feasible
    return ControlInput(limits.a_min, 0.0, 0.0)


def fallback_inputs(u_min, last=None, mode=Fallback.BRAKE) -> np.ndarray:
    u = np.zeros_like(np.asarray(u_min, dtype=float))
    u[..., 0] = np.asarray(u_min)[..., 0]
    if Fallback(mode) is Fallback.HOLD and last is not None:
        return np.asarray(last, dtype=float).copy()
    return u


# ---------------------------------------------------------------------------
# constraint rows


@dataclass
class FilterRows:
    """Per-UAV constraint data for one control step, indexed [i, j] over (own, seen)."""

    u_nom: np.ndarray            # (n, 3)
    lower: np.ndarray            # (n, 3)
    upper: np.ndarray            # (n, 3)
    neighbors: np.ndarray        # (n, m) bool
    cbf_A: np.ndarray            # (n, m, 3)
    cbf_b: np.ndarray            # (n, m)
    sc_L: np.ndarray | None = None       # (n, m, 3)
    sc_delta: np.ndarray | None = None   # (n, m)
    sc_valid: np.ndarray | None = None   # (n, m)
    vo_A: np.ndarray | None = None       # (n, m, 3)
    vo_b: np.ndarray | None = None       # (n, m)
    vo_mask: np.ndarray | None = None    # (n, m)
    build_time: float = 0.0
    extras: dict = field(default_factory=dict)

    def local(self, i: int):
        """(A, b, L, delta) of UAV i's decentralised QP; L is empty without cone rows."""
        nb = self.neighbors[i]
        A = [self.cbf_A[i, nb]]
        b = [self.cbf_b[i, nb]]
        if self.vo_mask is not None:
            vo = self.vo_mask[i] & nb
            A.append(self.vo_A[i, vo])
            b.append(self.vo_b[i, vo])
        if self.sc_L is not None:
            sc = self.sc_valid[i] & nb
            L, delta = self.sc_L[i, sc], self.sc_delta[i, sc]
        else:
            L, delta = np.zeros((0, 3)), np.zeros(0)
        return np.vstack(A), np.concatenate(b), L, delta


def velocity_obstacle_rows(own_pos, seen_pos, vel_own, vel_seen, W_own, radius_own,
                           radius_seen, dt, rate=1.0):
    """Linearised VO rows  a . u_i <= b  on the one-step velocity v_i + dt W_i u_i.

    Returns (A (n, m, 3), b (n, m), mask (n, m)); mask marks pairs whose
    relative velocity lies in the collision cone (or that already overlap
    and are closing), i.e. pairs that receive a row.
    """
    p_rel = seen_pos[None, :, :] - own_pos[:, None, :]
    dist = np.linalg.norm(p_rel, axis=-1)
    safe_dist = np.where(dist > 0, dist, 1.0)
    p_hat = p_rel / safe_dist[..., None]
    v_rel = vel_own[:, None, :] - vel_seen[None, :, :]
    combined = radius_own[:, None] + radius_seen[None, :]
    overlap = dist <= combined
    alpha = np.arcsin(np.clip(combined / safe_dist, 0.0, 1.0))
    along = np.einsum("ijk,ijk->ij", v_rel, p_hat)
    speed_rel = np.linalg.norm(v_rel, axis=-1)
    inside = (~overlap) & (speed_rel > 0) & (along > speed_rel * np.cos(alpha))

    # nearest face: generator in the plane of (p_hat, v_rel)
    perp = v_rel - along[..., None] * p_hat
    perp_norm = np.linalg.norm(perp, axis=-1)
    # exact alignment: take the face whose outward normal climbs most
    up = np.array([0.0, 0.0, 1.0])
    up_perp = up - p_hat[..., 2:3] * p_hat
    up_norm = np.linalg.norm(up_perp, axis=-1)
    fallback_dir = np.where((up_norm > 1e-9)[..., None], up_perp / np.maximum(up_norm, 1e-300)[..., None],
                            np.array([1.0, 0.0, 0.0]))
    tie = perp_norm <= 1e-9 * np.maximum(speed_rel, 1e-300)
    e2 = np.where(tie[..., None], fallback_dir, perp / np.maximum(perp_norm, 1e-300)[..., None])
    normal = -np.sin(alpha)[..., None] * p_hat + np.cos(alpha)[..., None] * e2
    face = np.einsum("ijk,ijk->ij", normal, v_rel)          # < 0 inside

    # n . (v_rel + dt W_i u) >= (1 - rate) n . v_rel
    A_vo = -dt * np.matmul(normal, W_own)
    b_vo = rate * face
    # overlapping: -p_hat . (v_rel + dt W_i u) >= (1 - rate)(-p_hat . v_rel) when closing
    closing = overlap & (along > 0)
    A_sep = dt * np.matmul(p_hat, W_own)
    b_sep = -rate * along
    A = np.where(closing[..., None], A_sep, A_vo)
    b = np.where(closing, b_sep, b_vo)
    return A, b, inside | closing


def build_rows(config: ControllerConfig, own: Fleet, seen: Fleet, goals, neighbors,
               params: SafetyParams, seen_box=None, dt: float = 0.1) -> FilterRows:
    """Assemble every UAV's filter rows from one (possibly delayed) snapshot.

    ``neighbors[i, j]`` selects which seen UAVs enter UAV i's QP. ``seen_box``
    is the admissible input box (lo, hi) of each seen UAV, used by the FECBF
    worst-case estimate; it defaults to the full limit box.
    """
    t0 = time.perf_counter()
    terms = pair_terms(own, seen, params)
    nb = np.asarray(neighbors, dtype=bool).copy()
    if np.isfinite(config.neighbor_radius):
        dist = np.linalg.norm(own.position[:, None, :] - seen.position[None, :, :], axis=-1)
        nb &= dist <= config.neighbor_radius
    u_nom = nominal_inputs(own.position, own.speed, own.pitch, own.yaw, goals,
                           own.u_min, own.u_max, own.v_max, own.theta_min, own.theta_max,
                           config)
    rows = FilterRows(u_nom=u_nom, lower=own.u_min, upper=own.u_max, neighbors=nb,
                      cbf_A=-terms.k_own, cbf_b=0.5 * terms.xi)
    rows.extras["h"] = terms.h
    if config.kind is ControllerKind.FECBF:
        Wt_own = normalized_frames(own.pitch, own.yaw)
        d_axes = cone_axes(own.position, own.pitch, own.yaw, goals)
        if seen_box is None:
            box_lo, box_hi = seen.u_min, seen.u_max
        else:
            box_lo, box_hi = seen_box
        sdot = worst_case_sdots(d_axes, Wt_own, terms.vel_seen, terms.W_seen,
                                box_lo, box_hi, params.zeta)
        L, delta, valid = sc_terms(terms.s_own, terms.s_seen, terms.vel_own, terms.vel_seen,
                                   terms.W_own, Wt_own, d_axes, sdot, params.zeta, config.beta)
        rows.sc_L, rows.sc_delta, rows.sc_valid = L, delta, valid
        rows.extras["d_axes"] = d_axes
    elif config.kind is ControllerKind.VOCBF:
        A, b, mask = velocity_obstacle_rows(own.position, seen.position, terms.vel_own,
                                            terms.vel_seen, terms.W_own, own.radius,
                                            seen.radius, dt, config.vo_rate)
        rows.vo_A, rows.vo_b, rows.vo_mask = A, b, mask
    rows.build_time = time.perf_counter() - t0
    return rows


def seen_input_boxes(seen: Fleet, previous: Fleet | None, dt: float, u_tol_fraction=0.5):
    """Admissible input boxes of the seen UAVs from a two-sample backward difference."""
    if previous is None:
        return seen.u_min.copy(), seen.u_max.copy()
    u_hat = np.stack([
        (seen.speed - previous.speed) / dt,
        (seen.pitch - previous.pitch) / dt,
        wrap_angle(seen.yaw - previous.yaw) / dt,
    ], axis=-1)
    u_hat = np.clip(u_hat, seen.u_min, seen.u_max)
    tol = u_tol_fraction * (seen.u_max - seen.u_min)
    return input_box(u_hat, seen.u_min, seen.u_max, tol)


# ---------------------------------------------------------------------------
# solving


def decide(rows: FilterRows, i: int, config: ControllerConfig, lam: float | None = None):
    """Solve UAV i's filter QP. Returns (u, feasible, slack_norm, status)."""
    A, b, L, delta = rows.local(i)
    u_nom = rows.u_nom[i]
    lo, hi = rows.lower[i], rows.upper[i]
    hard_ok = A.shape[0] == 0 or np.all(A @ u_nom <= b + ROW_TOL * (1 + np.abs(b)))
    soft_ok = L.shape[0] == 0 or np.all(L @ u_nom <= delta)
    if hard_ok and soft_ok:
        return u_nom.copy(), True, 0.0, QpStatus.OPTIMAL
    if L.shape[0]:
        out = solve_with_slacks(u_nom, lo, hi, A, b, L, delta, config.lam if lam is None else lam)
    else:
        out = solve(QpProblem(u_nom, 1.0, A, b, lo, hi))
    if out.status is not QpStatus.OPTIMAL:
        return None, False, 0.0, out.status
    u = out.solution[:3]
    slack = float(np.linalg.norm(out.solution[3:])) if out.solution.size > 3 else 0.0
    return u, True, slack, out.status


def relaxed_input(rows: FilterRows, i: int, config: ControllerConfig) -> np.ndarray:
    """Input closest to nominal that minimises the (row-normalised) violation of the hard rows."""
    A, b, L, delta = rows.local(i)
    norms = np.linalg.norm(A, axis=1)
    norms = np.where(norms > 0, norms, 1.0)
    L_all = np.vstack([A / norms[:, None], L])
    d_all = np.concatenate([b / norms, delta])
    lam = np.concatenate([np.full(A.shape[0], RELAX_WEIGHT), np.full(L.shape[0], config.lam)])
    out = solve_with_slacks(rows.u_nom[i], rows.lower[i], rows.upper[i], np.zeros((0, 3)),
                            np.zeros(0), L_all, d_all, lam)
    if out.status is not QpStatus.OPTIMAL:
        return fallback_inputs(rows.lower[i])
    return out.solution[:3]


def stacked_rows(rows: FilterRows):
    """Dense (hard_A, hard_b, hard_mask, soft_L, soft_d, soft_mask) over all UAVs."""
    nb = rows.neighbors
    hard_A, hard_b, hard_mask = rows.cbf_A, rows.cbf_b, nb
    if rows.vo_mask is not None:
        hard_A = np.concatenate([hard_A, rows.vo_A], axis=1)
        hard_b = np.concatenate([hard_b, rows.vo_b], axis=1)
        hard_mask = np.concatenate([nb, rows.vo_mask & nb], axis=1)
    n = nb.shape[0]
    if rows.sc_L is not None:
        soft_L, soft_d, soft_mask = rows.sc_L, rows.sc_delta, rows.sc_valid & nb
    else:
        soft_L, soft_d, soft_mask = np.zeros((n, 0, 3)), np.zeros((n, 0)), np.zeros((n, 0), bool)
    c = np.ascontiguousarray
    return (c(hard_A, dtype=float), c(hard_b, dtype=float), c(hard_mask, dtype=bool),
            c(soft_L, dtype=float), c(soft_d, dtype=float), c(soft_mask, dtype=bool))


def decide_all(rows: FilterRows, config: ControllerConfig, last_inputs=None):
    """Decisions for every UAV in ``rows``; infeasible UAVs get the fallback input.

    Returns (U (n, 3), feasible (n,), slack (n,), solve_time (n,)). The solves
    run in one compiled loop, so each UAV is charged the mean time of the
    step (row assembly included).
    """
    n = rows.u_nom.shape[0]
    t0 = time.perf_counter()
    relax = config.fallback is Fallback.RELAX
    U, status, slack = filter_batch(
        np.ascontiguousarray(rows.u_nom, dtype=float), np.ascontiguousarray(rows.lower, dtype=float),
        np.ascontiguousarray(rows.upper, dtype=float), *stacked_rows(rows),
        float(config.lam), relax, RELAX_WEIGHT, ROW_TOL, 200, 100)
    feasible = status == 0
    for i in np.flatnonzero(status == 2):
        # the compiled pass could not settle this UAV; take the checked path
        u, ok, s, _ = decide(rows, i, config)
        if ok:
            U[i], slack[i], feasible[i] = u, s, True
        else:
            U[i] = relaxed_input(rows, i, config) if relax else fallback_inputs(rows.lower[i])
    if config.fallback is Fallback.HOLD and last_inputs is not None:
        U[~feasible] = np.asarray(last_inputs, dtype=float)[~feasible]
    elapsed = time.perf_counter() - t0 + rows.build_time
    return U, feasible, slack, np.full(n, elapsed / max(n, 1))


def _single(config, self_state, goal, neighbors, params, limits, dt=0.1,
            last_feasible: ControlInput | None = None) -> ControlDecision:
    t0 = time.perf_counter()
    own = Fleet.from_lists([self_state], [limits])
    if neighbors:
        states = [nbr[0] for nbr in neighbors]
        lims = [nbr[2] for nbr in neighbors]
        seen = Fleet.from_lists(states, lims)
        boxes = []
        for state, history, lim in neighbors:
            u_hat = history.input_estimate(lim) if history is not None else None
            boxes.append(input_box(u_hat, lim.u_min, lim.u_max,
                                   config.u_tol_fraction * (lim.u_max - lim.u_min)))
        seen_box = (np.array([bx[0] for bx in boxes]), np.array([bx[1] for bx in boxes]))
        mask = np.ones((1, len(neighbors)), dtype=bool)
    else:
        seen, seen_box, mask = own, None, np.zeros((1, 1), dtype=bool)
    rows = build_rows(config, own, seen, np.asarray(goal, float)[None], mask, params,
                      seen_box=seen_box, dt=dt)
    u, ok, slack, _ = decide(rows, 0, config)
    if not ok:
        if config.fallback is Fallback.RELAX:
            u_fb = ControlInput.from_array(relaxed_input(rows, 0, config))
        else:
            u_fb = fallback_input(last_feasible, limits, config.fallback)
        return ControlDecision(u_fb, False, 0.0, time.perf_counter() - t0)
    return ControlDecision(ControlInput.from_array(u), True, slack, time.perf_counter() - t0)


def fecbf_control(self_state: UavState, goal, neighbors: list[tuple[UavState, NeighborHistory, UavLimits]],
                  config: ControllerConfig, params: SafetyParams, limits: UavLimits,
                  last_feasible: ControlInput | None = None) -> ControlDecision:
    """Feasibility-enhanced filter: barrier rows plus slackened cone rows."""
    cfg = config if config.kind is ControllerKind.FECBF else _with_kind(config, ControllerKind.FECBF)
    return _single(cfg, self_state, goal, neighbors, params, limits, last_feasible=last_feasible)


def drcbf_control(self_state: UavState, goal, neighbors, params: SafetyParams, limits: UavLimits,
                  config: ControllerConfig | None = None,
                  last_feasible: ControlInput | None = None) -> ControlDecision:
    """Half-responsibility barrier rows only."""
    cfg = _with_kind(config or ControllerConfig(), ControllerKind.DRCBF)
    return _single(cfg, self_state, goal, neighbors, params, limits, last_feasible=last_feasible)


def vocbf_control(self_state: UavState, goal, neighbors, params: SafetyParams, limits: UavLimits,
                  config: ControllerConfig | None = None, dt: float = 0.1,
                  last_feasible: ControlInput | None = None) -> ControlDecision:
    """Barrier rows plus a velocity-obstacle half-space per threatening neighbour."""
    cfg = _with_kind(config or ControllerConfig(), ControllerKind.VOCBF)
    return _single(cfg, self_state, goal, neighbors, params, limits, dt=dt,
                   last_feasible=last_feasible)


def _with_kind(config: ControllerConfig, kind: ControllerKind) -> ControllerConfig:
    from dataclasses import replace
    return replace(config, kind=kind)
