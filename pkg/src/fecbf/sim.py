"""Scenario generation, synchronous stepping with delay, and Monte-Carlo metrics."""
from __future__ import annotations

import csv
import enum
import json
import logging
import os
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .cbf import SafetyParams, barrier_pairs
from .compatibility import solve_centralized_qp
from .controllers import (ControllerConfig, ControllerKind, build_rows, decide_all,
                          fallback_inputs, nominal_inputs, seen_input_boxes)
from .kinematics import Fleet, UavLimits, UavState

log = logging.getLogger(__name__)

WAYPOINT = np.array([1000.0, 1000.0, 250.0])
CIRCLE_CENTER = np.array([1000.0, 1000.0, 200.0])
INNER_RADIUS, OUTER_RADIUS = 400.0, 600.0
HEADON_WIDTH = 200.0
CONVERGE_TIME = 150.0
MISSION_TIME = 300.0


class ScenarioKind(str, enum.Enum):
    CONVERGENCE = "Convergence"
    DUALCIRCLE = "DualCircle"
    HEADON = "HeadOn"


@dataclass(frozen=True)
class ScenarioSpec:
    kind: ScenarioKind = ScenarioKind.DUALCIRCLE
    n: int = 50
    seed: int = 0
    dt: float = 0.1
    t_max: float = 600.0
    delay: float = 0.0
    radius: float = 2.0
    arrival_tol: float = 5.0
    # Convergence: elevation of approach directions, uniform in +-this (rad);
    # 0 puts every start at the waypoint altitude
    max_elevation: float = 0.0
    # HeadOn: vertical spread of each group's cross-section (m); 0 is planar
    headon_height: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ScenarioKind(self.kind))
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.kind is not ScenarioKind.CONVERGENCE and self.n % 2:
            raise ValueError(f"{self.kind.value} needs an even n, got {self.n}")
        if self.t_max <= 0 or self.dt <= 0:
            raise ValueError("t_max and dt must be positive")
        if self.delay < 0:
            raise ValueError(f"delay must be >= 0, got {self.delay}")
        if self.arrival_tol <= 0 or self.radius <= 0:
            raise ValueError("arrival_tol and radius must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    @property
    def delay_steps(self) -> int:
        # latest step time <= t - tau; the epsilon guards tau = k * dt in floating point
        return int(np.ceil(self.delay / self.dt - 1e-9))


@dataclass
class Scenario:
    fleet: Fleet
    goals: np.ndarray
    limits: list[UavLimits]

    @property
    def states(self) -> list[UavState]:
        return self.fleet.states()


def _heading_angles(direction):
    yaw = np.mod(np.arctan2(direction[:, 1], direction[:, 0]), 2 * np.pi)
    pitch = np.arcsin(np.clip(direction[:, 2], -1.0, 1.0))
    return pitch, yaw


def _min_gap(points, v_max, radius, zeta=0.5):
    """Smallest pairwise distance minus the static safety distance."""
    if len(points) < 2:
        return np.inf
    diff = points[:, None, :] - points[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    need = 2 * radius + zeta * (v_max[:, None] + v_max[None, :]) + 2 * radius
    np.fill_diagonal(dist, np.inf)
    return float(np.min(dist - need))


def generate_scenario(spec: ScenarioSpec) -> Scenario:
    """Initial states, limits and goals; identical for identical specs."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    v_max = rng.uniform(2.0, 3.0, size=n)
    if spec.kind is ScenarioKind.CONVERGENCE:
        # rejection-sample approach directions until starts are well separated
        direction = np.zeros((n, 3))
        start = np.zeros((n, 3))
        for i in range(n):
            for _ in range(1000):
                az = rng.uniform(0.0, 2 * np.pi)
                el = rng.uniform(-spec.max_elevation, spec.max_elevation)
                d = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
                p = WAYPOINT - CONVERGE_TIME * v_max[i] * d
                if _min_gap(np.vstack([start[:i], p]), np.append(v_max[:i], v_max[i]), spec.radius) > 0:
                    break
            direction[i], start[i] = d, p
    elif spec.kind is ScenarioKind.DUALCIRCLE:
        half = n // 2
        phase = rng.uniform(0.0, 2 * np.pi, size=2)
        ang_in = phase[0] + 2 * np.pi * np.arange(half) / half
        ang_out = phase[1] + 2 * np.pi * np.arange(half) / half
        radial_in = np.stack([np.cos(ang_in), np.sin(ang_in), np.zeros(half)], axis=1)
        radial_out = np.stack([np.cos(ang_out), np.sin(ang_out), np.zeros(half)], axis=1)
        start = np.vstack([CIRCLE_CENTER + INNER_RADIUS * radial_in,
                           CIRCLE_CENTER + OUTER_RADIUS * radial_out])
        direction = np.vstack([radial_in, -radial_out])
    else:
        half = n // 2
        start = np.zeros((n, 3))
        direction = np.zeros((n, 3))
        for i in range(n):
            side = 1.0 if i < half else -1.0
            for _ in range(1000):
                lateral = rng.uniform(-HEADON_WIDTH / 2, HEADON_WIDTH / 2)
                vertical = rng.uniform(-spec.headon_height / 2, spec.headon_height / 2)
                # each group meets the centre line at t = 150 s if unobstructed
                p = CIRCLE_CENTER + np.array([-side * CONVERGE_TIME * v_max[i], lateral, vertical])
                if _min_gap(np.vstack([start[:i], p]), np.append(v_max[:i], v_max[i]), spec.radius) > 0:
                    break
            start[i] = p
            direction[i] = [side, 0.0, 0.0]
    pitch, yaw = _heading_angles(direction)
    goals = start + MISSION_TIME * v_max[:, None] * direction
    limits = [UavLimits.from_vmax(v, radius=spec.radius) for v in v_max]
    states = [UavState(start[i], float(v_max[i]), float(pitch[i]), float(yaw[i])) for i in range(n)]
    return Scenario(Fleet.from_lists(states, limits), goals, limits)


class SnapshotBuffer:
    """Fleet snapshots keyed by step index, trimmed to what the delay needs."""

    def __init__(self, dt: float, tau: float = 0.0, keep: int | None = None):
        self.dt = dt
        self.tau = tau
        lag = int(np.ceil(tau / dt - 1e-9))
        self.keep = keep if keep is not None else lag + 2
        self._frames: deque[tuple[int, Fleet]] = deque(maxlen=self.keep)
        self._initial: Fleet | None = None

    def record(self, step: int, fleet: Fleet) -> None:
        if self._initial is None:
            self._initial = fleet
        self._frames.append((step, fleet))

    def index_at(self, t: float) -> int:
        return max(int(np.floor((t - self.tau) / self.dt + 1e-9)), 0)

    def at(self, t: float) -> tuple[Fleet, Fleet | None]:
        """(snapshot at the latest step time <= t - tau, the snapshot before it)."""
        if t - self.tau < -1e-9 * self.dt:
            return self._initial, None
        k = self.index_at(t)
        frames = dict(self._frames)
        if k not in frames:
            raise KeyError(f"step {k} is no longer buffered")
        return frames[k], frames.get(k - 1)


def delayed_snapshot(buffer: SnapshotBuffer, t: float, tau: float | None = None) -> list[UavState]:
    if tau is not None and tau != buffer.tau:
        buffer = _retimed(buffer, tau)
    return buffer.at(t)[0].states()


def _retimed(buffer, tau):
    other = SnapshotBuffer(buffer.dt, tau, keep=buffer.keep)
    other._initial = buffer._initial
    other._frames = deque(buffer._frames, maxlen=buffer.keep)
    return other


@dataclass
class TrialResult:
    seed: int
    controller: str
    reached: np.ndarray
    collided: np.ndarray
    arrival_time: np.ndarray         # nan where not reached
    infeasible_steps: np.ndarray
    solve_times: list[float] = field(default_factory=list)
    min_barrier: np.ndarray | None = None   # (n, n) min over time of h_ij
    trajectory: list[tuple] | None = None

    @property
    def n(self) -> int:
        return self.reached.size

    @property
    def timed_out(self) -> np.ndarray:
        return ~(self.reached | self.collided)

    def summary(self) -> dict:
        at = self.arrival_time[self.reached]
        return {
            "seed": int(self.seed),
            "controller": self.controller,
            "n": int(self.n),
            "sr": float(self.reached.mean()),
            "collided": int(self.collided.sum()),
            "timed_out": int(self.timed_out.sum()),
            "ic_mean": float(self.infeasible_steps.mean()),
            "at_mean": float(at.mean()) if at.size else None,
            "ct_mean_ms": 1e3 * float(np.mean(self.solve_times)) if self.solve_times else 0.0,
        }

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "uav_id", "x", "y", "z", "v", "theta", "psi",
                        "a", "gamma", "omega", "feasible"])
            for row in self.trajectory or []:
                w.writerow([f"{row[0]:.3f}", row[1]] + [f"{x:.6g}" for x in row[2:11]]
                           + [int(row[11])])
        return path


def _centralized_step(own: Fleet, goals, config, params):
    u_nom = nominal_inputs(own.position, own.speed, own.pitch, own.yaw, goals,
                           own.u_min, own.u_max, own.v_max, own.theta_min, own.theta_max,
                           config)
    t0 = time.perf_counter()
    n = len(own)
    if n < 2:
        return u_nom, np.ones(n, bool), np.full(n, time.perf_counter() - t0)
    out = solve_centralized_qp(own.states(), None, params, u_nom.ravel(), fleet=own)
    elapsed = time.perf_counter() - t0
    if out.optimal:
        return out.solution.reshape(n, 3), np.ones(n, bool), np.full(n, elapsed / n)
    return fallback_inputs(own.u_min), np.zeros(n, bool), np.full(n, elapsed / n)


def run_trial(spec: ScenarioSpec, config: ControllerConfig = ControllerConfig(),
              params: SafetyParams = SafetyParams(), record: bool = False,
              scenario: Scenario | None = None) -> TrialResult:
    """Simulate one trial; pathologies are recorded, never raised."""
    sc = scenario if scenario is not None else generate_scenario(spec)
    fleet = sc.fleet.copy()
    goals = sc.goals
    n, dt = len(fleet), spec.dt
    active = np.ones(n, dtype=bool)
    reached = np.zeros(n, dtype=bool)
    collided = np.zeros(n, dtype=bool)
    arrival = np.full(n, np.nan)
    ic = np.zeros(n, dtype=int)
    times: list[float] = []
    hmin = np.full((n, n), np.inf)
    last_u = np.zeros((n, 3))
    traj = [] if record else None
    buffer = SnapshotBuffer(dt, spec.delay)
    iu, ju = np.triu_indices(n, k=1)

    for step in range(spec.n_steps + 1):
        t = step * dt
        buffer.record(step, fleet)
        # collisions among active UAVs, then arrivals
        if n > 1:
            dist = np.linalg.norm(fleet.position[iu] - fleet.position[ju], axis=1)
            live = active[iu] & active[ju]
            hit = live & (dist < fleet.radius[iu] + fleet.radius[ju])
            if hit.any():
                both = np.zeros(n, dtype=bool)
                both[iu[hit]] = True
                both[ju[hit]] = True
                collided |= both
                active &= ~both
            h = barrier_pairs(fleet, params)
            pair_live = active[:, None] & active[None, :]
            np.minimum(hmin, np.where(pair_live, h, np.inf), out=hmin)
        arrived = active & (np.linalg.norm(fleet.position - goals, axis=1) <= spec.arrival_tol)
        reached |= arrived
        arrival[arrived] = t
        active &= ~arrived
        if step == spec.n_steps or not active.any():
            break

        idx = np.flatnonzero(active)
        own = fleet.subset(idx)
        seen_all, prev_all = buffer.at(t)
        seen = seen_all.subset(idx)
        if config.kind is ControllerKind.CENTRALIZED:
            U, ok, ct = _centralized_step(own, goals[idx], config, params)
        else:
            prev = prev_all.subset(idx) if prev_all is not None else None
            box = seen_input_boxes(seen, prev, dt, config.u_tol_fraction)
            mask = ~np.eye(idx.size, dtype=bool)
            rows = build_rows(config, own, seen, goals[idx], mask, params, seen_box=box, dt=dt)
            U, ok, _, ct = decide_all(rows, config, last_u[idx])
        ic[idx[~ok]] += 1
        last_u[idx[ok]] = U[ok]
        times.extend(ct.tolist())
        if record:
            for k, i in enumerate(idx):
                traj.append((t, int(i), *fleet.position[i], fleet.speed[i], fleet.pitch[i],
                             fleet.yaw[i], *U[k], bool(ok[k])))
        full_u = np.zeros((n, 3))
        full_u[idx] = U
        fleet = fleet.advance(full_u, dt, mask=active)

    np.fill_diagonal(hmin, np.inf)
    return TrialResult(spec.seed, config.name, reached, collided, arrival, ic, times, hmin, traj)


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass
class MetricsTable:
    controller: str
    sr: float
    ic_mean: float
    at_mean: float | None
    ct_mean: float          # ms
    trials: int
    per_trial: list[dict] = field(default_factory=list)

    @classmethod
    def from_results(cls, name: str, results: list[TrialResult]) -> "MetricsTable":
        reached = np.concatenate([r.reached for r in results])
        arrivals = np.concatenate([r.arrival_time[r.reached] for r in results])
        ic = np.array([r.infeasible_steps.mean() for r in results])
        ct = np.concatenate([np.asarray(r.solve_times) for r in results]) if results else np.zeros(0)
        return cls(
            controller=name,
            sr=float(reached.mean()),
            ic_mean=float(ic.mean()),
            at_mean=float(arrivals.mean()) if arrivals.size else None,
            ct_mean=1e3 * float(ct.mean()) if ct.size else 0.0,
            trials=len(results),
            per_trial=[r.summary() for r in results],
        )

    def as_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("ct_mean")
            for row in d["per_trial"]:
                row.pop("ct_mean_ms", None)
        return d


def monte_carlo(template: ScenarioSpec, controllers: list[ControllerConfig], trials: int,
                params: SafetyParams = SafetyParams(), jobs: int = 1,
                keep_results: bool = False):
    """Paired trials (seeds template.seed .. +trials-1) for every controller.

    Returns {name: MetricsTable}; with ``keep_results`` also {name: [TrialResult]}.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    tasks = [(replace(template, seed=template.seed + k), cfg, params)
             for cfg in controllers for k in range(trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_trial_task, tasks))
    else:
        results = [run_trial_task(t) for t in tasks]
    grouped: dict[str, list[TrialResult]] = {}
    for (_, cfg, _), res in zip(tasks, results):
        grouped.setdefault(cfg.name, []).append(res)
    tables = {name: MetricsTable.from_results(name, rs) for name, rs in grouped.items()}
    return (tables, grouped) if keep_results else tables


def run_trial_task(task) -> TrialResult:
    spec, config, params = task
    t0 = time.perf_counter()
    res = run_trial(spec, config, params)
    log.info("%s %s seed=%d n=%d sr=%.3f ic=%.2f (%.1fs)", spec.kind.value, config.name,
             spec.seed, spec.n, res.reached.mean(), res.infeasible_steps.mean(),
             time.perf_counter() - t0)
    return res


def default_jobs() -> int:
    try:
        return max(len(os.sched_getaffinity(0)), 1)
    except AttributeError:
        return os.cpu_count() or 1


def format_table(tables: dict[str, MetricsTable]) -> str:
    lines = [f"{'controller':<12} {'SR[%]':>8} {'IC':>9} {'AT[s]':>9} {'CT[ms]':>8} {'trials':>6}"]
    for name, tb in tables.items():
        at = f"{tb.at_mean:9.2f}" if tb.at_mean is not None else f"{'-':>9}"
        lines.append(f"{name:<12} {100 * tb.sr:8.2f} {tb.ic_mean:9.2f} {at} {tb.ct_mean:8.3f} {tb.trials:6d}")
    return "\n".join(lines) + "\n"


def write_metrics(path, tables: dict[str, MetricsTable], timing: bool = True) -> Path:
    path = Path(path)
    payload = {name: tb.as_dict(timing) for name, tb in tables.items()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
