"""Random problem generators shared by the unit and acceptance tests."""
import numpy as np

from fecbf.kinematics import UavLimits, UavState


def random_qp(rng):
    """A small QP with a mix of feasible and infeasible instances.

    Returns (target, weights, A, b, lower, upper).
    """
    dim = int(rng.integers(3, 13))
    m = int(rng.integers(0, 21))
    A = rng.normal(size=(m, dim))
    w = rng.uniform(0.5, 2.0, size=dim)
    half = rng.uniform(1.5, 4.0, size=dim)
    lower, upper = -half, half.copy()
    free = rng.random(dim) < 0.3
    lower[free], upper[free] = -np.inf, np.inf
    x_f = rng.uniform(np.maximum(lower, -1), np.minimum(upper, 1))
    if rng.random() < 0.85:
        b = A @ x_f + rng.exponential(1.0, size=m) * np.linalg.norm(A, axis=1)
    else:
        b = rng.normal(size=m) - 1.0
    target = x_f + rng.normal(scale=1.2, size=dim)
    return target, w, A, b, lower, upper


def random_states(rng, n, spread=100.0, max_pitch=np.pi / 3):
    states, limits = [], []
    for _ in range(n):
        lim = UavLimits.from_vmax(rng.uniform(2, 3))
        states.append(UavState(rng.uniform(-spread, spread, 3), rng.uniform(lim.v_min, lim.v_max),
                               rng.uniform(-max_pitch, max_pitch), rng.uniform(0, 2 * np.pi)))
        limits.append(lim)
    return states, limits


def _frame_search(directions, zeta_dirs=None, grid=(48, 96), margin=0.05):
    """(pitch, yaw) whose normalised frame puts every direction in one open octant."""
    from fecbf.cbf import normalized_frames

    pitches = np.linspace(-1.4, 1.4, grid[0])
    yaws = np.linspace(0, 2 * np.pi, grid[1], endpoint=False)
    P, Y = np.meshgrid(pitches, yaws, indexing="ij")
    F = normalized_frames(P.ravel(), Y.ravel())                 # (g, 3, 3)
    local = np.einsum("grc,kr->gkc", F, directions)             # (g, k, 3)
    pos = np.all(local > margin, axis=1)
    neg = np.all(local < -margin, axis=1)
    ok = np.all(pos | neg, axis=1)
    idx = np.flatnonzero(ok)
    return None if idx.size == 0 else (P.ravel()[idx], Y.ravel()[idx])


def sign_consistent_configuration(rng, n, zeta=0.5):
    """Random states whose centralised C satisfies the sign-consistency hypothesis.

    Virtual states form an acute point set (n <= 4), each UAV's attitude is
    chosen so that all its relative vectors s_i - s_j share one octant of its
    frame, and positions follow from p = s - zeta v.
    """
    if not 2 <= n <= 4:
        raise ValueError("acute configurations used here have 2 to 4 points")
    tetra = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    for _ in range(200):
        Q, _r = np.linalg.qr(rng.normal(size=(3, 3)))
        pts = (tetra[:n] + rng.normal(scale=0.15, size=(n, 3))) @ Q.T
        s = rng.uniform(5, 60) * pts + rng.uniform(-500, 500, size=3)
        choice = []
        for i in range(n):
            dirs = np.array([s[i] - s[j] for j in range(n) if j != i])
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            found = _frame_search(dirs)
            if found is None:
                break
            k = int(rng.integers(found[0].size))
            choice.append((found[0][k], found[1][k]))
        if len(choice) < n:
            continue
        states, limits = [], []
        for i in range(n):
            lim = UavLimits.from_vmax(rng.uniform(2, 3))
            v = rng.uniform(lim.v_min, lim.v_max)
            pitch, yaw = choice[i]
            vel = v * np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)])
            states.append(UavState(s[i] - zeta * vel, v, float(pitch), float(np.mod(yaw, 2 * np.pi))))
            limits.append(lim)
        return states, limits
    raise RuntimeError("no sign-consistent configuration found")
