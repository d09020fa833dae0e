"""Dense strictly convex QP with diagonal Hessian, box bounds and linear inequalities.

    minimize    sum_k w_k (x_k - t_k)^2
    subject to  A x <= b,  lower <= x <= upper

The core is the Goldfarb-Idnani dual active-set method: it starts at the
unconstrained minimiser and adds violated constraints one at a time, so the
returned point is an exact vertex of the KKT system. When no dual step
exists the method has found a Farkas vector; it is re-checked arithmetically
before a problem is declared infeasible, and the phase-I LP decides any case
the check cannot settle.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.optimize import linprog

OPTIMAL, INFEASIBLE, ITERLIMIT = 0, 1, 2

FEAS_TOL = 1e-10


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITERLIMIT = "iterlimit"


@dataclass
class QpProblem:
    target: np.ndarray
    weights: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float).ravel()
        dim = self.target.size
        self.weights = np.broadcast_to(np.asarray(self.weights, dtype=float), (dim,)).copy()
        self.A = np.asarray(self.A, dtype=float).reshape(-1, dim)
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (dim,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (dim,)).copy()
        if np.any(self.weights <= 0):
            raise ValueError("weights must be strictly positive")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if self.A.shape[0] != self.b.size:
            raise ValueError(f"A has {self.A.shape[0]} rows but b has {self.b.size}")

    @property
    def dim(self) -> int:
        return self.target.size

    def objective(self, x) -> float:
        return float(np.sum(self.weights * (np.asarray(x) - self.target) ** 2))


@dataclass
class QpOutcome:
    status: QpStatus
    solution: np.ndarray | None = None
    objective: float | None = None
    active_set: list[int] | None = None
    multipliers: np.ndarray | None = None
    certificate: np.ndarray | None = None
    iterations: int = 0
    kkt_residual: float | None = None

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


@dataclass
class Phase1Result:
    feasible: bool
    t: float
    witness: np.ndarray | None = None
    certificate: np.ndarray | None = None
    box_multipliers: np.ndarray | None = field(default=None, repr=False)


class SolverError(RuntimeError):
    """The LP backend stopped without a verdict."""


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _givens(a, b):
    if b == 0.0:
        return 1.0, 0.0, a
    rho = np.hypot(a, b)
    return a / rho, b / rho, rho


@njit(cache=True)
def _rotate_cols(J, a, b, c, s):
    for r in range(J.shape[0]):
        ja = J[r, a]
        jb = J[r, b]
        J[r, a] = c * ja + s * jb
        J[r, b] = -s * ja + c * jb


@njit(cache=True)
def _dual_active_set(H, g, N, c, tol, max_iter):
    """min 1/2 x'Hx + g'x  s.t.  N x >= c.

    Returns (status, x, active, mult, q, iters, cert). ``active[:q]`` are
    the active rows with multipliers ``mult[:q]``; ``cert`` is a Farkas vector
    (cert >= 0, N' cert = 0, c' cert > 0) when status is INFEASIBLE.
    """
    n = H.shape[0]
    m = N.shape[0]
    L = np.linalg.cholesky(H)
    J = np.ascontiguousarray(np.linalg.inv(L).T)
    x = -(J @ (J.T @ g))
    R = np.zeros((n, n))
    active = np.zeros(n, np.int64)
    mult = np.zeros(n + 1)
    cert = np.zeros(m)
    q = 0
    iters = 0
    while True:
        s = N @ x - c
        p = -1
        worst = 0.0
        for i in range(m):
            if s[i] < -tol[i] and (p < 0 or s[i] < worst):
                p = i
                worst = s[i]
        if p < 0:
            return OPTIMAL, x, active, mult, q, iters, cert
        npv = N[p]
        mult[q] = 0.0
        while True:
            iters += 1
            if iters > max_iter:
                return ITERLIMIT, x, active, mult, q, iters, cert
            d = J.T @ npv
            z = np.zeros(n)
            for k in range(q, n):
                for rr in range(n):
                    z[rr] += J[rr, k] * d[k]
            r = np.zeros(q)
            for j in range(q - 1, -1, -1):
                acc = d[j]
                for k in range(j + 1, q):
                    acc -= R[j, k] * r[k]
                r[j] = acc / R[j, j]
            t1 = np.inf
            kdrop = -1
            for j in range(q):
                if r[j] > 0.0:
                    ratio = mult[j] / r[j]
                    if ratio < t1:
                        t1 = ratio
                        kdrop = j
            zn = z @ npv
            dd = d @ d
            if zn <= 1e-13 * dd:
                t2 = np.inf
            else:
                t2 = -(npv @ x - c[p]) / zn
            if t1 == np.inf and t2 == np.inf:
                cert[p] = 1.0
                for j in range(q):
                    cert[active[j]] = max(-r[j], 0.0)
                return INFEASIBLE, x, active, mult, q, iters, cert
            if t2 < np.inf and t2 <= t1:
                x = x + t2 * z
                for j in range(q):
                    mult[j] -= t2 * r[j]
                mult[q] += t2
                # add p: rotate d[q+1:] into d[q]
                for j in range(n - 1, q, -1):
                    cg, sg, rho = _givens(d[j - 1], d[j])
                    d[j - 1] = rho
                    d[j] = 0.0
                    _rotate_cols(J, j - 1, j, cg, sg)
                for j in range(q + 1):
                    R[j, q] = d[j]
                active[q] = p
                q += 1
                break
            t = t1
            if t2 < np.inf:
                x = x + t * z
            for j in range(q):
                mult[j] -= t * r[j]
            mult[q] += t
            # drop kdrop and restore R to triangular form
            for j in range(kdrop, q - 1):
                active[j] = active[j + 1]
                mult[j] = mult[j + 1]
                for rr in range(n):
                    R[rr, j] = R[rr, j + 1]
            mult[q - 1] = mult[q]
            mult[q] = 0.0
            for rr in range(n):
                R[rr, q - 1] = 0.0
            for j in range(kdrop, q - 1):
                cg, sg, rho = _givens(R[j, j], R[j + 1, j])
                R[j, j] = rho
                R[j + 1, j] = 0.0
                for k in range(j + 1, q - 1):
                    ra = R[j, k]
                    rb = R[j + 1, k]
                    R[j, k] = cg * ra + sg * rb
                    R[j + 1, k] = -sg * ra + cg * rb
                _rotate_cols(J, j, j + 1, cg, sg)
            q -= 1


@njit(cache=True)
def _penalized_active_set(w, target, L, delta, lam, N, c, tol, max_iter, max_outer):
    """min sum w (x - target)^2 + sum_j lam_j max(0, L_j x - delta_j)^2  s.t.  N x >= c.

    Semismooth Newton over the set of penalised rows; each pass solves a
    smooth QP with the dual active-set kernel. Status ITERLIMIT means the
    outer loop did not settle (the caller then solves the lifted QP).
    """
    n = w.size
    ms = L.shape[0]
    in_pen = np.zeros(ms, np.bool_)
    x = target.copy()
    for j in range(ms):
        in_pen[j] = L[j] @ x > delta[j]
    total = 0
    for outer in range(max_outer):
        H = np.zeros((n, n))
        g = np.zeros(n)
        for k in range(n):
            H[k, k] = 2.0 * w[k]
            g[k] = -2.0 * w[k] * target[k]
        for j in range(ms):
            if in_pen[j]:
                for a in range(n):
                    g[a] -= 2.0 * lam[j] * delta[j] * L[j, a]
                    for b in range(n):
                        H[a, b] += 2.0 * lam[j] * L[j, a] * L[j, b]
        status, x, active, mult, q, iters, cert = _dual_active_set(H, g, N, c, tol, max_iter)
        total += iters
        if status != OPTIMAL:
            return status, x, active, mult, q, total, cert
        settled = True
        for j in range(ms):
            v = L[j] @ x - delta[j]
            band = 1e-12 * (1.0 + abs(delta[j]))
            if in_pen[j] and v < -band:
                settled = False
            elif not in_pen[j] and v > band:
                settled = False
        if settled:
            return OPTIMAL, x, active, mult, q, total, cert
        for j in range(ms):
            in_pen[j] = L[j] @ x > delta[j]
    return ITERLIMIT, x, active, mult, 0, total, cert


@njit(cache=True)
def _farkas_ok(N, c, y):
    total = 0.0
    for k in range(y.size):
        if y[k] < 0.0:
            return False
        total += y[k]
    if total <= 0.0:
        return False
    cmax = 0.0
    for k in range(c.size):
        cmax = max(cmax, abs(c[k]))
    gap = 0.0
    for k in range(y.size):
        gap += c[k] * y[k] / total
    for a in range(N.shape[1]):
        r = 0.0
        for k in range(y.size):
            r += N[k, a] * y[k] / total
        if abs(r) > 1e-9:
            return False
    return gap > 1e-9 * (1.0 + cmax)


@njit(cache=True)
def _box_rows(lower, upper, N, c, start):
    dim = lower.size
    k = start
    for a in range(dim):
        if np.isfinite(lower[a]):
            N[k, a] = 1.0
            c[k] = lower[a]
            k += 1
    for a in range(dim):
        if np.isfinite(upper[a]):
            N[k, a] = -1.0
            c[k] = -upper[a]
            k += 1
    return k


@njit(cache=True)
def filter_batch(u_nom, lower, upper, hard_A, hard_b, hard_mask, soft_L, soft_d, soft_mask,
                 lam, relax, relax_weight, row_tol, max_iter, max_outer):
    """Solve every UAV's safety-filter QP of one step in a single compiled loop.

    UAV i minimises |u - u_nom_i|^2 + lam |eps|^2 over its box subject to the
    masked hard rows hard_A[i, r] . u <= hard_b[i, r] and soft rows
    soft_L[i, r] . u - eps_r <= soft_d[i, r]. Returns (U, status, slack_norm);
    status 0 optimal, 1 certified infeasible (U holds the braking input, or the
    least-violation input when ``relax``), 2 undecided (caller re-solves).
    """
    n, mh = hard_mask.shape
    ms = soft_mask.shape[1]
    dim = u_nom.shape[1]
    U = np.zeros((n, dim))
    status = np.zeros(n, np.int64)
    slack = np.zeros(n)
    w = np.ones(dim)
    for i in range(n):
        target = u_nom[i].copy()
        nh = 0
        ok = True
        for r in range(mh):
            if hard_mask[i, r]:
                nh += 1
                v = 0.0
                for a in range(dim):
                    v += hard_A[i, r, a] * target[a]
                if v > hard_b[i, r] + row_tol * (1.0 + abs(hard_b[i, r])):
                    ok = False
        ns = 0
        for r in range(ms):
            if soft_mask[i, r]:
                ns += 1
                v = 0.0
                for a in range(dim):
                    v += soft_L[i, r, a] * target[a]
                if v > soft_d[i, r]:
                    ok = False
        if ok:
            U[i] = target
            continue
        nbox = 0
        for a in range(dim):
            nbox += np.isfinite(lower[i, a]) + np.isfinite(upper[i, a])
        N = np.zeros((nh + nbox, dim))
        c = np.zeros(nh + nbox)
        Ln = np.zeros((nh, dim))
        bn = np.zeros(nh)
        k = 0
        for r in range(mh):
            if hard_mask[i, r]:
                nrm = 0.0
                for a in range(dim):
                    nrm += hard_A[i, r, a] ** 2
                nrm = np.sqrt(nrm)
                if nrm == 0.0:
                    nrm = 1.0
                for a in range(dim):
                    N[k, a] = -hard_A[i, r, a] / nrm
                    Ln[k, a] = hard_A[i, r, a] / nrm
                c[k] = -hard_b[i, r] / nrm
                bn[k] = hard_b[i, r] / nrm
                k += 1
        _box_rows(lower[i], upper[i], N, c, nh)
        L = np.zeros((ns, dim))
        d = np.zeros(ns)
        k = 0
        for r in range(ms):
            if soft_mask[i, r]:
                L[k] = soft_L[i, r]
                d[k] = soft_d[i, r]
                k += 1
        tol = FEAS_TOL * (1.0 + np.abs(c))
        lam_vec = np.full(ns, lam)
        st, x, active, mult, q, iters, cert = _penalized_active_set(
            w, target, L, d, lam_vec, N, c, tol, max_iter, max_outer)
        if st == OPTIMAL:
            for a in range(dim):
                U[i, a] = min(max(x[a], lower[i, a]), upper[i, a])
            e2 = 0.0
            for r in range(ns):
                v = -d[r]
                for a in range(dim):
                    v += L[r, a] * U[i, a]
                if v > 0.0:
                    e2 += v * v
            slack[i] = np.sqrt(e2)
            continue
        if st == INFEASIBLE and _farkas_ok(N, c, cert):
            status[i] = 1
            U[i, 0] = lower[i, 0]
            if relax:
                Nb = np.zeros((nbox, dim))
                cb = np.zeros(nbox)
                _box_rows(lower[i], upper[i], Nb, cb, 0)
                La = np.vstack((Ln, L))
                da = np.concatenate((bn, d))
                la = np.concatenate((np.full(nh, relax_weight), lam_vec))
                st2, x2, _a, _m, _q, _it, _c = _penalized_active_set(
                    w, target, La, da, la, Nb, cb, FEAS_TOL * (1.0 + np.abs(cb)),
                    max_iter, max_outer)
                if st2 == OPTIMAL:
                    for a in range(dim):
                        U[i, a] = min(max(x2[a], lower[i, a]), upper[i, a])
            continue
        status[i] = 2
    return U, status, slack


# ---------------------------------------------------------------------------
# problem assembly


def _stack_constraints(A, b, lower, upper):
    """Rows in N x >= c form: unit-normalised general rows, then finite bounds.

    Returns (N, c, scale, origin) where origin[k] is the general row index
    (>= 0), or -(k+1) for the lower bound on x_k and -(dim+k+1) for its upper.
    """
    dim = lower.size
    norms = np.linalg.norm(A, axis=1) if A.size else np.zeros(0)
    scale = np.where(norms > 0, norms, 1.0)
    rows = [-A / scale[:, None]]
    rhs = [-b / scale]
    origin = [np.arange(A.shape[0])]
    eye = np.eye(dim)
    lo = np.flatnonzero(np.isfinite(lower))
    hi = np.flatnonzero(np.isfinite(upper))
    rows += [eye[lo], -eye[hi]]
    rhs += [lower[lo], -upper[hi]]
    origin += [-(lo + 1), -(dim + hi + 1)]
    N = np.ascontiguousarray(np.vstack(rows)) if rows else np.zeros((0, dim))
    c = np.concatenate(rhs)
    return N, c, scale, np.concatenate(origin).astype(int)


def _split_rows(vec, origin, n_general, dim):
    """Scatter a per-stacked-row vector into (general, lower, upper) parts."""
    general = np.zeros(n_general)
    lower = np.zeros(dim)
    upper = np.zeros(dim)
    for value, o in zip(vec, origin):
        if o >= 0:
            general[o] += value
        elif -o <= dim:
            lower[-o - 1] += value
        else:
            upper[-o - dim - 1] += value
    return general, lower, upper


def _verify_farkas(N, c, y) -> bool:
    """y >= 0, N'y ~ 0 and c'y > 0 proves {x : N x >= c} empty."""
    total = y.sum()
    if total <= 0 or np.any(y < 0):
        return False
    y = y / total
    residual = np.abs(N.T @ y).max() if N.size else 0.0
    gap = c @ y
    return residual <= 1e-9 and gap > 1e-9 * (1.0 + np.abs(c).max())


def _outcome(problem, status, x, active, mult, q, iters, cert, N, c, scale, origin):
    m = problem.A.shape[0]
    dim = problem.dim
    if status == OPTIMAL:
        x = np.clip(x, problem.lower, problem.upper)
        act = [int(origin[a]) for a in active[:q]]
        full = np.zeros(N.shape[0])
        full[active[:q]] = mult[:q]
        gen, lo, hi = _split_rows(full, origin, m, dim)
        # stationarity: 2w(x-t) + A' mu_gen - mu_lo + mu_hi = 0 in original scaling
        mu = gen / scale
        grad = 2.0 * problem.weights * (x - problem.target) + problem.A.T @ mu - lo + hi
        return QpOutcome(QpStatus.OPTIMAL, x, problem.objective(x), act, mu,
                         iterations=iters, kkt_residual=float(np.abs(grad).max(initial=0.0)))
    if status == INFEASIBLE:
        if _verify_farkas(N, c, cert):
            gen, _, _ = _split_rows(cert, origin, m, dim)
            gen = gen / scale
            if gen.sum() > 0:
                gen = gen / gen.sum()
            return QpOutcome(QpStatus.INFEASIBLE, certificate=gen, iterations=iters)
        ph1 = phase1_feasibility(problem.A, problem.b, problem.lower, problem.upper)
        if not ph1.feasible:
            return QpOutcome(QpStatus.INFEASIBLE, certificate=ph1.certificate, iterations=iters)
    return QpOutcome(QpStatus.ITERLIMIT, iterations=iters)


def solve(problem: QpProblem, max_iter: int = 200) -> QpOutcome:
    """Solve ``problem``; status is OPTIMAL, INFEASIBLE (certified) or ITERLIMIT."""
    N, c, scale, origin = _stack_constraints(problem.A, problem.b, problem.lower, problem.upper)
    tol = FEAS_TOL * (1.0 + np.abs(c))
    H = np.diag(2.0 * problem.weights)
    g = -2.0 * problem.weights * problem.target
    result = _dual_active_set(H, g, N, c, tol, max_iter)
    return _outcome(problem, *result, N, c, scale, origin)


def solve_with_slacks(target, lower, upper, A, b, L, delta, lam, max_iter=200,
                      max_outer=100) -> QpOutcome:
    """QP with one non-negative, quadratically penalised slack per soft row.

        minimize    |u - target|^2 + sum_j lam_j eps_j^2
        subject to  A u <= b,  L u - eps <= delta,  eps >= 0,  lower <= u <= upper

    The slacks are eliminated (eps_j = max(0, l_j.u - delta_j) at the
    optimum), leaving a small piecewise-quadratic problem in u. The returned
    solution is the lifted vector (u, eps), identical to solving the full QP.
    """
    target = np.asarray(target, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, target.size)
    L = np.asarray(L, dtype=float).reshape(-1, target.size)
    b = np.asarray(b, dtype=float)
    delta = np.asarray(delta, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    N, c, scale, origin = _stack_constraints(A, b, lower, upper)
    tol = FEAS_TOL * (1.0 + np.abs(c))
    w = np.ones(target.size)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), delta.shape).copy()
    status, x, active, mult, q, iters, cert = _penalized_active_set(
        w, target, np.ascontiguousarray(L), delta, lam, N, c, tol, max_iter, max_outer)
    if status == OPTIMAL:
        u = np.clip(x, lower, upper)
        eps = np.maximum(L @ u - delta, 0.0)
        sol = np.concatenate([u, eps])
        obj = float(np.sum((u - target) ** 2) + lam @ (eps * eps))
        act = [int(origin[a]) for a in active[:q]]
        return QpOutcome(QpStatus.OPTIMAL, sol, obj, act, iterations=iters)
    if status == INFEASIBLE:
        hard = QpProblem(target, 1.0, A, b, lower, upper)
        return _outcome(hard, status, x, active, mult, q, iters, cert, N, c, scale, origin)
    return solve(lifted_problem(target, lower, upper, A, b, L, delta, lam), max_iter=max_iter * 10)


def lifted_problem(target, lower, upper, A, b, L, delta, lam) -> QpProblem:
    """The (u, eps) form of ``solve_with_slacks`` as a plain ``QpProblem``."""
    target = np.asarray(target, dtype=float)
    dim = target.size
    A = np.asarray(A, dtype=float).reshape(-1, dim)
    L = np.asarray(L, dtype=float).reshape(-1, dim)
    ms = L.shape[0]
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (ms,))
    A_full = np.block([
        [A, np.zeros((A.shape[0], ms))],
        [L, -np.eye(ms)],
    ])
    return QpProblem(
        target=np.concatenate([target, np.zeros(ms)]),
        weights=np.concatenate([np.ones(dim), lam.astype(float)]),
        A=A_full,
        b=np.concatenate([np.asarray(b, dtype=float), np.asarray(delta, dtype=float)]),
        lower=np.concatenate([np.asarray(lower, dtype=float), np.zeros(ms)]),
        upper=np.concatenate([np.asarray(upper, dtype=float), np.full(ms, np.inf)]),
    )


# ---------------------------------------------------------------------------
# phase I


def phase1_feasibility(A, b, lower=None, upper=None, tol: float = 1e-9) -> Phase1Result:
    """Minimise the largest (row-normalised) violation t of A u <= b + t over the box.

    t is bounded below by -1, so a strictly feasible system returns t < 0
    with an interior witness. When t* > tol the LP duals give the Farkas
    certificate q >= 0 (one entry per row of A, normalised to unit 1-norm).
    """
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A.reshape(1, -1)
    b = np.asarray(b, dtype=float).ravel()
    m, dim = A.shape
    lower = np.full(dim, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(dim, np.inf) if upper is None else np.asarray(upper, dtype=float)
    norms = np.linalg.norm(A, axis=1)
    scale = np.where(norms > 0, norms, 1.0)
    An = A / scale[:, None]
    bn = b / scale
    cost = np.zeros(dim + 1)
    cost[-1] = 1.0
    A_ub = np.hstack([An, -np.ones((m, 1))])
    bounds = [(lo if np.isfinite(lo) else None, hi if np.isfinite(hi) else None)
              for lo, hi in zip(lower, upper)] + [(-1.0, None)]
    res = linprog(cost, A_ub=A_ub, b_ub=bn, bounds=bounds, method="highs",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise SolverError(f"phase-I LP did not finish: {res.message}")
    t = float(res.x[-1])
    if t <= tol:
        return Phase1Result(True, t, witness=res.x[:dim].copy())
    y = np.maximum(-np.asarray(res.ineqlin.marginals), 0.0)
    q = y / scale
    q = q / q.sum()
    box = -np.asarray(res.lower.marginals[:dim]) + np.asarray(res.upper.marginals[:dim])
    return Phase1Result(False, t, certificate=q, box_multipliers=box)
