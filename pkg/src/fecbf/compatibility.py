"""Centralised constraint system and its internal-compatibility analysis.

Every pair (i, j), i < j, contributes the barrier condition
k_ij.u_i + k_ji.u_j + xi_ij >= 0. Stacked as C u <= b, the row carries
-k_ij and -k_ji and the right-hand side xi_ij, so that C u <= b is exactly
the set of inputs satisfying all pairwise conditions.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cbf import SafetyParams, pair_terms
from .kinematics import Fleet, UavLimits, UavState
from .qp import QpOutcome, QpProblem, SolverError, phase1_feasibility, solve

log = logging.getLogger(__name__)


class Verdict(enum.Enum):
    COMPATIBLE = "compatible"
    INCOMPATIBLE = "incompatible"


class UndecidedError(RuntimeError):
    """The LP could not settle compatibility to the required accuracy."""


@dataclass
class ConstraintSystem:
    C: np.ndarray
    b: np.ndarray
    pair_index: list[tuple[int, int]]

    @property
    def n_uav(self) -> int:
        return self.C.shape[1] // 3

    def residual(self, u) -> np.ndarray:
        return self.C @ np.asarray(u, dtype=float) - self.b


@dataclass
class FarkasOutcome:
    verdict: Verdict
    certificate: np.ndarray | None = None
    witness: np.ndarray | None = None
    max_violation: float | None = None

    @property
    def compatible(self) -> bool:
        return self.verdict is Verdict.COMPATIBLE


def build_centralized_system(states: list[UavState], limits: list[UavLimits],
                             params: SafetyParams) -> ConstraintSystem:
    if len(states) < 2:
        raise ValueError(f"need at least two UAVs, got {len(states)}")
    return system_from_fleet(Fleet.from_lists(states, limits), params)


def system_from_fleet(fleet: Fleet, params: SafetyParams) -> ConstraintSystem:
    n = len(fleet)
    if n < 2:
        raise ValueError(f"need at least two UAVs, got {n}")
    terms = pair_terms(fleet, fleet, params)
    iu, ju = np.triu_indices(n, k=1)
    rows = np.arange(iu.size)
    C = np.zeros((iu.size, 3 * n))
    for c in range(3):
        C[rows, 3 * iu + c] = -terms.k_own[iu, ju, c]
        C[rows, 3 * ju + c] = -terms.k_seen[iu, ju, c]
    b = terms.xi[iu, ju].copy()
    return ConstraintSystem(C, b, list(zip(iu.tolist(), ju.tolist())))


def _polish_certificate(C, q):
    """Project q onto {C'q = 0} on its support, keeping q >= 0 and |q|_1 = 1."""
    support = q > 1e-12 * q.max()
    qs = q[support]
    Cs = C[support]
    # least-norm correction dq with Cs' (qs + dq) = 0
    dq, *_ = np.linalg.lstsq(Cs.T, -(Cs.T @ qs), rcond=None)
    polished = np.zeros_like(q)
    polished[support] = np.maximum(qs + dq, 0.0)
    total = polished.sum()
    return polished / total if total > 0 else q


def certificate_valid(C, b, q, tol=1e-8) -> bool:
    q = np.asarray(q, dtype=float)
    if np.any(q < 0) or q.sum() <= 0:
        return False
    scale = tol * np.abs(q).sum() * max(np.abs(C).sum(axis=1).max(initial=0.0), 1.0)
    return bool(np.abs(q @ C).max(initial=0.0) <= scale and q @ b < -tol)


def witness_valid(C, b, u, tol=1e-8) -> bool:
    return bool(np.all(C @ u <= b + tol))


def farkas_check(sys: ConstraintSystem | tuple) -> FarkasOutcome:
    """Decide whether {u : C u <= b} is empty; ship a witness or a certificate.

    Accepts a ``ConstraintSystem`` or a plain ``(C, b)`` pair. Raises
    ``UndecidedError`` when neither alternative can be verified.
    """
    C, b = (sys.C, sys.b) if isinstance(sys, ConstraintSystem) else sys
    C = np.atleast_2d(np.asarray(C, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    try:
        ph1 = phase1_feasibility(C, b)
    except SolverError as exc:
        raise UndecidedError(str(exc)) from exc
    if ph1.feasible:
        if witness_valid(C, b, ph1.witness):
            return FarkasOutcome(Verdict.COMPATIBLE, witness=ph1.witness, max_violation=ph1.t)
        raise UndecidedError(f"phase-I witness fails verification (t* = {ph1.t:.3e})")
    q = ph1.certificate
    if not certificate_valid(C, b, q):
        q = _polish_certificate(C, q)
    if certificate_valid(C, b, q):
        return FarkasOutcome(Verdict.INCOMPATIBLE, certificate=q, max_violation=ph1.t)
    raise UndecidedError(f"certificate fails verification (t* = {ph1.t:.3e})")


def nullspace_dim_bounds(n: int) -> tuple[int, int]:
    """Bounds on dim N(C') for the n(n-1)/2 x 3n pairwise system."""
    if n < 2:
        raise ValueError(f"need at least two UAVs, got {n}")
    rows = n * (n - 1) // 2
    return max(0, n * (n - 7) // 2), rows


def left_nullspace_dim(C, rel_tol=1e-10) -> int:
    sv = np.linalg.svd(C, compute_uv=False)
    rank = int(np.sum(sv > rel_tol * sv.max())) if sv.size and sv.max() > 0 else 0
    return C.shape[0] - rank


def uav_block(sys: ConstraintSystem, i: int) -> np.ndarray:
    """The (n-1) x 3 submatrix of C built from UAV i's non-zero blocks."""
    rows = [r for r, pair in enumerate(sys.pair_index) if i in pair]
    return sys.C[rows, 3 * i:3 * i + 3]


def sign_consistency_holds(sys: ConstraintSystem, n: int | None = None,
                           threshold: float = 1e-12):
    """Per-UAV and overall check that each column of every C_i has one strict sign.

    Returns (per_uav: bool array, overall: bool). When it holds, no non-zero
    q >= 0 can annihilate C, so the system is compatible for any b.
    """
    n = sys.n_uav if n is None else n
    per_uav = np.zeros(n, dtype=bool)
    for i in range(n):
        block = uav_block(sys, i)
        positive = np.all(block > threshold, axis=0)
        negative = np.all(block < -threshold, axis=0)
        per_uav[i] = bool(np.all(positive | negative))
    return per_uav, bool(per_uav.all())


def solve_centralized_qp(states: list[UavState], limits: list[UavLimits],
                         params: SafetyParams, u_nominal, system: ConstraintSystem | None = None,
                         fleet: Fleet | None = None) -> QpOutcome:
    """Minimally modify the stacked nominal input subject to input bounds and C u <= b.

    ``system`` overrides the assembled constraints (used to inject test cases);
    ``fleet`` may replace ``states``/``limits``.
    """
    if fleet is None:
        fleet = Fleet.from_lists(states, limits)
    sys = system_from_fleet(fleet, params) if system is None else system
    lower = fleet.u_min.ravel()
    upper = fleet.u_max.ravel()
    problem = QpProblem(np.asarray(u_nominal, dtype=float), 1.0, sys.C, sys.b, lower, upper)
    return solve(problem, max_iter=max(200, 10 * problem.dim))


def dump_system(path, sys: ConstraintSystem, outcome: FarkasOutcome | None = None) -> Path:
    """Write C, b (and the certificate, if any) as matrix-market style coordinate text."""
    path = Path(path)
    C = sys.C
    nz = np.argwhere(C != 0)
    lines = [
        "%%MatrixMarket matrix coordinate real general",
        "% C of the stacked pairwise system C u <= b",
        f"% pairs: {' '.join(f'{i}-{j}' for i, j in sys.pair_index)}",
        f"{C.shape[0]} {C.shape[1]} {len(nz)}",
    ]
    lines += [f"{r + 1} {c + 1} {C[r, c]:.17g}" for r, c in nz]
    lines += ["%%MatrixMarket matrix array real general", "% b", f"{sys.b.size} 1"]
    lines += [f"{v:.17g}" for v in sys.b]
    if outcome is not None:
        lines.append(f"% verdict: {outcome.verdict.value}")
        if outcome.certificate is not None:
            lines += ["%%MatrixMarket matrix array real general", "% certificate q",
                      f"{outcome.certificate.size} 1"]
            lines += [f"{v:.17g}" for v in outcome.certificate]
        if outcome.witness is not None:
            lines += ["%%MatrixMarket matrix array real general", "% witness u",
                      f"{outcome.witness.size} 1"]
            lines += [f"{v:.17g}" for v in outcome.witness]
    path.write_text("\n".join(lines) + "\n")
    return path
