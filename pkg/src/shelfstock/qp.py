"""Dense convex QP solver: dual active-set method (Goldfarb-Idnani scheme).

Solves   minimize 0.5 x'Gx + a'x   subject to   Cx <= d
for symmetric positive definite G. The iteration starts from the unconstrained
minimizer and adds the most violated constraint, stepping in primal and dual
space until its multiplier enters the basis; blocking constraints whose
multipliers would turn negative are dropped on the way. Every step strictly
decreases dual infeasibility, the method terminates finitely, and the whole
procedure is deterministic: ties resolve to the lowest row index.

Sized for MPC-scale problems (tens of variables, a few hundred rows); each
active-set change refactorizes from scratch, which keeps the code simple and
is cheap at this size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FEAS_TOL = 1e-9
PIVOT_TOL = 1e-11


class QpError(RuntimeError):
    pass


class QpInfeasible(QpError):
    """No point satisfies the constraints (within tolerance)."""


@dataclass
class QpResult:
    x: np.ndarray
    lam: np.ndarray  # multipliers, length m, zero for inactive rows
    active: list[int]
    iterations: int
    max_violation: float
    kkt_residual: float


def solve_qp(
    G: np.ndarray,
    a: np.ndarray,
    C: np.ndarray | None = None,
    d: np.ndarray | None = None,
    max_iter: int | None = None,
) -> QpResult:
    G = np.asarray(G, dtype=float)
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    try:
        Ginv = np.linalg.inv(G)
    except np.linalg.LinAlgError as exc:
        raise QpError("Hessian is singular; the QP must be strictly convex") from exc
    x = -Ginv @ a
    if C is None or len(C) == 0:
        return QpResult(x, np.zeros(0), [], 0, 0.0, _kkt(G, a, None, None, x, np.zeros(0), []))
    C = np.asarray(C, dtype=float)
    d = np.asarray(d, dtype=float)
    m = C.shape[0]
    lam_full = np.zeros(m)
    active: list[int] = []
    lam_act: list[float] = []
    iters = 0
    if max_iter is None:
        max_iter = 10 * (m + n) + 50

    while True:
        s = C @ x - d
        if active:
            s[active] = -np.inf  # rows already satisfied as equalities
        p = int(np.argmax(s))
        if s[p] <= FEAS_TOL:
            lam_full[:] = 0.0
            for idx, l in zip(active, lam_act):
                lam_full[idx] = l
            viol = float(np.max(C @ x - d, initial=0.0))
            return QpResult(x, lam_full, active, iters, viol, _kkt(G, a, C, d, x, lam_full, active))

        n_p = C[p]
        mu_p = 0.0
        while True:
            iters += 1
            if iters > max_iter:
                raise QpError(f"active-set iteration limit exceeded ({max_iter})")
            gin_p = Ginv @ n_p
            if active:
                N = C[active].T  # n x k
                GiN = Ginv @ N
                M = N.T @ GiN
                try:
                    r = np.linalg.solve(M, N.T @ gin_p)
                except np.linalg.LinAlgError as exc:
                    raise QpError("degenerate active set (dependent constraint normals)") from exc
                z = gin_p - GiN @ r
            else:
                r = np.zeros(0)
                z = gin_p

            denom = float(n_p @ z)
            # dual blocking step: first active multiplier driven to zero
            t1 = np.inf
            blocker = -1
            for j, rj in enumerate(r):
                if rj > PIVOT_TOL:
                    t = lam_act[j] / rj
                    if t < t1 - 1e-15:
                        t1, blocker = t, j
            s_p = float(n_p @ x - d[p])
            t2 = s_p / denom if denom > PIVOT_TOL else np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                raise QpInfeasible(f"constraint {p} cannot be satisfied")
            x = x - t * z
            for j in range(len(lam_act)):
                lam_act[j] -= t * r[j]
            mu_p += t
            if t2 <= t1:
                active.append(p)
                lam_act.append(mu_p)
                break
            dropped = active.pop(blocker)
            lam_act.pop(blocker)
            _ = dropped


def _kkt(G, a, C, d, x, lam_full, active) -> float:
    grad = G @ x + a
    if C is not None and len(active) > 0:
        grad = grad + C.T @ lam_full
    return float(np.max(np.abs(grad)))


def solve_qp_box_fallback(G, a, C, d) -> QpResult:
    """solve_qp, retrying once with a tiny Hessian regularization on failure."""
    try:
        return solve_qp(G, a, C, d)
    except QpInfeasible:
        raise
    except QpError:
        reg = G + 1e-9 * np.eye(G.shape[0])
        return solve_qp(reg, a, C, d)
