"""Dense convex QP solver: dual active-set method with KKT certification.

Solves  min 0.5 x'Hx + f'x  s.t.  A_eq x = b_eq,  A_in x <= b_in,
lb <= x <= ub.  Equalities are eliminated through a nullspace
parameterization, bounds are folded into inequality rows, and the reduced
inequality-only problem is solved with a Goldfarb-Idnani style dual active
set (the working set grows from the unconstrained optimum, so no feasible
starting point is needed and infeasibility is detected directly).

Problems here are small and dense (at most a few hundred variables), so
every iteration re-solves against H instead of maintaining factorization
updates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["QPResult", "qp_solve"]

_TOL = 1e-10


@dataclass
class QPResult:
    """Solution record; ``status`` is one of optimal / infeasible /
    unbounded / iteration_limit."""

    status: str
    x: np.ndarray | None = None
    objective: float | None = None
    iterations: int = 0
    eq_multipliers: np.ndarray | None = None
    ineq_multipliers: np.ndarray | None = None  # merged rows: user, ub, lb
    residuals: dict = field(default_factory=dict)

    @property
    def certified(self) -> bool:
        r = self.residuals
        return (
            self.status == "optimal"
            and r
            and r["stationarity"] < 1e-8
            and r["primal"] < 1e-8
            and r["complementarity"] < 1e-8
        )


def _merge_inequalities(n, A_in, b_in, lb, ub):
    rows, rhs = [], []
    if A_in is not None:
        A_in = np.atleast_2d(np.asarray(A_in, dtype=float))
        b_in = np.atleast_1d(np.asarray(b_in, dtype=float))
        if A_in.shape != (b_in.size, n):
            raise ValueError("inequality rows are dimensionally inconsistent")
        rows.append(A_in)
        rhs.append(b_in)
    if ub is not None:
        ub = np.asarray(ub, dtype=float)
        mask = np.isfinite(ub)
        if np.any(mask):
            rows.append(np.eye(n)[mask])
            rhs.append(ub[mask])
    if lb is not None:
        lb = np.asarray(lb, dtype=float)
        mask = np.isfinite(lb)
        if np.any(mask):
            rows.append(-np.eye(n)[mask])
            rhs.append(-lb[mask])
    if rows:
        return np.vstack(rows), np.concatenate(rhs)
    return np.zeros((0, n)), np.zeros(0)


def _dual_active_set(G, a, A, b, max_iter):
    """min 0.5 v'Gv + a'v s.t. A v <= b with G symmetric positive definite.

    Returns (status, v, multipliers, iterations). Blocking-constraint ties
    break toward the lowest index.
    """
    m = A.shape[0]
    v = -np.linalg.solve(G, a)
    mu = np.zeros(m)
    if m == 0:
        return "optimal", v, mu, 0

    work: list[int] = []
    u = np.zeros(0)
    iters = 0

    while True:
        vals = A @ v - b
        if work:
            vals[work] = 0.0  # active rows are tight by construction
        p = int(np.argmax(vals))
        if vals[p] <= _TOL * (1.0 + np.abs(b[p])):
            mu[:] = 0.0
            mu[work] = u
            return "optimal", v, mu, iters
        n_p = A[p]
        u_plus = np.append(u, 0.0)

        while True:
            iters += 1
            if iters > max_iter:
                return "iteration_limit", v, None, iters
            Ginp = np.linalg.solve(G, n_p)
            if work:
                Nw = A[work].T  # (n, k)
                GiN = np.linalg.solve(G, Nw)
                S = Nw.T @ GiN
                rhs = Nw.T @ Ginp
                try:
                    r = np.linalg.solve(S, rhs)
                except np.linalg.LinAlgError:
                    r = np.linalg.lstsq(S, rhs, rcond=None)[0]
                z = Ginp - GiN @ r
            else:
                r = np.zeros(0)
                z = Ginp

            # dual blocking step: first multiplier driven to zero
            t1, blocker = np.inf, -1
            for j in range(len(work)):
                if r[j] > _TOL:
                    tj = u_plus[j] / r[j]
                    if tj < t1 - _TOL:
                        t1, blocker = tj, j
            # primal step to make row p tight
            znp = z @ n_p
            s_p = n_p @ v - b[p]
            t2 = (s_p / znp) if znp > _TOL else np.inf

            t = min(t1, t2)
            if not np.isfinite(t):
                return "infeasible", None, None, iters

            if np.isinf(t2):
                # dual-only step: relax the blocker, stay at v
                u_plus[: len(work)] -= t * r
                u_plus[-1] += t
                del work[blocker]
                u_plus = np.delete(u_plus, blocker)
                u = u_plus[:-1].copy()
                continue

            v = v - t * z
            if len(work):
                u_plus[: len(work)] -= t * r
            u_plus[-1] += t

            if t2 <= t1:
                work.append(p)
                u = u_plus
                break
            del work[blocker]
            u_plus = np.delete(u_plus, blocker)
            u = u_plus[:-1].copy()


def qp_solve(
    H,
    f,
    A_eq=None,
    b_eq=None,
    A_in=None,
    b_in=None,
    lb=None,
    ub=None,
    max_iter: int = 200,
) -> QPResult:
    """Solve the QP; returns a typed result rather than raising on
    infeasible or unbounded problems."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    f = np.atleast_1d(np.asarray(f, dtype=float))
    n = f.size
    if H.shape != (n, n):
        raise ValueError("H and f are dimensionally inconsistent")
    if np.max(np.abs(H - H.T)) > 1e-9 * (1.0 + np.max(np.abs(H))):
        raise ValueError("H must be symmetric")
    H = 0.5 * (H + H.T)

    A_all, b_all = _merge_inequalities(n, A_in, b_in, lb, ub)

    # eliminate equalities via a nullspace basis
    if A_eq is not None and np.size(A_eq):
        A_eq = np.atleast_2d(np.asarray(A_eq, dtype=float))
        b_eq = np.atleast_1d(np.asarray(b_eq, dtype=float))
        if A_eq.shape != (b_eq.size, n):
            raise ValueError("equality rows are dimensionally inconsistent")
        x_p, *_ = np.linalg.lstsq(A_eq, b_eq, rcond=None)
        if np.max(np.abs(A_eq @ x_p - b_eq)) > 1e-8 * (1.0 + np.max(np.abs(b_eq))):
            return QPResult(status="infeasible")
        _, sv, vt = np.linalg.svd(A_eq)
        rank = int(np.sum(sv > max(A_eq.shape) * np.finfo(float).eps * (sv[0] if sv.size else 1.0)))
        Z = vt[rank:].T  # (n, n - rank)
    else:
        A_eq = np.zeros((0, n))
        b_eq = np.zeros(0)
        x_p = np.zeros(n)
        Z = np.eye(n)

    if Z.shape[1] == 0:
        x = x_p
        status = "optimal"
        mu = np.zeros(A_all.shape[0])
        iters = 0
        if A_all.size and np.any(A_all @ x - b_all > 1e-8):
            return QPResult(status="infeasible")
    else:
        G = Z.T @ H @ Z
        a = Z.T @ (f + H @ x_p)
        # unbounded directions: null curvature with a nonzero linear term
        evals, evecs = np.linalg.eigh(G)
        scale = max(1.0, float(np.max(np.abs(G))))
        null_mask = evals < 1e-12 * scale
        if np.any(null_mask):
            if np.max(np.abs(evecs[:, null_mask].T @ a)) > 1e-10 * (1.0 + np.max(np.abs(a))):
                return QPResult(status="unbounded")
            G = G + (1e-12 * scale) * np.eye(G.shape[0])
        Ar = A_all @ Z
        br = b_all - A_all @ x_p
        status, vr, mu, iters = _dual_active_set(G, a, Ar, br, max_iter)
        if status != "optimal":
            return QPResult(status=status, iterations=iters)
        x = x_p + Z @ vr

    # recover equality multipliers from stationarity
    grad = H @ x + f + (A_all.T @ mu if A_all.size else 0.0)
    if A_eq.shape[0]:
        lam = np.linalg.lstsq(A_eq.T, -grad, rcond=None)[0]
    else:
        lam = np.zeros(0)

    res = _residuals(H, f, A_eq, b_eq, A_all, b_all, x, lam, mu)
    obj = float(0.5 * x @ H @ x + f @ x)
    return QPResult(
        status="optimal",
        x=x,
        objective=obj,
        iterations=iters,
        eq_multipliers=lam,
        ineq_multipliers=mu,
        residuals=res,
    )


def _residuals(H, f, A_eq, b_eq, A_in, b_in, x, lam, mu) -> dict:
    grad = H @ x + f
    if A_eq.shape[0] and lam is not None:
        grad = grad + A_eq.T @ lam
    if A_in.shape[0] and mu is not None:
        grad = grad + A_in.T @ mu
    primal = 0.0
    if A_eq.shape[0]:
        primal = max(primal, float(np.max(np.abs(A_eq @ x - b_eq))))
    comp = 0.0
    if A_in.shape[0]:
        slack = A_in @ x - b_in
        primal = max(primal, float(np.max(np.maximum(slack, 0.0))))
        if mu is not None:
            comp = float(np.max(np.abs(mu * slack)))
    return {
        "stationarity": float(np.max(np.abs(grad))) if (lam is not None or mu is not None) else np.inf,
        "primal": primal,
        "complementarity": comp,
    }
