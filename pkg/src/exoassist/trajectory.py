"""Quintic reference generation and receding-horizon QP refinement.

The refinement discretizes each joint as a double integrator over an
N-step horizon and minimizes tracking error, effort and the predicted
anomaly score subject to velocity, acceleration and position constraints.
The anomaly score enters through an affine transition driven by the frozen
input gradient of the detector, so the program stays a convex QP.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .qp import QPResult, qp_solve

__all__ = [
    "ReferenceSpline",
    "QPSetup",
    "RefinedSegment",
    "RefinementError",
    "quintic_reference",
    "refine",
    "refine_rollout",
]


class RefinementError(RuntimeError):
    """Raised when the refinement QP is infeasible or uncertified."""


@dataclass(frozen=True)
class ReferenceSpline:
    """Per-joint quintic polynomials with rest-to-rest boundary conditions."""

    coeffs: np.ndarray  # (n, 6), ascending powers
    t_f: float
    q0: np.ndarray
    qf: np.ndarray

    def sample(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Position, velocity, acceleration at time t; clamped beyond [0, t_f]."""
        if t <= 0.0:
            return self.q0.copy(), np.zeros_like(self.q0), np.zeros_like(self.q0)
        if t >= self.t_f:
            return self.qf.copy(), np.zeros_like(self.qf), np.zeros_like(self.qf)
        powers = np.array([1.0, t, t**2, t**3, t**4, t**5])
        dpowers = np.array([0.0, 1.0, 2 * t, 3 * t**2, 4 * t**3, 5 * t**4])
        ddpowers = np.array([0.0, 0.0, 2.0, 6 * t, 12 * t**2, 20 * t**3])
        return self.coeffs @ powers, self.coeffs @ dpowers, self.coeffs @ ddpowers

    def peak_velocity(self) -> np.ndarray:
        """Closed form: the quintic peaks at 15/8 * |qf - q0| / t_f (midpoint)."""
        return 15.0 / 8.0 * np.abs(self.qf - self.q0) / self.t_f


def quintic_reference(q0, qf, t_f: float) -> ReferenceSpline:
    """Rest-to-rest quintic between two joint poses."""
    if not np.isfinite(t_f) or t_f <= 0.0:
        raise ValueError("t_f must be positive")
    q0 = np.atleast_1d(np.asarray(q0, dtype=float))
    qf = np.atleast_1d(np.asarray(qf, dtype=float))
    if q0.shape != qf.shape:
        raise ValueError("q0 and qf must have the same length")
    dq = qf - q0
    # q(t) = q0 + dq (10 s^3 - 15 s^4 + 6 s^5), s = t / t_f
    coeffs = np.zeros((q0.size, 6))
    coeffs[:, 0] = q0
    coeffs[:, 3] = 10.0 * dq / t_f**3
    coeffs[:, 4] = -15.0 * dq / t_f**4
    coeffs[:, 5] = 6.0 * dq / t_f**5
    return ReferenceSpline(coeffs=coeffs, t_f=float(t_f), q0=q0, qf=qf)


@dataclass
class QPSetup:
    """Per-solve refinement setup (weights, limits, anomaly coupling)."""

    N: int = 20
    dt: float = 0.05
    Q: np.ndarray | float = 1.0
    R: np.ndarray | float = 0.01
    speed_limit: np.ndarray | float = np.radians(30.0)
    accel_limit: np.ndarray | float = np.radians(300.0)
    q_min: np.ndarray | float = -np.pi
    q_max: np.ndarray | float = np.pi
    anomaly_gradient: np.ndarray | float = 0.0  # df/dtau_e, frozen per solve
    Kd: np.ndarray | float = 50.0
    Cd: np.ndarray | float = 30.0
    w: float = 2.0
    score_init: float = 0.0
    t_now: float = 0.0

    def expanded(self, n: int) -> "QPSetup":
        def vec(v):
            arr = np.atleast_1d(np.asarray(v, dtype=float))
            return np.full(n, float(arr[0])) if arr.size == 1 else arr

        out = QPSetup(
            N=int(self.N), dt=float(self.dt),
            Q=vec(self.Q), R=vec(self.R),
            speed_limit=vec(self.speed_limit), accel_limit=vec(self.accel_limit),
            q_min=vec(self.q_min), q_max=vec(self.q_max),
            anomaly_gradient=vec(self.anomaly_gradient),
            Kd=vec(self.Kd), Cd=vec(self.Cd), w=float(self.w),
            score_init=float(self.score_init), t_now=float(self.t_now),
        )
        if out.N < 2:
            raise ValueError("horizon N must be at least 2")
        if out.dt <= 0.0:
            raise ValueError("dt must be positive")
        if np.any(out.Q <= 0.0) or np.any(out.R < 0.0):
            raise ValueError("Q must be positive and R non-negative")
        return out


@dataclass
class RefinedSegment:
    """Refined desired trajectory over one horizon plus the score prediction."""

    t0: float
    dt: float
    q_d: np.ndarray      # (N+1, n)
    qdot_d: np.ndarray   # (N+1, n)
    qddot_d: np.ndarray  # (N, n)
    score_pred: np.ndarray  # (N+1,)
    objective: float
    qp: QPResult = field(repr=False, default=None)

    def sample(self, tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Interpolate at offset tau from t0, consistent with the discrete
        rows q_{i+1} = q_i + dt qdot_i and qdot_{i+1} = qdot_i + dt u_i."""
        tau = min(max(tau, 0.0), self.dt * (self.q_d.shape[0] - 1))
        i = min(int(tau / self.dt), self.qddot_d.shape[0] - 1)
        local = tau - i * self.dt
        u = self.qddot_d[i]
        q = self.q_d[i] + self.qdot_d[i] * local
        qd = self.qdot_d[i] + u * local
        return q, qd, u


def _prediction_matrices(n: int, N: int, dt: float):
    """Affine maps from stacked accelerations U to stacked q and qdot."""
    # qdot_i = qdot_0 + dt * sum_{j<i} u_j ; q_i = q_0 + i dt qdot_0
    #          + dt^2 * sum_{j<=i-2} (i-1-j) u_j
    Lv = np.zeros((N + 1, N))
    Lp = np.zeros((N + 1, N))
    for i in range(1, N + 1):
        Lv[i, :i] = dt
        for j in range(i - 1):
            Lp[i, j] = dt * dt * (i - 1 - j)
    return Lp, Lv


def refine(reference: ReferenceSpline, current_state, setup: QPSetup) -> RefinedSegment:
    """Solve one refinement QP from the current desired state.

    ``current_state`` provides the initial (q, qdot); it may be a
    PlantState-like object or a (q, qdot) pair. Raises RefinementError on
    infeasibility or an uncertified solution — constraints are never
    silently clamped.
    """
    if hasattr(current_state, "q"):
        q0 = np.asarray(current_state.q, dtype=float)
        qd0 = np.asarray(current_state.qdot, dtype=float)
    else:
        q0, qd0 = (np.asarray(v, dtype=float) for v in current_state)
    n = q0.size
    s = setup.expanded(n)
    N, dt = s.N, s.dt

    refs = np.stack([reference.sample(s.t_now + i * dt)[0] for i in range(N + 1)])

    Lp, Lv = _prediction_matrices(n, N, dt)
    # kron expansion over joints: U is (N*n,), samples stacked step-major
    Lp_full = np.kron(Lp, np.eye(n))
    Lv_full = np.kron(Lv, np.eye(n))
    steps = np.arange(N + 1)
    q_base = q0[None, :] + steps[:, None] * dt * qd0[None, :]
    v_base = np.tile(qd0, (N + 1, 1))

    # score chain: s_{i+1} = s_i - w dt g'(Kd qdot_i + Cd u_i)
    g = s.anomaly_gradient
    gKd = g * s.Kd
    gCd = g * s.Cd
    Ls = np.zeros((N + 1, N * n))
    s_base = np.full(N + 1, s.score_init)
    for i in range(1, N + 1):
        Ls[i] = Ls[i - 1] - s.w * dt * (gKd @ Lv_full[(i - 1) * n:i * n, :])
        Ls[i, (i - 1) * n:i * n] += -s.w * dt * gCd
        s_base[i] = s_base[i - 1] - s.w * dt * float(gKd @ v_base[i - 1])

    # objective: sum_i ||q_i - r_i||_Q^2 + ||u_i||_R^2 + s_i^2  (i=0 terms constant)
    Qw = np.tile(s.Q, N + 1)
    Rw = np.tile(s.R, N)
    dev_base = (q_base - refs).reshape(-1)
    H = 2.0 * (
        Lp_full.T @ (Qw[:, None] * Lp_full)
        + np.diag(Rw)
        + Ls.T @ Ls
    )
    f = 2.0 * (Lp_full.T @ (Qw * dev_base) + Ls.T @ s_base)

    # constraints on samples i = 1..N (step 0 is the fixed initial state)
    sel = np.arange(n, (N + 1) * n)
    A_rows = []
    b_rows = []
    vlim = np.tile(s.speed_limit, N)
    A_rows.append(Lv_full[sel])
    b_rows.append(vlim - v_base.reshape(-1)[sel])
    A_rows.append(-Lv_full[sel])
    b_rows.append(vlim + v_base.reshape(-1)[sel])
    qmax = np.tile(s.q_max, N)
    qmin = np.tile(s.q_min, N)
    A_rows.append(Lp_full[sel])
    b_rows.append(qmax - q_base.reshape(-1)[sel])
    A_rows.append(-Lp_full[sel])
    b_rows.append(q_base.reshape(-1)[sel] - qmin)
    A_in = np.vstack(A_rows)
    b_in = np.concatenate(b_rows)
    alim = np.tile(s.accel_limit, N)

    result = qp_solve(H / 2.0, f / 2.0, A_in=A_in, b_in=b_in, lb=-alim, ub=alim)
    if result.status == "infeasible":
        raise RefinementError(
            f"refinement constraints infeasible: N={N}, dt={dt}, "
            f"speed_limit={s.speed_limit}, initial qdot={qd0}"
        )
    if result.status != "optimal":
        raise RefinementError(f"QP solver failed: {result.status} after {result.iterations} iterations")
    if not result.certified:
        raise RefinementError(f"KKT certification failed: {result.residuals}")

    U = result.x.reshape(N, n)
    q_d = q_base + (Lp_full @ result.x).reshape(N + 1, n)
    qdot_d = v_base + (Lv_full @ result.x).reshape(N + 1, n)
    score_pred = s_base + Ls @ result.x

    # contract: refined velocity never exceeds the limit beyond tolerance
    overrun = np.max(np.abs(qdot_d[1:]) - s.speed_limit[None, :])
    if overrun > 1e-9:
        raise RefinementError(f"velocity bound violated by {overrun:.2e}")

    # objective evaluated directly (includes the constant i=0 stage terms)
    track = np.sum(Qw * ((q_d - refs).reshape(-1)) ** 2)
    effort = np.sum(Rw * (U.reshape(-1)) ** 2)
    objective = track + effort + float(score_pred @ score_pred)

    return RefinedSegment(
        t0=s.t_now,
        dt=dt,
        q_d=q_d,
        qdot_d=qdot_d,
        qddot_d=U,
        score_pred=score_pred,
        objective=objective,
        qp=result,
    )


def save_segment_csv(path, segment: RefinedSegment) -> None:
    """Export a refined segment as CSV rows of (t, q_d..., qdot_d...)."""
    import csv

    n = segment.q_d.shape[1]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t"] + [f"q_d{i}" for i in range(n)]
                        + [f"qdot_d{i}" for i in range(n)])
        for i in range(segment.q_d.shape[0]):
            writer.writerow([segment.t0 + i * segment.dt,
                             *segment.q_d[i], *segment.qdot_d[i]])


def refine_rollout(reference: ReferenceSpline, q0, qd0, setup: QPSetup,
                   duration: float, step: float):
    """Receding-horizon rollout of the refinement alone (no plant).

    Re-solves every ``step`` seconds from the previously refined desired
    state and stitches the executed prefix into a dense trajectory.
    Returns (times, q_d, qdot_d, qddot_d) arrays.
    """
    q = np.asarray(q0, dtype=float).copy()
    qd = np.asarray(qd0, dtype=float).copy()
    times, qs, qds, qdds = [], [], [], []
    t = 0.0
    while t < duration:
        seg = refine(reference, (q, qd), QPSetup(**{**setup.__dict__, "t_now": t}))
        q_s, qd_s, u_s = seg.sample(step)
        times.append(t)
        qs.append(q.copy())
        qds.append(qd.copy())
        qdds.append(seg.qddot_d[0].copy())
        q, qd = q_s, qd_s
        t += step
    return np.array(times), np.array(qs), np.array(qds), np.array(qdds)
