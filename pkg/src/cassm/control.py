"""Reduced-order MPC and actuator-side stabilizing feedback.

The MPC tracks a performance output (a subset of decoded observations) with
a sequential convex scheme: the reduced model is linearized along the current
input guess with RK4-consistent sensitivities, the resulting tracking problem
is condensed into a dense box-constrained QP over the held input blocks, and
the step is accepted or the trust region shrinks based on the true nonlinear
cost.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .exceptions import (ActuatorBandwidthError, ConfigurationError, DivergenceError,
                         IntegrationError)
from .pipeline import ConstantVelocityFilter
from .plant import advance, equilibrium, observe, tip_index, PlantState


# ---------------------------------------------------------------------------
# actuator-side feedback
# ---------------------------------------------------------------------------

@dataclass
class FeedbackDesign:
    K: np.ndarray
    H: np.ndarray
    beta: float
    margin: float
    spectrum: np.ndarray
    success: bool

    @property
    def closed_loop(self):
        return self._A_tilde

    def transformed(self):
        """``T A(H) T^-1`` with ``T = [[I, 0], [-K, I]]``."""
        n = self.K.shape[1]
        m = self.K.shape[0]
        T = np.block([[np.eye(n), np.zeros((n, m))], [-self.K, np.eye(m)]])
        Ti = np.block([[np.eye(n), np.zeros((n, m))], [self.K, np.eye(m)]])
        return T @ self._A_tilde @ Ti


def augmented_feedback_matrix(A, A_u, H, Lam):
    return np.block([[A, A_u], [H, Lam]])


def _check_stabilizable(A, B):
    n = A.shape[0]
    for lam in linalg.eigvals(A):
        if lam.real >= 0:
            M = np.hstack([lam * np.eye(n) - A, B.astype(complex)])
            if np.linalg.matrix_rank(M, tol=1e-9 * max(1.0, np.linalg.norm(M))) < n:
                raise ConfigurationError(
                    f"(A, A_u) not stabilizable: uncontrollable unstable mode {lam:.6g}")


def lqr_gain(A, B, Q=None, R=None):
    """State feedback ``K`` (``u = K x``) making ``A + B K`` Hurwitz."""
    n, m = B.shape
    Q = np.eye(n) if Q is None else Q
    R = np.eye(m) if R is None else R
    P = linalg.solve_continuous_are(A, B, Q, R)
    return -linalg.solve(R, B.T @ P)


def design_feedback(A, A_u, Lam, K=None, raise_on_margin=True):
    """Actuator feedback ``H = K A - Lam K + K A_u K`` for an unstable plant ``A``.

    ``K`` defaults to an identity-weighted LQR gain.  The margin check
    ``|K A_u|_2 < beta`` with ``Lam <= -beta I`` is a sufficient condition; on
    failure an :class:`ActuatorBandwidthError` carrying both numbers is raised
    (or the design is returned with ``success=False``).
    """
    A, A_u, Lam = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (A, A_u, Lam))
    if Lam.shape[0] != Lam.shape[1] or A_u.shape != (A.shape[0], Lam.shape[0]):
        raise ConfigurationError("dimension mismatch between A, A_u and Lambda")
    beta = -float(np.max(linalg.eigvalsh(0.5 * (Lam + Lam.T))))
    if beta <= 0:
        raise ConfigurationError("Lambda must satisfy Lambda <= -beta I with beta > 0")
    if K is None:
        _check_stabilizable(A, A_u)
        K = lqr_gain(A, A_u)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    H = K @ A - Lam @ K + K @ A_u @ K
    At = augmented_feedback_matrix(A, A_u, H, Lam)
    spec = linalg.eigvals(At)
    margin = float(np.linalg.norm(K @ A_u, 2))
    ok = margin < beta and bool(np.all(spec.real < 0))
    design = FeedbackDesign(K, H, beta, margin, spec, ok)
    design._A_tilde = At
    if margin >= beta and raise_on_margin:
        raise ActuatorBandwidthError(
            f"actuator bandwidth insufficient: |K A_u|_2 = {margin:.4g} >= beta = {beta:.4g}",
            margin=margin, beta=beta)
    return design


@dataclass
class FilterResponse:
    omega: np.ndarray
    gain: np.ndarray
    dc: np.ndarray

    def monotone_beyond(self, w0):
        g = self.gain[self.omega >= w0]
        return bool(np.all(np.diff(g) <= 1e-15 * max(1.0, g.max() if g.size else 1.0)))


def transfer(H, Lam, s):
    """``K(s) = (s I - Lam)^-1 H``."""
    Lam = np.atleast_2d(Lam)
    return linalg.solve(s * np.eye(len(Lam)) - Lam, np.atleast_2d(H).astype(complex))


def feedback_filter_response(H, Lam, omega):
    """Spectral-norm gain of the actuator feedback filter over ``omega`` (rad/s)."""
    Lam = np.atleast_2d(np.asarray(Lam, dtype=float))
    if np.any(linalg.eigvals(Lam).real >= 0):
        raise ConfigurationError("Lambda must be Hurwitz")
    omega = np.asarray(omega, dtype=float)
    gain = np.array([np.linalg.norm(transfer(H, Lam, 1j * w), 2) for w in omega])
    return FilterResponse(omega, gain, -linalg.solve(Lam, np.atleast_2d(H)))


# ---------------------------------------------------------------------------
# box QP
# ---------------------------------------------------------------------------

@dataclass
class QPResult:
    x: np.ndarray
    iterations: int
    kkt: float
    status: str
    objective: float


def _qp_parts(P, q, soft):
    def value(x):
        v = 0.5 * x @ P @ x + q @ x
        if soft is not None:
            G, e, lo, hi, w = soft
            y = G @ x + e
            v += w * (np.sum(np.maximum(y - hi, 0) ** 2) + np.sum(np.maximum(lo - y, 0) ** 2))
        return v

    def grad(x):
        g = P @ x + q
        if soft is not None:
            G, e, lo, hi, w = soft
            y = G @ x + e
            g = g + 2 * w * G.T @ (np.maximum(y - hi, 0) - np.maximum(lo - y, 0))
        return g

    def hess(x):
        if soft is None:
            return P
        G, e, lo, hi, w = soft
        y = G @ x + e
        act = ((y > hi) | (y < lo)).astype(float)
        return P + 2 * w * G.T @ (act[:, None] * G)

    return value, grad, hess


def kkt_residual(x, g, lo, hi):
    """``|x - proj(x - grad)|_inf``: zero exactly at box-QP optima."""
    return float(np.max(np.abs(x - np.clip(x - g, lo, hi)))) if x.size else 0.0


def _fista(x, value, grad, lo, hi, Lc, n_iter):
    """Accelerated projected gradient with function-value restart."""
    yk, t, fx = x.copy(), 1.0, value(x)
    for it in range(1, n_iter + 1):
        xn = np.clip(yk - grad(yk) / Lc, lo, hi)
        fn = value(xn)
        if fn > fx:
            yk, t = x.copy(), 1.0
            continue
        tn = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        yk = xn + (t - 1) / tn * (xn - x)
        x, fx, t = xn, fn, tn
    return x, max(n_iter, 0)


def _newton_polish(x, value, grad, hess, lo, hi, Lc, tol, max_iter=50):
    """Projected Newton steps on the current free set with backtracking."""
    it = 0
    for it in range(1, max_iter + 1):
        g = grad(x)
        if kkt_residual(x, g, lo, hi) <= 1e-3 * tol:
            break
        free = ~(((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0)))
        if not np.any(free):
            break
        Hf = hess(x)[np.ix_(free, free)]
        d = np.zeros_like(x)
        try:
            d[free] = -linalg.solve(Hf + 1e-14 * np.eye(len(Hf)), g[free], assume_a="sym")
        except linalg.LinAlgError:
            d[free] = -g[free] / Lc
        step, f0 = 1.0, value(x)
        xn = x
        while step > 1e-10:
            xn = np.clip(x + step * d, lo, hi)
            if value(xn) <= f0 + 1e-14 * max(1.0, abs(f0)):
                break
            step *= 0.5
        if np.array_equal(xn, x):
            break
        x = xn
    return x, it


def solve_box_qp(P, q, lo, hi, x0=None, tol=1e-6, max_iter=5000, soft=None):
    """Minimize ``0.5 x'Px + q'x`` (+ smooth soft-output penalty) over a box.

    Accelerated projected gradient with adaptive restart identifies the
    active set; a projected Newton polish then drives the KKT residual to
    ``tol``.  ``soft = (G, e, y_lo, y_hi, weight)`` adds
    ``weight * |hinge(G x + e)|^2``.
    """
    P = 0.5 * (P + P.T)
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise ConfigurationError("empty box")
    value, grad, hess = _qp_parts(P, q, soft)
    x = np.clip(np.zeros_like(q) if x0 is None else np.asarray(x0, dtype=float), lo, hi)
    Lc = float(np.max(linalg.eigvalsh(P))) if P.size else 1.0
    if soft is not None:
        Lc += 2 * soft[4] * float(np.linalg.norm(soft[0], 2) ** 2)
    Lc = max(Lc, 1e-12)
    total = 0
    while True:
        x, n_fista = _fista(x, value, grad, lo, hi, Lc, min(50, max_iter - total))
        x, n_newton = _newton_polish(x, value, grad, hess, lo, hi, Lc, tol)
        total += n_fista + n_newton
        if kkt_residual(x, grad(x), lo, hi) <= tol or total >= max_iter:
            break
    r = kkt_residual(x, grad(x), lo, hi)
    return QPResult(x, total, r, "optimal" if r <= tol else "max-iter", float(value(x)))


# ---------------------------------------------------------------------------
# MPC
# ---------------------------------------------------------------------------

@dataclass
class MpcConfig:
    """Weights act on performance outputs in ``perf_scale`` units (default cm)."""

    horizon: int = 10
    dt: float = 0.02
    actuation_period: float = 0.04
    Q: tuple = (7.0, 7.0, 0.0)
    Q_f: tuple = (20.0, 20.0, 0.0)
    R_delta: tuple = (0.16, 0.16)
    u_min: float = -1.0
    u_max: float = 1.0
    y_min: tuple | None = None
    y_max: tuple | None = None
    perf_rows: tuple | None = None
    perf_scale: float = 100.0
    scp_iters: int = 3
    scp_step_tol: float = 1e-3
    qp_tol: float = 1e-6
    qp_max_iter: int = 5000
    trust_region: float = 0.2
    substeps: int = 1

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        ratio = self.actuation_period / self.dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigurationError("actuation period must be an integer multiple of dt")
        if len(self.Q) != len(self.Q_f):
            raise ConfigurationError("Q and Q_f sizes differ")
        if min(self.Q) < 0 or min(self.Q_f) < 0 or min(self.R_delta) < 0:
            raise ConfigurationError("weights must be non-negative")
        if self.scp_step_tol < 0:
            raise ConfigurationError("scp_step_tol must be non-negative")
        if self.u_min >= self.u_max:
            raise ConfigurationError("u_min must be below u_max")

    @property
    def hold(self):
        return int(round(self.actuation_period / self.dt))

    @property
    def n_blocks(self):
        return -(-self.horizon // self.hold)

    def rows(self, o):
        return np.arange(o - len(self.Q), o) if self.perf_rows is None else np.asarray(self.perf_rows)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**d)


@dataclass
class MpcSolution:
    u: np.ndarray            # (n_blocks, m)
    z: np.ndarray            # (N + 1, n) predicted
    y_perf: np.ndarray       # (N + 1, p)
    cost: float
    solve_ms: float
    qp_iterations: int
    scp_iterations: int
    kkt: float
    status: str
    costs: list = field(default_factory=list)


def linearize_reduced(model, z0, U_steps, dt, u_hist=None, substeps=1):
    """Nominal rollout plus per-step affine models along it.

    ``U_steps`` holds one command per model step, ``(N, m)``.  Returns
    ``(Z, A_list, B_list, c_list)`` where ``z_{k+1} = A_k z_k + sum_l B_k[l] u_{k-l} + c_k``
    reproduces the nominal rollout exactly at the nominal inputs.
    """
    W = model.command_windows(U_steps, u_hist)
    Z = [np.asarray(z0, dtype=float)]
    As, Bs, cs = [], [], []
    for Uk in W:
        zn, A, B = model.step_jacobians(Z[-1], Uk, dt, substeps)
        if not np.all(np.isfinite(zn)) or np.linalg.norm(zn) > 1e3 * getattr(model, "z_max", np.inf):
            raise DivergenceError("nominal rollout diverged", step=len(Z))
        c = zn - A @ Z[-1] - sum(Bl @ ul for Bl, ul in zip(B, Uk))
        Z.append(zn)
        As.append(A)
        Bs.append(B)
        cs.append(c)
    return np.array(Z), As, Bs, cs


def _block_of(k, hold):
    return k // hold


def condense(model, z0, U_blocks, cfg, u_hist=None):
    """Affine maps ``y_perf_k = M_k U + a_k`` (``k = 0..N``) around ``U_blocks``."""
    N, hold = cfg.horizon, cfg.hold
    nb, m = U_blocks.shape
    steps = np.repeat(U_blocks, hold, axis=0)[:N]
    Z, As, Bs, _ = linearize_reduced(model, z0, steps, cfg.dt, u_hist, cfg.substeps)
    rows = cfg.rows(model.o)
    sc = cfg.perf_scale
    nU = nb * m
    G = np.zeros((model.n, nU))
    M, Y = [], []
    for k in range(N + 1):
        y, Cd = model.decode_and_jacobian(Z[k])
        y, Cd = y[rows] * sc, Cd[rows] * sc
        M.append(Cd @ G)
        Y.append(y)
        if k == N:
            break
        Gn = As[k] @ G
        for l, Bl in enumerate(Bs[k]):
            j = k - l
            if j >= 0:
                b = _block_of(j, hold)
                Gn[:, b * m:(b + 1) * m] += Bl
        G = Gn
    M = np.array(M)
    Ub = U_blocks.ravel()
    a = np.array(Y) - np.einsum("kpu,u->kp", M, Ub)
    return Z, np.array(Y), M, a


def _tracking_qp(M, a, ref, cfg, u_prev, m):
    """Quadratic ``0.5 U'PU + q'U`` of the condensed tracking cost (+ constant)."""
    N = cfg.horizon
    nU = M.shape[2]
    nb = nU // m
    Q, Qf = np.asarray(cfg.Q, dtype=float), np.asarray(cfg.Q_f, dtype=float)
    P = np.zeros((nU, nU))
    q = np.zeros(nU)
    const = 0.0
    for k in range(1, N + 1):
        w = Qf if k == N else Q
        e = a[k] - ref[k]
        P += 2 * M[k].T @ (w[:, None] * M[k])
        q += 2 * M[k].T @ (w * e)
        const += e @ (w * e)
    R = np.asarray(cfg.R_delta, dtype=float)
    D = np.eye(nU) - np.eye(nU, k=-m)
    d = np.zeros(nU)
    d[:m] = u_prev
    Rw = np.tile(R, nb)
    P += 2 * D.T @ (Rw[:, None] * D)
    q += -2 * D.T @ (Rw * d)
    const += d @ (Rw * d)
    return P, q, const


def tracking_cost(Yperf, ref, U_blocks, u_prev, cfg):
    N = cfg.horizon
    Q, Qf, R = (np.asarray(v, dtype=float) for v in (cfg.Q, cfg.Q_f, cfg.R_delta))
    c = sum(((Yperf[k] - ref[k]) ** 2) @ (Qf if k == N else Q) for k in range(1, N + 1))
    dU = np.diff(np.vstack([u_prev, U_blocks]), axis=0)
    return float(c + np.sum(dU ** 2 * R))


def solve_tracking_qp(model, z0, ref, cfg, u_prev, U_guess=None, u_hist=None, radius=None,
                      condensed=None):
    """One convexified subproblem: condense around ``U_guess`` and solve the box QP.

    ``condensed`` may carry a prior ``condense`` result at ``U_guess`` to skip relinearizing.
    """
    m = model.m
    nb = cfg.n_blocks
    U_guess = np.tile(u_prev, (nb, 1)) if U_guess is None else np.asarray(U_guess, dtype=float)
    if condensed is None:
        condensed = condense(model, z0, U_guess, cfg, u_hist)
    Z, Y, M, a = condensed
    P, q, _ = _tracking_qp(M, a, ref, cfg, u_prev, m)
    lo = np.full(nb * m, cfg.u_min)
    hi = np.full(nb * m, cfg.u_max)
    if radius is not None:
        lo = np.maximum(lo, U_guess.ravel() - radius)
        hi = np.minimum(hi, U_guess.ravel() + radius)
    soft = None
    if cfg.y_min is not None or cfg.y_max is not None:
        p = M.shape[1]
        ylo = np.tile(np.full(p, -np.inf) if cfg.y_min is None else np.asarray(cfg.y_min) * cfg.perf_scale, cfg.horizon)
        yhi = np.tile(np.full(p, np.inf) if cfg.y_max is None else np.asarray(cfg.y_max) * cfg.perf_scale, cfg.horizon)
        G = M[1:].reshape(-1, M.shape[2])
        soft = (G, a[1:].ravel(), ylo, yhi, 1e3 * max(max(cfg.Q), max(cfg.Q_f)))
    res = solve_box_qp(P, q, lo, hi, U_guess.ravel(), cfg.qp_tol, cfg.qp_max_iter, soft)
    return res, Z, Y


class MpcController:
    """Receding-horizon SCP controller with warm starts.

    ``step`` takes measured histories (newest first), the reference window
    ``(N + 1, p)`` in metres and returns the command for the next actuation
    period together with the :class:`MpcSolution`.
    """

    def __init__(self, model, config=None):
        self.model = model
        self.config = config or MpcConfig()
        if model.continuous is False and getattr(model, "dt", self.config.dt) != self.config.dt:
            raise ConfigurationError("discrete model dt differs from MPC dt")
        self.reset()

    def reset(self, u0=None):
        m = self.model.m
        self.u_prev = np.zeros(m) if u0 is None else np.asarray(u0, dtype=float)
        self.U_warm = None
        self.cmd_hist = np.tile(self.u_prev, (max(self.model.n_input_lags - 1, 1), 1))
        self.kkt_log = []

    def _rollout_perf(self, z0, U_blocks):
        cfg = self.config
        steps = np.repeat(U_blocks, cfg.hold, axis=0)[:cfg.horizon]
        W = self.model.command_windows(steps, self.cmd_hist)
        Z = self.model.rollout(z0, W, cfg.dt, cfg.substeps) if self.model.continuous \
            else self.model.rollout(z0, W, cfg.dt)
        rows = cfg.rows(self.model.o)
        return Z, np.array([self.model.decode(z)[rows] for z in Z]) * cfg.perf_scale

    def step(self, Y_hist, U_hist, y_ref, warm=True):
        cfg = self.config
        t0 = time.perf_counter()
        ref = np.asarray(y_ref, dtype=float) * cfg.perf_scale
        if ref.shape[0] != cfg.horizon + 1:
            raise ConfigurationError(f"reference window must have {cfg.horizon + 1} rows")
        z0 = self.model.encode_history(Y_hist, U_hist)
        nb, m = cfg.n_blocks, self.model.m
        if warm and self.U_warm is not None:
            U = np.vstack([self.U_warm[1:], self.U_warm[-1:]])
        else:
            U = np.tile(self.u_prev, (nb, 1))
        radius = cfg.trust_region * (cfg.u_max - cfg.u_min)
        try:
            lin = condense(self.model, z0, U, cfg, self.cmd_hist)
        except DivergenceError:
            warnings.warn("MPC nominal rollout diverged; holding previous input", RuntimeWarning,
                          stacklevel=2)
            return self._fallback(t0)
        Z, Yp = lin[0], lin[1]
        J = tracking_cost(Yp, ref, U, self.u_prev, cfg)
        costs, qp_its, kkt, scp = [J], 0, 0.0, 0
        for scp in range(1, cfg.scp_iters + 1):
            res, _, _ = solve_tracking_qp(self.model, z0, ref, cfg, self.u_prev, U,
                                          self.cmd_hist, radius, condensed=lin)
            qp_its += res.iterations
            kkt = max(kkt, res.kkt)
            self.kkt_log.append(res.kkt)
            Un = res.x.reshape(nb, m)
            step_size = float(np.max(np.abs(Un - U)))
            last = step_size < cfg.scp_step_tol or scp == cfg.scp_iters
            # the linearization at an accepted iterate seeds the next subproblem
            try:
                if last:
                    lin_n = self._rollout_perf(z0, Un) + (None, None)
                else:
                    lin_n = condense(self.model, z0, Un, cfg, self.cmd_hist)
                Jn = tracking_cost(lin_n[1], ref, Un, self.u_prev, cfg)
            except DivergenceError:
                Jn = np.inf
            if Jn <= J:
                U, lin, J = Un, lin_n, Jn
                Z, Yp = lin[0], lin[1]
                radius = min(2 * radius, cfg.u_max - cfg.u_min)
            else:
                radius *= 0.5
            costs.append(J)
            if last:
                break
        self.U_warm = U
        u = U[0].copy()
        self._commit(u)
        return u, MpcSolution(U, Z, Yp / cfg.perf_scale, J, 1e3 * (time.perf_counter() - t0),
                              qp_its, scp, kkt, "optimal" if kkt <= cfg.qp_tol else "max-iter",
                              costs)

    def _commit(self, u):
        hold = self.config.hold
        if self.model.n_input_lags > 1:
            self.cmd_hist = np.vstack([np.tile(u, (hold, 1)), self.cmd_hist])[
                :self.model.n_input_lags - 1]
        self.u_prev = u

    def _fallback(self, t0):
        u = self.u_prev.copy()
        nb = self.config.n_blocks
        self._commit(u)
        return u, MpcSolution(np.tile(u, (nb, 1)), np.zeros((0, self.model.n)), np.zeros((0, 0)),
                              np.inf, 1e3 * (time.perf_counter() - t0), 0, 0, 0.0, "infeasible")


# ---------------------------------------------------------------------------
# closed loop on the plant
# ---------------------------------------------------------------------------

@dataclass
class ClosedLoopResult:
    t: np.ndarray
    y: np.ndarray
    y_true_tip: np.ndarray
    y_ref: np.ndarray
    u: np.ndarray
    u_ref: np.ndarray
    solve_ms: np.ndarray
    scp_iters: np.ndarray
    kkt: np.ndarray
    rmse: float
    diverged: bool
    transient: float

    @property
    def rmse_mm(self):
        return 1e3 * self.rmse

    def summary(self):
        return {"rmse_mm": None if self.diverged else self.rmse_mm, "diverged": self.diverged,
                "mean_solve_ms": float(np.mean(self.solve_ms)) if len(self.solve_ms) else 0.0,
                "max_solve_ms": float(np.max(self.solve_ms)) if len(self.solve_ms) else 0.0,
                "max_kkt": float(np.max(self.kkt)) if len(self.kkt) else 0.0,
                "transient_s": self.transient}

    def log_table(self):
        """Rows ``t, y, yref, u, uref, solve_ms, scp_iters`` at the model rate."""
        return np.column_stack([self.t, self.y, self.y_ref, self.u, self.u_ref,
                                self.solve_ms_per_step, self.scp_per_step])


def closed_loop_run(cfg, model, mpc_config, y_ref, noise_std=0.0, seed=0, transient=1.0,
                    divergence_radius=1.0, filter_q=None):
    """Simulate the plant under MPC tracking ``y_ref`` (``(T, p)`` at the model rate).

    Commands are zero-order held over each actuation period; observations are
    taken (noisy) at every model step and, when ``filter_q`` is set, passed
    through a causal constant-velocity Kalman filter before reaching the
    controller.  RMSE is computed on the true tip position in the horizontal
    plane, after ``transient`` seconds.
    """
    mc = mpc_config
    dt, hold, N = mc.dt, mc.hold, mc.horizon
    y_ref = np.atleast_2d(np.asarray(y_ref, dtype=float))
    T = len(y_ref)
    rng = np.random.default_rng(seed)
    ctrl = MpcController(model, mc)
    state = equilibrium(cfg)
    ti = tip_index(cfg)
    Ys, Us, Urefs, tip, t_log = [], [], [], [], []
    solve, iters, kkts = [], [], []
    solve_step, iter_step = np.zeros(T), np.zeros(T, dtype=int)
    L = model.L
    pad = lambda A: np.vstack([A] + [A[-1:]] * max(0, L - len(A)))  # noqa: E731
    u_cmd = np.zeros(cfg.m_inputs)
    diverged = False
    eq_tip = observe(state, u_cmd, cfg).y[ti]
    filt = None
    if filter_q is not None and noise_std > 0:
        filt = ConstantVelocityFilter(dt, filter_q, noise_std ** 2)
    for k in range(T):
        obs = observe(state, u_cmd, cfg, noise_std, rng)
        Ys.append(obs.y if filt is None else filt.update(obs.y))
        Us.append(obs.u)
        tip.append(observe(state, u_cmd, cfg).y[ti])
        t_log.append(k * dt)
        if k % hold == 0:
            window = y_ref[np.minimum(np.arange(k, k + N + 1), T - 1)]
            Yh = pad(np.array(Ys[::-1][:L]))
            Uh = pad(np.array(Us[::-1][:L]))
            u_cmd, sol = ctrl.step(Yh, Uh, window)
            solve.append(sol.solve_ms)
            iters.append(sol.scp_iterations)
            kkts.append(sol.kkt)
            solve_step[k], iter_step[k] = sol.solve_ms, sol.scp_iterations
        Urefs.append(u_cmd.copy())
        try:
            xn = advance(state.to_vector(), u_cmd, dt, cfg, k * dt)
        except IntegrationError:
            diverged = True
            break
        state = PlantState.from_vector(xn, cfg, (k + 1) * dt)
        if np.linalg.norm(observe(state, u_cmd, cfg).y[ti] - eq_tip) > divergence_radius:
            diverged = True
            break
    n = len(Ys)
    tip = np.array(tip)
    start = int(round(transient / dt))
    err = tip[start:n, :2] - y_ref[start:n, :2]
    rmse = float(np.sqrt(np.mean(np.sum(err ** 2, axis=1)))) if len(err) else np.nan
    res = ClosedLoopResult(np.array(t_log), np.array(Ys), tip, y_ref[:n], np.array(Us),
                           np.array(Urefs), np.array(solve), np.array(iters), np.array(kkts),
                           np.nan if diverged else rmse, diverged, transient)
    res.solve_ms_per_step = solve_step[:n]
    res.scp_per_step = iter_step[:n]
    return res
