"""Shared machinery for reduced-order models.

A reduced model maps an embedded observation to reduced coordinates ``z``,
advances ``z`` under commanded inputs and decodes observed positions.  The
input enters affinely: ``dz/dt = drift(z) + sum_l B_l u_ref(t - l dt) + c`` for
continuous models, ``z+ = A z + B u_ref`` for discrete ones.  Commands are
passed as arrays of shape ``(n_input_lags, m)``, newest first, in physical
units.
"""
from __future__ import annotations

import warnings

import numpy as np
from scipy import linalg

from .exceptions import DivergenceError


def ridge_solve(F, Y, lam, name="regression"):
    """Coefficients ``C`` minimizing ``|Y - F C|^2 + lam * N * |C|^2``.

    Solved through an augmented least-squares problem (no explicit normal
    equations); warns when the regularized Gram matrix is badly conditioned.
    """
    F = np.atleast_2d(F)
    N, p = F.shape
    s = linalg.svdvals(F) if min(N, p) else np.zeros(1)
    reg = lam * max(N, 1)
    smax = s[0] ** 2 + reg if len(s) else reg
    smin = (s[-1] ** 2 if len(s) == p else 0.0) + reg
    if smin <= 0 or smax / max(smin, 1e-300) > 1e12:
        warnings.warn(f"{name}: condition number {smax / max(smin, 1e-300):.3g} > 1e12",
                      RuntimeWarning, stacklevel=2)
    if reg > 0:
        Fa = np.vstack([F, np.sqrt(reg) * np.eye(p)])
        Ya = np.vstack([Y, np.zeros((p, Y.shape[1]))])
    else:
        Fa, Ya = F, Y
    C, *_ = linalg.lstsq(Fa, Ya, lapack_driver="gelsy")
    return C


class ReducedModel:
    """Interface + generic integration for the reduced models."""

    continuous = True
    kind = "reduced"
    uses_actuator_state = True

    # -- to be provided by subclasses ---------------------------------------
    def embed(self, Y, U):
        """Raw embedded vector from ``Y (L, o)`` and ``U (L, m)``, newest first."""
        raise NotImplementedError

    def encode(self, xe):
        raise NotImplementedError

    def decode(self, z):
        raise NotImplementedError

    def decode_jacobian(self, z):
        raise NotImplementedError

    def decode_and_jacobian(self, z):
        return self.decode(z), self.decode_jacobian(z)

    @property
    def n_input_lags(self):
        return 1

    # continuous models
    def drift(self, z):
        raise NotImplementedError

    def drift_jacobian(self, z):
        raise NotImplementedError

    def drift_and_jacobian(self, z):
        return self.drift(z), self.drift_jacobian(z)

    def input_matrices(self):
        """``(list of B_l, constant offset c)`` in physical command units."""
        raise NotImplementedError

    # -- generic -------------------------------------------------------------
    def derivative(self, z, U):
        Bs, c = self.input_matrices()
        out = self.drift(z) + c
        for Bl, ul in zip(Bs, np.atleast_2d(U)):
            out = out + Bl @ ul
        return out

    def stable_substeps(self, dt):
        """RK4 substeps keeping ``h * rho(J0)`` inside the stability region.

        The real-axis limit is about 2.79; 2.5 leaves margin for oscillatory
        modes.  Models with fast identified modes (actuators faster than the
        command rate) would otherwise blow up at the benchmark step.
        """
        rho = getattr(self, "_rho", None)
        if rho is None:
            J0 = getattr(self, "J0", None)
            rho = float(np.max(np.abs(linalg.eigvals(J0)))) if J0 is not None else 0.0
            self._rho = rho
        return max(1, int(np.ceil(dt * rho / 2.5)))

    def _drive(self, U):
        Bs, c = self.input_matrices()
        return c + sum(Bl @ ul for Bl, ul in zip(Bs, np.atleast_2d(U))), Bs

    def step(self, z, U, dt, substeps=1):
        substeps = max(substeps, self.stable_substeps(dt))
        h = dt / substeps
        drive, _ = self._drive(U)
        f = lambda s: self.drift(s) + drive  # noqa: E731
        for _ in range(substeps):
            k1 = f(z)
            k2 = f(z + 0.5 * h * k1)
            k3 = f(z + 0.5 * h * k2)
            k4 = f(z + h * k3)
            z = z + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return z

    def _rk4_sensitivity(self, z, drive, h):
        I = np.eye(len(z))
        f1, J1 = self.drift_and_jacobian(z)
        k1 = f1 + drive
        f2, J2 = self.drift_and_jacobian(z + 0.5 * h * k1)
        k2 = f2 + drive
        f3, J3 = self.drift_and_jacobian(z + 0.5 * h * k2)
        k3 = f3 + drive
        f4, J4 = self.drift_and_jacobian(z + h * k3)
        k4 = f4 + drive
        z_next = z + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        D2 = J2 @ (I + 0.5 * h * J1)
        D3 = J3 @ (I + 0.5 * h * D2)
        D4 = J4 @ (I + h * D3)
        A = I + h / 6.0 * (J1 + 2 * D2 + 2 * D3 + D4)
        # sensitivity to a constant drive
        M2 = I + 0.5 * h * J2
        M3 = I + 0.5 * h * J3 @ M2
        M4 = I + h * J4 @ M3
        S = h / 6.0 * (I + 2 * M2 + 2 * M3 + M4)
        return z_next, A, S

    def step_jacobians(self, z, U, dt, substeps=1):
        """One (sub-stepped) RK4 step plus exact derivatives w.r.t. ``z`` and each command lag."""
        n_sub = max(substeps, self.stable_substeps(dt))
        drive, Bs = self._drive(U)
        A = np.eye(len(z))
        S = np.zeros_like(A)
        for _ in range(n_sub):
            z, A_k, S_k = self._rk4_sensitivity(z, drive, dt / n_sub)
            A = A_k @ A
            S = A_k @ S + S_k
        return z, A, [S @ Bl for Bl in Bs]

    def rollout(self, z0, U_seq, dt, substeps=1):
        """Advance ``z0`` through ``U_seq`` of shape ``(steps, n_input_lags, m)``."""
        Z = [np.asarray(z0, dtype=float)]
        z = Z[0]
        for k, U in enumerate(U_seq):
            z = self.step(z, U, dt, substeps) if self.continuous else self.step(z, U, dt)
            if not np.all(np.isfinite(z)) or np.linalg.norm(z) > 1e3 * getattr(self, "z_max", np.inf):
                raise DivergenceError(f"{self.kind} rollout diverged at step {k + 1}", step=k + 1)
            Z.append(z)
        return np.array(Z)

    def command_windows(self, u_seq, u_hist=None):
        """Per-step command buffers ``(steps, n_input_lags, m)`` from a sequence.

        ``u_hist`` holds earlier commands, newest first; missing history repeats
        the first command.
        """
        u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
        nl = self.n_input_lags
        if nl == 1:
            return u_seq[:, None, :]
        hist = np.zeros((0, u_seq.shape[1])) if u_hist is None else np.atleast_2d(u_hist)[:nl - 1]
        if len(hist) < nl - 1:
            pad = np.repeat(u_seq[:1] if len(hist) == 0 else hist[-1:], nl - 1 - len(hist), axis=0)
            hist = np.vstack([hist, pad])
        full = np.vstack([hist[::-1], u_seq])
        return np.stack([full[nl - 1 + k - np.arange(nl)] for k in range(len(u_seq))])

    def encode_history(self, Y_hist, U_hist=None):
        """Reduced state from measured histories (newest first, ``L`` rows)."""
        return self.encode(self.embed(Y_hist, U_hist))

    def predict_from_history(self, Y_hist, U_hist, u_seq, dt, u_hist=None, substeps=1):
        """Like :meth:`predict_open_loop` but starting from raw histories."""
        z0 = self.encode_history(Y_hist, U_hist)
        Z = self.rollout(z0, self.command_windows(u_seq, u_hist), dt, substeps)
        return np.array([self.decode(z) for z in Z])

    def predict_open_loop(self, xe0, u_seq, dt, steps=None, u_hist=None, substeps=1):
        """Decoded observation sequence ``(steps + 1, o)`` starting from ``xe0``."""
        u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
        steps = len(u_seq) if steps is None else steps
        z0 = self.encode(xe0)
        Z = self.rollout(z0, self.command_windows(u_seq[:steps], u_hist), dt, substeps)
        return np.array([self.decode(z) for z in Z])


def rk4_error_order(f, x0, T, dts):
    """Global error of RK4 against a fine reference for each step in ``dts``."""
    def run(dt):
        n = int(round(T / dt))
        x = np.asarray(x0, dtype=float)
        for _ in range(n):
            k1 = f(x)
            k2 = f(x + 0.5 * dt * k1)
            k3 = f(x + 0.5 * dt * k2)
            k4 = f(x + dt * k3)
            x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        return x
    ref = run(min(dts) / 16)
    return np.array([np.linalg.norm(run(dt) - ref) for dt in dts])
