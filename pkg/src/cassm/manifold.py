"""Control-augmented spectral submanifold models.

The manifold lives in the normalized, delay-embedded observed space of
``[y; u]`` samples.  The chart is a fixed orthonormal projection
``z = V^T x`` and the parameterization ``x = V z + W_nl phi_w(z)`` has
``V^T W_nl = 0``, so ``encode(decode(z)) == z``.  Reduced dynamics
``dz/dt = R0 z + Theta phi_r(z) + r_ref`` are fitted on unforced decays; the
actuator matrix is then read off the fitted origin Jacobian and reused to map
commanded inputs into reduced coordinates.

Feature maps are anchored, ``phi(z) - phi(0)``, so the origin stays a fixed
point of the reduced dynamics and decodes to the rest state.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .base import ReducedModel, ridge_solve
from .exceptions import ConfigurationError, RankError
from .features import feature_map_from_dict, make_feature_map
from .pipeline import Normalizer, build_dataset

FORMAT = "cassm-model/1"
OVERLAP_CLASSES = ("separated-fast", "overlapping", "actuator-slower")


# ---------------------------------------------------------------------------
# identification steps
# ---------------------------------------------------------------------------

def fit_subspace(X, n):
    """Top-``n`` principal directions of equilibrium-centred data.

    Returns ``(V, explained_variance_ratio)``; the ratio vector covers all
    directions, so nested choices of ``n`` can be compared.  Column signs are
    fixed (largest entry positive) to make the result deterministic.
    """
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    if not 1 <= n <= p:
        raise ConfigurationError(f"n = {n} must lie in [1, {p}]")
    _, s, Vt = linalg.svd(X, full_matrices=False)
    tol = (s[0] if len(s) else 0.0) * max(X.shape) * np.finfo(float).eps
    rank = int(np.sum(s > tol))
    if n > rank:
        raise RankError(f"n = {n} exceeds numerical rank {rank}; singular values: "
                        + ", ".join(f"{v:.3e}" for v in s))
    V = Vt[:n].T.copy()
    idx = np.argmax(np.abs(V), axis=0)
    V *= np.sign(V[idx, np.arange(n)])
    var = s ** 2
    return V, var / var.sum()


def _anchored(fmap, Z):
    return fmap.transform(np.atleast_2d(Z)) - fmap.transform(np.zeros((1, fmap.n_features_in_)))


def fit_parameterization(X, V, feature_map, ridge=1e-6):
    """Nonlinear decoder coefficients ``W_nl`` with ``V^T W_nl = 0``.

    ``feature_map`` is fitted on the reduced coordinates here (a no-op for
    polynomials beyond recording dimensions).  Returns ``(W_nl, feature_map)``.
    """
    X = np.asarray(X, dtype=float)
    Z = X @ V
    feature_map.fit(Z)
    F = _anchored(feature_map, Z)
    resid = X - Z @ V.T
    W = ridge_solve(F, resid, ridge, "parameterization").T
    W = W - V @ (V.T @ W)
    return W, feature_map


def fit_reduced_dynamics(Z, Zdot, feature_map, ridge=1e-6):
    """Joint ridge fit of ``dz/dt = R0 z + Theta phi(z)``.

    Returns ``(R0, Theta, J0, feature_map)`` with ``J0 = R0 + Theta Dphi(0)``.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Zdot = np.atleast_2d(np.asarray(Zdot, dtype=float))
    n = Z.shape[1]
    feature_map.fit(Z)
    F = np.hstack([Z, _anchored(feature_map, Z)])
    C = ridge_solve(F, Zdot, ridge, "reduced dynamics").T
    R0, Theta = C[:, :n], C[:, n:]
    J0 = R0 + Theta @ feature_map.jacobian(np.zeros(n))
    ev = linalg.eigvals(J0)
    if np.any(ev.real > 0):
        warnings.warn(f"fitted reduced dynamics unstable at the origin; spectrum {np.round(ev, 4)}",
                      RuntimeWarning, stacklevel=2)
    return R0, Theta, J0, feature_map


def actuator_rows(o, m, L, lags="lag0"):
    if lags == "lag0":
        return [np.arange(o, o + m)]
    if lags == "all":
        return [np.arange(k * (o + m) + o, (k + 1) * (o + m)) for k in range(L)]
    raise ConfigurationError(f"unknown lambda_lags {lags!r}")


def identify_lambda(V, J0, o, m, L, lags="lag0"):
    """``Lambda = (E_u V J0)(E_u V)^+`` from the actuator rows of the chart."""
    blocks = actuator_rows(o, m, L, lags)
    Vu = np.hstack([V[r] for r in blocks])
    VuJ = np.hstack([V[r] @ J0 for r in blocks])
    sv = linalg.svdvals(V[blocks[0]])
    if np.sum(sv > 1e-10 * max(1.0, sv[0] if len(sv) else 1.0)) < m:
        raise RankError(f"actuator rows of V have rank < {m} (singular values {sv}); "
                        "increase n or excite the actuators more richly")
    return VuJ @ linalg.pinv(Vu)


def classify_overlap(actuator_eigs, system_eigs):
    """Compare actuator and retained system time scales."""
    a = np.asarray(actuator_eigs).real
    s = np.asarray(system_eigs).real
    if np.min(np.abs(a)) > 3.0 * np.max(np.abs(s)):
        return "separated-fast"
    if np.max(a) > np.max(s):
        return "actuator-slower"
    return "overlapping"


@dataclass
class SpectralReport:
    reduced_eigs: np.ndarray
    actuator_eigs: np.ndarray
    system_eigs: np.ndarray
    plant_eigs: np.ndarray | None
    classification: str

    def to_dict(self):
        c = lambda v: None if v is None else [[float(x.real), float(x.imag)] for x in v]  # noqa: E731
        return {"reduced_eigs": c(self.reduced_eigs), "actuator_eigs": c(self.actuator_eigs),
                "system_eigs": c(self.system_eigs), "plant_eigs": c(self.plant_eigs),
                "classification": self.classification}


def _slowest(eigs, k):
    eigs = np.asarray(eigs)
    order = np.argsort(-eigs.real, kind="stable")
    return eigs[order[:max(k, 1)]]


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ManifoldModel(ReducedModel):
    """Fitted control-augmented manifold model (immutable after fitting)."""

    V: np.ndarray
    W_nl: np.ndarray
    w_map: object
    R0: np.ndarray
    Theta: np.ndarray
    r_map: object
    Lam: np.ndarray
    J0: np.ndarray
    o: int
    m: int
    L: int
    normalizer: Normalizer
    ref_mode: str = "approx"
    lambda_lags: str = "lag0"
    z_max: float = np.inf
    explained_variance: np.ndarray = field(default_factory=lambda: np.zeros(0))

    kind = "cassm"
    continuous = True

    def __post_init__(self):
        if self.ref_mode not in ("exact", "approx"):
            raise ConfigurationError(f"ref_mode must be 'exact' or 'approx', got {self.ref_mode!r}")
        p = self.L * (self.o + self.m)
        if self.V.shape[0] != p or self.W_nl.shape[0] != p:
            raise ConfigurationError(f"embedded dimension mismatch: expected {p} rows")
        if self.Lam.shape != (self.m, self.m):
            raise ConfigurationError("Lambda must be m x m")
        n = self.n
        self._phi0_w = self.w_map.transform(np.zeros((1, n)))[0]
        self._phi0_r = self.r_map.transform(np.zeros((1, n)))[0]
        self._y0 = np.arange(self.o)
        sc = self.normalizer.scale
        self._u_scale = [sc[r] for r in actuator_rows(self.o, self.m, self.L, "all")]
        self._u_center = [self.normalizer.center[r]
                          for r in actuator_rows(self.o, self.m, self.L, "all")]
        self._build_inputs()

    @property
    def n(self):
        return self.V.shape[1]

    @property
    def n_input_lags(self):
        return self.L if self.ref_mode == "exact" else 1

    @property
    def Lam_normalized(self):
        s = self._u_scale[0]
        return self.Lam * s[None, :] / s[:, None]

    def with_ref_mode(self, mode):
        d = dict(self.__dict__)
        d = {k: v for k, v in d.items() if not k.startswith("_")}
        d["ref_mode"] = mode
        return ManifoldModel(**d)

    def _build_inputs(self):
        # r_ref = sum_l V_l^T (-Lam_n) S_l^{-1} (u_l - c_l), V_l = actuator rows of lag l
        Ln = self.Lam_normalized
        Bs, c = [], np.zeros(self.n)
        for r, s, cu in zip(actuator_rows(self.o, self.m, self.L, "all"),
                            self._u_scale, self._u_center):
            B = -self.V[r].T @ Ln / s[None, :]
            Bs.append(B)
            c -= B @ cu
        self._B_lags = Bs
        self._c = c
        self._B_approx = [sum(Bs)]

    # -- ReducedModel interface --------------------------------------------
    def input_matrices(self):
        return (self._B_lags if self.ref_mode == "exact" else self._B_approx), self._c

    def embed(self, Y, U):
        Y, U = np.atleast_2d(Y), np.atleast_2d(U)
        if len(Y) < self.L or len(U) < self.L:
            raise ConfigurationError(f"need {self.L} samples of history")
        return np.concatenate([np.r_[Y[k], U[k]] for k in range(self.L)])

    def encode(self, xe):
        return self.normalizer.transform(xe) @ self.V

    def decode_embedded(self, z):
        z = np.asarray(z, dtype=float)
        F = self.w_map.transform(np.atleast_2d(z)) - self._phi0_w
        X = np.atleast_2d(z) @ self.V.T + F @ self.W_nl.T
        X = self.normalizer.inverse_transform(X)
        return X[0] if z.ndim == 1 else X

    def decode(self, z):
        i = self._y0
        f = self.w_map.transform(np.atleast_2d(z))[0] - self._phi0_w
        x = self.V[i] @ z + self.W_nl[i] @ f
        return x * self.normalizer.scale[i] + self.normalizer.center[i]

    def decode_jacobian(self, z):
        i = self._y0
        J = self.V[i] + self.W_nl[i] @ self.w_map.jacobian(z)
        return self.normalizer.scale[i][:, None] * J

    def decode_and_jacobian(self, z):
        i, sc = self._y0, self.normalizer.scale[self._y0]
        f, Jf = self.w_map.transform_and_jacobian(z)
        x = self.V[i] @ z + self.W_nl[i] @ (f - self._phi0_w)
        J = self.V[i] + self.W_nl[i] @ Jf
        return x * sc + self.normalizer.center[i], sc[:, None] * J

    def drift(self, z):
        f = self.r_map.transform(np.atleast_2d(z))[0] - self._phi0_r
        return self.R0 @ z + self.Theta @ f

    def drift_jacobian(self, z):
        return self.R0 + self.Theta @ self.r_map.jacobian(z)

    def drift_and_jacobian(self, z):
        f, J = self.r_map.transform_and_jacobian(z)
        return self.R0 @ z + self.Theta @ (f - self._phi0_r), self.R0 + self.Theta @ J

    # -- serialization -------------------------------------------------------
    def to_dict(self):
        return {
            "version": FORMAT,
            "dims": {"o": self.o, "m": self.m, "L": self.L, "n": self.n},
            "ref_mode": self.ref_mode, "lambda_lags": self.lambda_lags,
            "normalization": self.normalizer.to_dict(),
            "V": self.V.tolist(), "W_nl": self.W_nl.tolist(), "w_spec": self.w_map.to_dict(),
            "R0": self.R0.tolist(), "Theta": self.Theta.tolist(), "r_spec": self.r_map.to_dict(),
            "Lambda": self.Lam.tolist(), "J0": self.J0.tolist(),
            "z_max": self.z_max, "explained_variance": self.explained_variance.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != FORMAT:
            raise ConfigurationError(f"unsupported model format {d.get('version')!r}")
        a = lambda k: np.array(d[k], dtype=float)  # noqa: E731
        dims = d["dims"]
        n = dims["n"]
        return cls(V=a("V").reshape(-1, n), W_nl=a("W_nl").reshape(len(d["V"]), -1),
                   w_map=feature_map_from_dict(d["w_spec"]),
                   R0=a("R0").reshape(n, n), Theta=a("Theta").reshape(n, -1),
                   r_map=feature_map_from_dict(d["r_spec"]),
                   Lam=a("Lambda").reshape(dims["m"], dims["m"]), J0=a("J0").reshape(n, n),
                   o=dims["o"], m=dims["m"], L=dims["L"],
                   normalizer=Normalizer.from_dict(d["normalization"]),
                   ref_mode=d["ref_mode"], lambda_lags=d["lambda_lags"],
                   z_max=float(d["z_max"]), explained_variance=a("explained_variance"))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# functional API on fitted models
# ---------------------------------------------------------------------------

def control_reference(model, u_buffer, mode=None):
    """Reduced control-reference vector for a command buffer (newest first).

    ``exact`` needs the ``L`` most recent commands; ``approx`` uses the newest
    one repeated across all lag blocks.
    """
    mode = mode or model.ref_mode
    U = np.atleast_2d(np.asarray(u_buffer, dtype=float))
    if mode == "exact":
        if len(U) < model.L:
            raise ConfigurationError(f"exact mode needs {model.L} buffered commands, got {len(U)}")
        return model._c + sum(B @ u for B, u in zip(model._B_lags, U[:model.L]))
    if mode == "approx":
        return model._c + model._B_approx[0] @ U[0]
    raise ConfigurationError(f"unknown mode {mode!r}")


def reduced_derivative(model, z, u_buffer, mode=None):
    return model.drift(np.asarray(z, dtype=float)) + control_reference(model, u_buffer, mode)


def predict_open_loop(model, xe0, u_ref, dt, steps=None, u_hist=None, substeps=1):
    """Decoded lag-0 observations along an RK4 rollout from embedded state ``xe0``."""
    return model.predict_open_loop(xe0, u_ref, dt, steps, u_hist, substeps)


def _observed_operator(A_aug, C, o, m, L, dt, scale, V):
    """Ambient operator restricted to the embedded images of the modes most aligned with ``V``."""
    lam, Phi = linalg.eig(A_aug)
    p = L * (o + m)
    Psi = np.zeros((p, len(lam)), dtype=complex)
    for k in range(L):
        Psi[k * (o + m):(k + 1) * (o + m)] = (C @ Phi) * np.exp(-lam * k * dt)[None, :]
    Psi /= scale[:, None]
    nrm = np.linalg.norm(Psi, axis=0)
    keep = nrm > 1e-12 * nrm.max()
    Psi, lam = Psi[:, keep] / nrm[keep], lam[keep]
    align = np.linalg.norm(V.T @ Psi, axis=0)
    chosen, dim = [], 0
    for j in np.argsort(-align, kind="stable"):
        if j in chosen:
            continue
        chosen.append(j)
        dim += 1
        if abs(lam[j].imag) > 1e-12:
            partner = np.argmin(np.abs(lam - lam[j].conj()) + 10 * (np.arange(len(lam)) == j))
            if partner not in chosen:
                chosen.append(partner)
                dim += 1
        if dim >= V.shape[1]:
            break
    P = Psi[:, chosen]
    return (P @ np.diag(lam[chosen]) @ linalg.pinv(P)).real


def invariance_residual(model, A_aug, C=None, dt=None):
    """Relative violation ``|V J0 - A V|_F / |A V|_F`` of linear invariance.

    ``A_aug`` acts on ``[x; u]``.  ``C`` selects the observed plant rows
    (identity when the full state is observed).  With ``L = 1`` and full
    observation the operator is used directly, in normalized coordinates;
    otherwise ``A`` is replaced by its action on the embedded images of the
    eigenmodes most aligned with the model subspace, built with lag ``dt``.
    """
    A_aug = np.asarray(A_aug, dtype=float)
    N = A_aug.shape[0] - model.m
    if C is None:
        if model.o != N:
            raise ConfigurationError("observation matrix C required when o differs from the state size")
        C = np.eye(N)
    Caug = linalg.block_diag(C, np.eye(model.m))
    scale = model.normalizer.scale
    if model.L == 1 and model.o == N and np.allclose(C, np.eye(N)):
        A = A_aug / scale[:, None] * scale[None, :]
    else:
        if dt is None and model.L > 1:
            raise ConfigurationError("dt required for embedded invariance residual")
        A = _observed_operator(A_aug, Caug, model.o, model.m, model.L, dt or 0.0, scale, model.V)
    AV = A @ model.V
    return float(np.linalg.norm(model.V @ model.J0 - AV) / np.linalg.norm(AV))


def spectral_diagnostic(model, linearization=None):
    """Classify actuator vs retained system eigenvalues.

    ``linearization`` is an optional ``(A, A_u, Lambda)`` tuple from the
    plant; its slowest ``n - m`` eigenvalues are then the system modes of
    interest.  Without it, the reduced spectrum minus the eigenvalues closest
    to the identified actuator spectrum is used.
    """
    red = linalg.eigvals(model.J0)
    act = linalg.eigvals(model.Lam)
    k = model.n - model.m
    plant = None
    if linearization is not None:
        plant = linalg.eigvals(linearization[0])
        sys_eigs = _slowest(plant, k)
    else:
        rest = list(red)
        for a in act:
            rest.pop(int(np.argmin(np.abs(np.array(rest) - a))))
        sys_eigs = np.array(rest) if rest else red
    return SpectralReport(red, act, sys_eigs, plant, classify_overlap(act, sys_eigs))


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

class CaSSM(BaseEstimator):
    """Fit a control-augmented manifold model from decay trajectories.

    Parameters mirror the identification stages: embedding depth
    ``n_delays``, manifold dimension ``n_components``, the two feature maps
    and a shared ridge weight applied to normalized data.
    """

    def __init__(self, n_components=7, n_delays=2, w_features="rff", r_features="rff",
                 n_rff=512, length_scale=40.0, poly_degree=3, ridge=1e-4,
                 ref_mode="approx", lambda_lags="lag0", smoothing=None, random_state=0):
        self.n_components = n_components
        self.n_delays = n_delays
        self.w_features = w_features
        self.r_features = r_features
        self.n_rff = n_rff
        self.length_scale = length_scale
        self.poly_degree = poly_degree
        self.ridge = ridge
        self.ref_mode = ref_mode
        self.lambda_lags = lambda_lags
        self.smoothing = smoothing
        self.random_state = random_state

    def _feature_map(self, kind, offset):
        if kind == "rff":
            return make_feature_map("rff", n_components=self.n_rff, length_scale=self.length_scale,
                                    random_state=self.random_state + offset)
        return make_feature_map(kind, degree_lo=2, degree_hi=self.poly_degree)

    def _validate(self):
        if self.n_delays < 1:
            raise ConfigurationError("n_delays must be >= 1")
        if self.ridge < 0:
            raise ConfigurationError("ridge must be non-negative")
        if self.ref_mode not in ("exact", "approx"):
            raise ConfigurationError("ref_mode must be 'exact' or 'approx'")

    def fit(self, trajectories, y=None):
        self._validate()
        trajectories = list(trajectories)
        if not trajectories:
            raise ConfigurationError("no training trajectories")
        ds = build_dataset(trajectories, self.n_delays, smooth=self.smoothing)
        if self.n_components < ds.m:
            raise ConfigurationError(f"n_components must be >= m = {ds.m} to identify Lambda")
        V, ev = fit_subspace(ds.X, self.n_components)
        W, w_map = fit_parameterization(ds.X, V, self._feature_map(self.w_features, 1), self.ridge)
        Z, Zdot = ds.X @ V, ds.Xdot @ V
        R0, Theta, J0, r_map = fit_reduced_dynamics(Z, Zdot, self._feature_map(self.r_features, 2),
                                                    self.ridge)
        Lam_n = identify_lambda(V, J0, ds.o, ds.m, ds.L, self.lambda_lags)
        s = ds.normalizer.scale[ds.o:ds.o + ds.m]
        Lam = Lam_n * s[:, None] / s[None, :]
        lam_ev = linalg.eigvals(Lam)
        dt = trajectories[0].dt
        if np.any(lam_ev.real >= 0) or np.max(np.abs(lam_ev)) * dt > 2.0:
            # after release the actuator transient spans only a sample or two
            warnings.warn(f"identified actuator spectrum {np.round(lam_ev, 3)} is unstable or not "
                          f"resolved at dt = {dt}; sample the decays faster", RuntimeWarning,
                          stacklevel=2)
        self.model_ = ManifoldModel(V=V, W_nl=W, w_map=w_map, R0=R0, Theta=Theta, r_map=r_map,
                                    Lam=Lam, J0=J0, o=ds.o, m=ds.m, L=ds.L,
                                    normalizer=ds.normalizer, ref_mode=self.ref_mode,
                                    lambda_lags=self.lambda_lags,
                                    z_max=float(np.max(np.linalg.norm(Z, axis=1))),
                                    explained_variance=ev)
        self.explained_variance_ratio_ = ev[:self.n_components]
        self.n_samples_ = len(ds.X)
        return self

    @property
    def Lambda_(self):
        check_is_fitted(self, "model_")
        return self.model_.Lam

    def transform(self, X):
        """Embedded raw rows to reduced coordinates."""
        check_is_fitted(self, "model_")
        return self.model_.encode(np.asarray(X, dtype=float))

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        return self.model_.decode_embedded(np.asarray(Z, dtype=float))

    def predict(self, X, u_ref=None):
        """Reduced-coordinate velocities at embedded rows ``X`` under a constant command."""
        check_is_fitted(self, "model_")
        Z = np.atleast_2d(self.transform(X))
        u = np.zeros((self.model_.L, self.model_.m)) if u_ref is None else \
            np.tile(np.atleast_2d(u_ref)[:1], (self.model_.L, 1))
        return np.array([reduced_derivative(self.model_, z, u) for z in Z])

    def predict_open_loop(self, xe0, u_ref, dt, steps=None, u_hist=None, substeps=1):
        check_is_fitted(self, "model_")
        return self.model_.predict_open_loop(xe0, u_ref, dt, steps, u_hist, substeps)
