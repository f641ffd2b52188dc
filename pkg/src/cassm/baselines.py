"""Baseline reduced models: an observation-only manifold with a calibrated
affine input map (oSSM) and an EDMD Koopman surrogate with polynomial lifting.

Both expose the same :class:`~cassm.base.ReducedModel` interface as the
control-augmented model so that prediction and MPC code is shared.  Neither
uses the measured actuator state.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from math import comb
from pathlib import Path

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .base import ReducedModel, ridge_solve
from .exceptions import CalibrationError, ConfigurationError
from .features import PolynomialFeatureMap, feature_map_from_dict, poly_features
from .manifold import fit_parameterization, fit_reduced_dynamics, fit_subspace
from .pipeline import Normalizer, embed_array, estimate_derivatives, rest_state

OSSM_FORMAT = "ossm-model/1"
KOOPMAN_FORMAT = "koopman-model/1"
MAX_LIFTED = 5000


def _y_embedding(trajectories, L, start_key="release"):
    """Observation-only delay embeddings (newest lag first) per trajectory."""
    out = []
    for tr in trajectories:
        s = int(tr.meta.get(start_key) or 0) if start_key else 0
        y = tr.y[s:]
        if len(y) < L + 4:
            continue
        out.append((embed_array(y, L), s + L - 1))
    return out


def _y_normalizer(trajectories, L):
    o = trajectories[0].o
    center = np.tile(rest_state(trajectories)[:o], L)
    dev = np.vstack([E for E, _ in _y_embedding(trajectories, L)]) - center
    return Normalizer(center, np.full(L * o, float(np.sqrt(np.mean(dev ** 2)))))


class _YEmbedded:
    """Mixin for models whose embedding stacks observation lags only."""

    uses_actuator_state = False

    def embed(self, Y, U=None):
        Y = np.atleast_2d(Y)
        if len(Y) < self.L:
            raise ConfigurationError(f"need {self.L} observation samples")
        return np.concatenate([Y[k] for k in range(self.L)])


# ---------------------------------------------------------------------------
# oSSM
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class OSSMModel(_YEmbedded, ReducedModel):
    V: np.ndarray
    W_nl: np.ndarray
    w_map: object
    R0: np.ndarray
    Theta: np.ndarray
    r_map: object
    B_r: np.ndarray
    o: int
    m: int
    L: int
    normalizer: Normalizer
    z_max: float = np.inf
    offset: np.ndarray = field(default_factory=lambda: np.zeros(0))

    kind = "ossm"
    continuous = True

    def __post_init__(self):
        n = self.V.shape[1]
        if self.offset.size == 0:
            self.offset = np.zeros(n)
        self._phi0_w = self.w_map.transform(np.zeros((1, n)))[0]
        self._phi0_r = self.r_map.transform(np.zeros((1, n)))[0]

    @property
    def n(self):
        return self.V.shape[1]

    @property
    def J0(self):
        return self.R0 + self.Theta @ self.r_map.jacobian(np.zeros(self.n))

    def input_matrices(self):
        return [self.B_r], self.offset

    def encode(self, xe):
        return self.normalizer.transform(xe) @ self.V

    def decode(self, z):
        i = slice(0, self.o)
        f = self.w_map.transform(np.atleast_2d(z))[0] - self._phi0_w
        x = self.V[i] @ z + self.W_nl[i] @ f
        return x * self.normalizer.scale[i] + self.normalizer.center[i]

    def decode_jacobian(self, z):
        i = slice(0, self.o)
        return self.normalizer.scale[i][:, None] * (self.V[i] + self.W_nl[i] @ self.w_map.jacobian(z))

    def drift(self, z):
        f = self.r_map.transform(np.atleast_2d(z))[0] - self._phi0_r
        return self.R0 @ z + self.Theta @ f

    def drift_jacobian(self, z):
        return self.R0 + self.Theta @ self.r_map.jacobian(z)

    def drift_and_jacobian(self, z):
        f, J = self.r_map.transform_and_jacobian(z)
        return self.R0 @ z + self.Theta @ (f - self._phi0_r), self.R0 + self.Theta @ J

    def to_dict(self):
        return {"version": OSSM_FORMAT, "dims": {"o": self.o, "m": self.m, "L": self.L, "n": self.n},
                "normalization": self.normalizer.to_dict(), "V": self.V.tolist(),
                "W_nl": self.W_nl.tolist(), "w_spec": self.w_map.to_dict(), "R0": self.R0.tolist(),
                "Theta": self.Theta.tolist(), "r_spec": self.r_map.to_dict(),
                "B_r": self.B_r.tolist(), "offset": self.offset.tolist(), "z_max": self.z_max}

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != OSSM_FORMAT:
            raise ConfigurationError(f"unsupported model format {d.get('version')!r}")
        dims, n = d["dims"], d["dims"]["n"]
        a = lambda k: np.array(d[k], dtype=float)  # noqa: E731
        return cls(V=a("V").reshape(-1, n), W_nl=a("W_nl").reshape(len(d["V"]), -1),
                   w_map=feature_map_from_dict(d["w_spec"]), R0=a("R0").reshape(n, n),
                   Theta=a("Theta").reshape(n, -1), r_map=feature_map_from_dict(d["r_spec"]),
                   B_r=a("B_r").reshape(n, dims["m"]), o=dims["o"], m=dims["m"], L=dims["L"],
                   normalizer=Normalizer.from_dict(d["normalization"]), z_max=float(d["z_max"]),
                   offset=a("offset"))


class OSSM(BaseEstimator):
    """Observation-space manifold fitted on decays plus an affine input map.

    ``fit(decays, calibration)``: the autonomous part uses the release phase
    of the decays; ``B_r`` (and a constant offset when ``fit_offset``) are
    regressed on commanded inputs from separate controlled trajectories.
    """

    def __init__(self, n_components=5, n_delays=2, degree=2, ridge=1e-6, calib_ridge=1e-6,
                 fit_offset=False):
        self.n_components = n_components
        self.n_delays = n_delays
        self.degree = degree
        self.ridge = ridge
        self.calib_ridge = calib_ridge
        self.fit_offset = fit_offset

    def fit(self, trajectories, calibration=None):
        if not calibration:
            raise CalibrationError("oSSM needs controlled calibration trajectories to fit B_r")
        trajectories = list(trajectories)
        L = self.n_delays
        o, m, dt = trajectories[0].o, trajectories[0].m, trajectories[0].dt
        norm = _y_normalizer(trajectories, L)
        blocks = [norm.transform(E) for E, _ in _y_embedding(trajectories, L)]
        X = np.vstack(blocks)
        Xdot = np.vstack([estimate_derivatives(B, dt) for B in blocks])
        V, _ = fit_subspace(X, self.n_components)
        W, w_map = fit_parameterization(X, V, PolynomialFeatureMap(2, self.degree), self.ridge)
        R0, Theta, _, r_map = fit_reduced_dynamics(X @ V, Xdot @ V,
                                                   PolynomialFeatureMap(2, self.degree), self.ridge)
        model = OSSMModel(V, W, w_map, R0, Theta, r_map, np.zeros((V.shape[1], m)), o, m, L, norm,
                          z_max=float(np.max(np.linalg.norm(X @ V, axis=1))))
        # calibration: dz/dt - drift(z) = B_r u_ref (+ c)
        rows, targets = [], []
        for tr in calibration:
            E = norm.transform(embed_array(tr.y, L))
            if len(E) < 5:
                continue
            Z = E @ V
            Zd = estimate_derivatives(Z, tr.dt)
            drift = np.array([model.drift(z) for z in Z])
            u = tr.u_ref[L - 1:]
            rows.append(np.hstack([u, np.ones((len(u), 1))]) if self.fit_offset else u)
            targets.append(Zd - drift)
        if not rows:
            raise CalibrationError("calibration trajectories too short")
        C = ridge_solve(np.vstack(rows), np.vstack(targets), self.calib_ridge, "oSSM calibration").T
        model.B_r = C[:, :m]
        if self.fit_offset:
            model.offset = C[:, m]
        model.z_max = max(model.z_max, max(float(np.max(np.linalg.norm(
            norm.transform(embed_array(tr.y, L)) @ V, axis=1))) for tr in calibration))
        self.model_ = model
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.encode(np.asarray(X, dtype=float))


# ---------------------------------------------------------------------------
# Koopman / EDMD
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class KoopmanModel(_YEmbedded, ReducedModel):
    """Discrete lifted linear model ``psi+ = A psi + B u_ref``."""

    A: np.ndarray
    B: np.ndarray
    o: int
    m: int
    L: int
    degree: int
    dt: float
    normalizer: Normalizer
    z_max: float = np.inf

    kind = "koopman"
    continuous = False

    @property
    def n(self):
        return self.A.shape[0]

    def lift(self, xn):
        xn = np.asarray(xn, dtype=float)
        if self.degree < 2:
            return xn
        return np.concatenate([xn, poly_features(xn, 2, self.degree)], axis=-1)

    def encode(self, xe):
        return self.lift(self.normalizer.transform(xe))

    def decode(self, z):
        return z[:self.o] * self.normalizer.scale[:self.o] + self.normalizer.center[:self.o]

    def decode_jacobian(self, z):
        J = np.zeros((self.o, self.n))
        J[:, :self.o] = np.diag(self.normalizer.scale[:self.o])
        return J

    def _check_dt(self, dt):
        if abs(dt - self.dt) > 1e-12:
            raise ConfigurationError(f"Koopman model is discrete at dt = {self.dt}, got {dt}")

    def step(self, z, U, dt, substeps=1):
        self._check_dt(dt)
        return self.A @ z + self.B @ np.atleast_2d(U)[0]

    def step_jacobians(self, z, U, dt, substeps=1):
        self._check_dt(dt)
        return self.step(z, U, dt), self.A, [self.B]

    def to_dict(self):
        return {"version": KOOPMAN_FORMAT, "dims": {"o": self.o, "m": self.m, "L": self.L},
                "degree": self.degree, "dt": self.dt, "normalization": self.normalizer.to_dict(),
                "A": self.A.tolist(), "B": self.B.tolist(), "z_max": self.z_max}

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != KOOPMAN_FORMAT:
            raise ConfigurationError(f"unsupported model format {d.get('version')!r}")
        A = np.array(d["A"], dtype=float)
        return cls(A, np.array(d["B"], dtype=float).reshape(len(A), -1), d["dims"]["o"],
                   d["dims"]["m"], d["dims"]["L"], d["degree"], d["dt"],
                   Normalizer.from_dict(d["normalization"]), float(d["z_max"]))


class Koopman(BaseEstimator):
    """EDMD with control on a polynomial lifting of stacked observation lags."""

    def __init__(self, n_delays=2, degree=2, ridge=1e-6):
        self.n_delays = n_delays
        self.degree = degree
        self.ridge = ridge

    def fit(self, trajectories, calibration=None):
        trajectories = list(trajectories) + list(calibration or [])
        L = self.n_delays
        o, m, dt = trajectories[0].o, trajectories[0].m, trajectories[0].dt
        p = L * o
        n_lift = p + sum(comb(p + d - 1, d) for d in range(2, self.degree + 1))
        if n_lift > MAX_LIFTED:
            raise ConfigurationError(f"lifted dimension {n_lift} exceeds {MAX_LIFTED}")
        norm = _y_normalizer(trajectories, L)
        proto = KoopmanModel(np.eye(n_lift), np.zeros((n_lift, m)), o, m, L, self.degree, dt, norm)
        P, Pn, Us = [], [], []
        for tr in trajectories:
            E, _ = _y_embedding([tr], L, start_key=None)[0]
            Psi = proto.encode(E)
            P.append(Psi[:-1])
            Pn.append(Psi[1:])
            Us.append(tr.u_ref[L - 1:-1])
        P, Pn, Us = np.vstack(P), np.vstack(Pn), np.vstack(Us)
        C = ridge_solve(np.hstack([P, Us]), Pn, self.ridge, "EDMD").T
        A, B = C[:, :n_lift], C[:, n_lift:]
        # one-step residual on the observation block shared by every lifting degree
        R = Pn[:, :p] - np.hstack([P, Us]) @ C.T[:, :p]
        self.residual_ = float(np.sqrt(np.mean(R ** 2)))
        rho = float(np.max(np.abs(linalg.eigvals(A))))
        if rho > 1 + 1e-6:
            warnings.warn(f"Koopman operator spectral radius {rho:.6f} > 1", RuntimeWarning,
                          stacklevel=2)
        self.spectral_radius_ = rho
        self.model_ = KoopmanModel(A, B, o, m, L, self.degree, dt, norm,
                                   z_max=float(np.max(np.linalg.norm(P, axis=1))))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.encode(np.asarray(X, dtype=float))


# ---------------------------------------------------------------------------
# persistence for any model kind
# ---------------------------------------------------------------------------

def model_from_dict(d):
    from .manifold import FORMAT, ManifoldModel
    kinds = {FORMAT: ManifoldModel, OSSM_FORMAT: OSSMModel, KOOPMAN_FORMAT: KoopmanModel}
    if not isinstance(d, dict) or d.get("version") not in kinds:
        version = d.get("version") if isinstance(d, dict) else None
        raise ConfigurationError(f"unknown model format {version!r}")
    return kinds[d["version"]].from_dict(d)


def save_model(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh)


def load_model(path):
    """Read any persisted model; schema problems are reported with the path."""
    try:
        with open(path) as fh:
            return model_from_dict(json.load(fh))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise ConfigurationError(f"{path}: {exc}") from exc
        raise ConfigurationError(f"{path}: model schema error ({type(exc).__name__}: {exc})") \
            from exc
