"""Polynomial and random-Fourier feature maps with analytic Jacobians.

Both maps follow the scikit-learn transformer protocol (``fit`` samples /
records whatever is data dependent, ``transform`` evaluates) and add
``jacobian`` for the derivative with respect to the input.
"""
from __future__ import annotations

from itertools import combinations_with_replacement
from math import comb

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .exceptions import ConfigurationError

MAX_FEATURES = 10 ** 6


def _require(est, attr):
    # cheap stand-in for check_is_fitted; these maps sit inside ODE inner loops
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted; call fit first")


def monomial_powers(n, degree_lo, degree_hi):
    """Exponent table, graded by total degree then lexicographic within a degree.

    For ``n = 2``, degree 2 this is ``z1^2, z1 z2, z2^2``.
    """
    if not 2 <= degree_lo <= degree_hi:
        raise ConfigurationError("polynomial degrees must satisfy 2 <= lo <= hi")
    count = sum(comb(n + d - 1, d) for d in range(degree_lo, degree_hi + 1))
    if count > MAX_FEATURES:
        raise ConfigurationError(f"{count} monomials exceeds the {MAX_FEATURES} guard")
    rows = []
    for d in range(degree_lo, degree_hi + 1):
        for idx in combinations_with_replacement(range(n), d):
            p = np.zeros(n, dtype=int)
            for i in idx:
                p[i] += 1
            rows.append(p)
    return np.array(rows, dtype=int).reshape(-1, n)


def _monomials(Z, P):
    return np.prod(Z[:, None, :] ** P[None, :, :], axis=2)


def poly_features(z, degree_lo=2, degree_hi=2):
    z = np.asarray(z, dtype=float)
    P = monomial_powers(z.shape[-1], degree_lo, degree_hi)
    out = _monomials(np.atleast_2d(z), P)
    return out[0] if z.ndim == 1 else out


def rff_sample(n, D, length_scale=1.0, seed=0):
    """Frequencies ``omega ~ N(0, length_scale^-2 I)`` (D x n) and phases ``b ~ U[0, 2 pi)``."""
    if D < 1 or length_scale <= 0:
        raise ConfigurationError("need D >= 1 and length_scale > 0")
    rng = np.random.default_rng(seed)
    omega = rng.normal(0.0, 1.0 / length_scale, size=(D, n))
    b = rng.uniform(0.0, 2 * np.pi, size=D)
    return omega, b


class PolynomialFeatureMap(TransformerMixin, BaseEstimator, auto_wrap_output_keys=None):
    """All monomials of total degree ``degree_lo..degree_hi`` (no linear part)."""

    kind = "polynomial"

    def __init__(self, degree_lo=2, degree_hi=2):
        self.degree_lo = degree_lo
        self.degree_hi = degree_hi

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        self.powers_ = monomial_powers(self.n_features_in_, self.degree_lo, self.degree_hi)
        return self

    @property
    def n_output_features_(self):
        return len(self.powers_)

    def transform(self, X):
        _require(self, "powers_")
        X = np.asarray(X, dtype=float)
        out = _monomials(np.atleast_2d(X), self.powers_)
        return out[0] if X.ndim == 1 else out

    def jacobian(self, z):
        """``d phi / d z`` at a single point, shape ``(n_phi, n)``."""
        _require(self, "powers_")
        z = np.asarray(z, dtype=float)
        P = self.powers_
        # exponents after differentiating each monomial by each coordinate
        D = getattr(self, "_dpowers", None)
        if D is None or D.shape[:2] != P.shape:
            D = np.maximum(P[:, None, :] - np.eye(P.shape[1], dtype=int)[None], 0)
            self._dpowers = D
        return P * np.prod(z ** D, axis=2)

    def transform_and_jacobian(self, z):
        return self.transform(z), self.jacobian(z)

    def to_dict(self):
        return {"kind": self.kind, "degree_lo": int(self.degree_lo),
                "degree_hi": int(self.degree_hi), "n": int(self.n_features_in_)}


class RandomFourierFeatures(TransformerMixin, BaseEstimator, auto_wrap_output_keys=None):
    """Cosine features ``sqrt(2/D) cos(omega z + b)`` approximating an RBF kernel.

    ``omega`` and ``b`` are drawn once in :meth:`fit` and then frozen; they are
    serialized verbatim so a reloaded map reproduces the same features.
    """

    kind = "rff"

    def __init__(self, n_components=512, length_scale=1.0, random_state=0):
        self.n_components = n_components
        self.length_scale = length_scale
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        self.omega_, self.offset_ = rff_sample(
            self.n_features_in_, self.n_components, self.length_scale, self.random_state)
        return self

    @property
    def n_output_features_(self):
        return self.omega_.shape[0]

    def transform(self, X):
        _require(self, "omega_")
        X = np.asarray(X, dtype=float)
        D = self.omega_.shape[0]
        return np.sqrt(2.0 / D) * np.cos(X @ self.omega_.T + self.offset_)

    def jacobian(self, z):
        _require(self, "omega_")
        D = self.omega_.shape[0]
        s = np.sin(self.omega_ @ np.asarray(z, dtype=float) + self.offset_)
        return -np.sqrt(2.0 / D) * s[:, None] * self.omega_

    def transform_and_jacobian(self, z):
        """Features and Jacobian at one point, sharing the phase evaluation."""
        _require(self, "omega_")
        a = self.omega_ @ np.asarray(z, dtype=float) + self.offset_
        c = np.sqrt(2.0 / self.omega_.shape[0])
        return c * np.cos(a), -c * np.sin(a)[:, None] * self.omega_

    def to_dict(self):
        return {"kind": self.kind, "n_components": int(self.n_components),
                "length_scale": float(self.length_scale),
                "random_state": self.random_state, "n": int(self.n_features_in_),
                "omega": self.omega_.tolist(), "offset": self.offset_.tolist()}


def rff_features(z, spec):
    return spec.transform(z)


def feature_jacobian(spec, z):
    return spec.jacobian(z)


def make_feature_map(kind, **params):
    if kind == "polynomial":
        return PolynomialFeatureMap(params.get("degree_lo", 2), params.get("degree_hi", 2))
    if kind == "rff":
        return RandomFourierFeatures(params.get("n_components", 512),
                                     params.get("length_scale", 1.0),
                                     params.get("random_state", 0))
    raise ConfigurationError(f"unknown feature map kind {kind!r}")


def feature_map_from_dict(d):
    if d["kind"] == "polynomial":
        fm = PolynomialFeatureMap(d["degree_lo"], d["degree_hi"])
        return fm.fit(np.zeros((1, d["n"])))
    if d["kind"] == "rff":
        fm = RandomFourierFeatures(d["n_components"], d["length_scale"], d["random_state"])
        fm.n_features_in_ = d["n"]
        fm.omega_ = np.array(d["omega"], dtype=float).reshape(-1, d["n"])
        fm.offset_ = np.array(d["offset"], dtype=float)
        return fm
    raise ConfigurationError(f"unknown feature map kind {d['kind']!r}")
