"""Synthetic full-order plant: a 3D point-mass chain with first-order actuators.

The chain hangs from a fixed anchor along -z.  Node ``i`` (1-based, node 0 is
the anchor) is connected to node ``i-1`` by a segment spring acting on the
relative displacement ``d = q_i - q_{i-1}``::

    U(d) = 1/2 d^T K d + 1/4 k_cub |d|^4,   K = k_lin * diag(1, 1, axial_ratio)

Damping is Rayleigh (``alpha * M + beta * K_lin``).  Inputs enter as generalized
forces ``G(q) u`` with a configuration dependent gain

    G(q) = G0 * (1 + input_gain_state * tanh(s)),  s = (x_tip^2 + y_tip^2) / deflection_scale^2

and the actuator state follows ``du/dt = Lambda (u - u_ref)``.

Flat state layout used by the integrators: ``[q (3N), qdot (3N), u (m)]``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from functools import cached_property

import numpy as np

from .exceptions import ConfigurationError, IntegrationError


def _default_input_gain(n_nodes, m_inputs, nodes, gain=0.125):
    if m_inputs > 2:
        raise ConfigurationError(
            "default input map only covers m_inputs <= 2; pass input_gain_linear"
        )
    G = np.zeros((3 * n_nodes, m_inputs))
    for j in range(m_inputs):
        for node in nodes:
            G[3 * (node - 1) + j, j] = gain
    return G


@dataclass(frozen=True, eq=False)
class PlantConfig:
    n_nodes: int = 12
    mass: float = 0.02
    k_lin: float = 50.0
    k_cub: float = 4.0e5
    axial_ratio: float = 4.0
    c_damp: tuple = (2.0, 0.012)
    m_inputs: int = 2
    lambda_true: np.ndarray | None = None
    input_gain_linear: np.ndarray | None = None
    input_gain_state: float = 0.5
    deflection_scale: float = 0.05
    observed_nodes: tuple | None = None
    gravity: float = 9.81
    segment_length: float = 0.31 / 12
    substeps: int = 4

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        n, m = int(self.n_nodes), int(self.m_inputs)
        set_("n_nodes", n)
        set_("m_inputs", m)
        if n < 1 or m < 1:
            raise ConfigurationError("n_nodes and m_inputs must be positive")
        if self.observed_nodes is None:
            set_("observed_nodes", (max(n // 3, 1), max(2 * n // 3, 1), n))
        set_("observed_nodes", tuple(int(i) for i in self.observed_nodes))
        if self.lambda_true is None:
            set_("lambda_true", -4.0 * np.eye(m))
        lam = np.array(self.lambda_true, dtype=float).reshape(m, m)
        set_("lambda_true", lam)
        if self.input_gain_linear is None:
            set_("input_gain_linear", _default_input_gain(n, m, self.observed_nodes))
        G = np.array(self.input_gain_linear, dtype=float)
        if G.shape != (3 * n, m):
            raise ConfigurationError(
                f"input_gain_linear has shape {G.shape}, expected {(3 * n, m)}"
            )
        set_("input_gain_linear", G)
        set_("c_damp", tuple(float(c) for c in self.c_damp))
        if np.any(np.linalg.eigvals(lam).real >= 0):
            raise ConfigurationError("lambda_true must be Hurwitz")
        if self.k_lin <= 0 or self.mass <= 0 or self.axial_ratio <= 0:
            raise ConfigurationError("k_lin, mass and axial_ratio must be positive")
        if len(self.c_damp) != 2 or min(self.c_damp) < 0:
            raise ConfigurationError("c_damp must be a non-negative (alpha, beta) pair")
        obs = self.observed_nodes
        if len(set(obs)) != len(obs) or min(obs) < 1 or max(obs) > n:
            raise ConfigurationError(f"observed_nodes {obs} must be distinct in 1..{n}")
        if self.substeps < 1:
            raise ConfigurationError("substeps must be >= 1")

    # -- dimensions -------------------------------------------------------
    @property
    def n_q(self):
        return 3 * self.n_nodes

    @property
    def n_mech(self):
        return 6 * self.n_nodes

    @property
    def n_state(self):
        return self.n_mech + self.m_inputs

    @property
    def n_obs(self):
        return 3 * len(self.observed_nodes)

    @cached_property
    def obs_index(self):
        return np.concatenate([np.arange(3 * (i - 1), 3 * i) for i in self.observed_nodes])

    @cached_property
    def reference_positions(self):
        ref = np.zeros((self.n_nodes, 3))
        ref[:, 2] = -self.segment_length * np.arange(1, self.n_nodes + 1)
        return ref.ravel()

    @cached_property
    def _kvec(self):
        return self.k_lin * np.array([1.0, 1.0, self.axial_ratio])

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else (
                list(v) if isinstance(v, tuple) else v)
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("c_damp", "observed_nodes"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def linear_variant(cls, **kw):
        """Same chain without cubic springs, gain modulation or gravity."""
        kw.setdefault("k_cub", 0.0)
        kw.setdefault("input_gain_state", 0.0)
        kw.setdefault("gravity", 0.0)
        return cls(**kw)


@dataclass
class PlantState:
    q: np.ndarray
    qdot: np.ndarray
    u: np.ndarray
    t: float = 0.0

    def to_vector(self):
        return np.concatenate([self.q, self.qdot, self.u])

    @classmethod
    def from_vector(cls, x, cfg, t=0.0):
        x = np.asarray(x, dtype=float)
        if x.shape != (cfg.n_state,):
            raise ConfigurationError(f"state has shape {x.shape}, expected ({cfg.n_state},)")
        nq = cfg.n_q
        return cls(x[:nq].copy(), x[nq:2 * nq].copy(), x[2 * nq:].copy(), t)


@dataclass
class Observation:
    y: np.ndarray
    u: np.ndarray
    u_ref: np.ndarray
    t: float = 0.0


# -- dynamics --------------------------------------------------------------

def _segment_diffs(Q):
    D = np.empty_like(Q)
    D[0] = Q[0]
    D[1:] = Q[1:] - Q[:-1]
    return D


def _node_forces(F_seg):
    # segment i pulls node i back and node i-1 forward
    f = -F_seg.copy()
    f[:-1] += F_seg[1:]
    return f


def elastic_forces(q, cfg):
    """Spring + gravity generalized forces (negative potential gradient)."""
    Q = q.reshape(cfg.n_nodes, 3)
    D = _segment_diffs(Q)
    F = D * cfg._kvec + cfg.k_cub * np.sum(D * D, axis=1, keepdims=True) * D
    f = _node_forces(F)
    f[:, 2] -= cfg.mass * cfg.gravity
    return f.ravel()


def potential_energy(q, cfg):
    """Total potential energy; an independent reference for the spring forces."""
    Q = q.reshape(cfg.n_nodes, 3)
    D = _segment_diffs(Q)
    sq = np.sum(D * D, axis=1)
    U = 0.5 * np.sum(D * D * cfg._kvec) + 0.25 * cfg.k_cub * np.sum(sq * sq)
    return U + cfg.mass * cfg.gravity * np.sum(Q[:, 2])


def _linear_stiffness_apply(v, cfg):
    V = v.reshape(cfg.n_nodes, 3)
    return -_node_forces(_segment_diffs(V) * cfg._kvec).ravel()


def input_gain(q, cfg):
    tip = q[-3:]
    s = (tip[0] ** 2 + tip[1] ** 2) / cfg.deflection_scale ** 2
    return cfg.input_gain_linear * (1.0 + cfg.input_gain_state * np.tanh(s))


def rhs(x, u_ref, cfg):
    """Flat-vector right-hand side ``[qdot; qddot; udot]``."""
    nq = cfg.n_q
    q, qd, u = x[:nq], x[nq:2 * nq], x[2 * nq:]
    alpha, beta = cfg.c_damp
    damping = alpha * cfg.mass * qd + beta * _linear_stiffness_apply(qd, cfg)
    acc = (elastic_forces(q, cfg) - damping + input_gain(q, cfg) @ u) / cfg.mass
    udot = cfg.lambda_true @ (u - u_ref)
    return np.concatenate([qd, acc, udot])


def _check_uref(u_ref, cfg):
    u_ref = np.asarray(u_ref, dtype=float)
    if u_ref.shape != (cfg.m_inputs,):
        raise ConfigurationError(f"u_ref has shape {u_ref.shape}, expected ({cfg.m_inputs},)")
    return u_ref


def plant_derivative(state, u_ref, cfg):
    """Time derivative of a :class:`PlantState`, returned as a PlantState of rates."""
    if state.u.shape != (cfg.m_inputs,) or state.q.shape != (cfg.n_q,):
        raise ConfigurationError("state dimensions do not match the plant configuration")
    dx = rhs(state.to_vector(), _check_uref(u_ref, cfg), cfg)
    return PlantState.from_vector(dx, cfg, t=1.0)


def rk4_flat(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(state, u_ref, dt, cfg):
    """One classical RK4 step with ``u_ref`` held constant."""
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    u_ref = _check_uref(u_ref, cfg)
    x = rk4_flat(lambda s: rhs(s, u_ref, cfg), state.to_vector(), dt)
    t = state.t + dt
    if not np.all(np.isfinite(x)):
        raise IntegrationError(f"plant integration blew up at t = {t:.4f} s", time=t)
    return PlantState.from_vector(x, cfg, t=t)


def advance(x, u_ref, dt, cfg, t=0.0):
    """Advance a flat state by ``dt`` using ``cfg.substeps`` RK4 substeps."""
    h = dt / cfg.substeps
    f = lambda s: rhs(s, u_ref, cfg)  # noqa: E731
    for _ in range(cfg.substeps):
        x = rk4_flat(f, x, h)
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e6:
        raise IntegrationError(f"plant integration blew up at t = {t + dt:.4f} s", time=t + dt)
    return x


# -- equilibrium and linearization ------------------------------------------

def equilibrium(cfg):
    """Straight hanging rest state with ``u = 0`` (segments carry the weight below)."""
    n = cfg.n_nodes
    k_ax = cfg.k_lin * cfg.axial_ratio
    dz = np.zeros(n)
    for i in range(n):
        load = (n - i) * cfg.mass * cfg.gravity
        if load == 0.0:
            continue
        # k_ax d + k_cub d^3 = load, unique positive root
        d = load / k_ax
        for _ in range(60):
            g = k_ax * d + cfg.k_cub * d ** 3 - load
            d -= g / (k_ax + 3.0 * cfg.k_cub * d * d)
        dz[i] = -d
    Q = np.zeros((n, 3))
    Q[:, 2] = np.cumsum(dz)
    return PlantState(Q.ravel(), np.zeros(cfg.n_q), np.zeros(cfg.m_inputs), 0.0)


def linearize_plant(cfg, step=1e-6, check=True):
    """Central-difference Jacobians at the rest state.

    Returns ``(A, A_u, Lambda)`` with ``A`` the mechanical block (``6N x 6N``).
    """
    x0 = equilibrium(cfg).to_vector()
    zero = np.zeros(cfg.m_inputs)
    n = cfg.n_state
    J = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        J[:, j] = (rhs(x0 + e, zero, cfg) - rhs(x0 - e, zero, cfg)) / (2 * step)
    nm = cfg.n_mech
    A, A_u, Lam = J[:nm, :nm], J[:nm, nm:], J[nm:, nm:]
    if check and np.max(np.linalg.eigvals(A).real) >= 0:
        raise ConfigurationError("linearized plant is not Hurwitz")
    return A, A_u, Lam


def augmented_matrix(A, A_u, Lam):
    m = Lam.shape[0]
    return np.block([[A, A_u], [np.zeros((m, A.shape[0])), Lam]])


def observation_matrix(cfg):
    """Selector of the observed marker displacements from the mechanical state."""
    idx = cfg.obs_index
    C = np.zeros((len(idx), cfg.n_mech))
    C[np.arange(len(idx)), idx] = 1.0
    return C


def tip_index(cfg):
    """Indices of the tip (last node) inside the observation vector, or None."""
    if cfg.n_nodes not in cfg.observed_nodes:
        return None
    k = cfg.observed_nodes.index(cfg.n_nodes)
    return np.arange(3 * k, 3 * k + 3)


def observe(state, u_ref, cfg, noise_std=0.0, rng=None):
    """Observed marker positions (absolute, metres) plus actuator channels."""
    y = cfg.reference_positions[cfg.obs_index] + state.q[cfg.obs_index]
    if noise_std > 0:
        rng = np.random.default_rng() if rng is None else rng
        y = y + rng.normal(0.0, noise_std, size=y.shape)
    return Observation(y, state.u.copy(), np.asarray(u_ref, dtype=float).copy(), state.t)


def static_deflection(cfg, u, iters=50):
    """Rest configuration under constant actuator state ``u`` (Newton on the forces)."""
    q = equilibrium(cfg).q.copy()
    u = np.asarray(u, dtype=float)
    n = cfg.n_q
    for _ in range(iters):
        F = elastic_forces(q, cfg) + input_gain(q, cfg) @ u
        if np.max(np.abs(F)) < 1e-13:
            break
        J = np.empty((n, n))
        h = 1e-7
        for j in range(n):
            e = np.zeros(n)
            e[j] = h
            J[:, j] = ((elastic_forces(q + e, cfg) + input_gain(q + e, cfg) @ u)
                       - (elastic_forces(q - e, cfg) + input_gain(q - e, cfg) @ u)) / (2 * h)
        q = q - np.linalg.solve(J, F)
    return q


def workspace_radius(cfg):
    """Static horizontal tip reach with one input saturated at +1."""
    u = np.zeros(cfg.m_inputs)
    u[0] = 1.0
    q = static_deflection(cfg, u)
    return float(np.hypot(q[-3], q[-2]))
