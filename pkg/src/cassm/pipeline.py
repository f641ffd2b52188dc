"""Data generation and preprocessing: decay collection, RTS smoothing, delay
embedding, derivative estimation and dataset splitting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import plant as pl
from .exceptions import ConfigurationError, IntegrationError, NumericalError

log = logging.getLogger(__name__)


@dataclass
class Trajectory:
    """Uniformly sampled record of observations, actuator states and commands.

    Row ``k`` holds ``y(t_k)``, ``u(t_k)`` and the command ``u_ref`` applied on
    ``[t_k, t_k + dt)``.  ``states`` optionally keeps the full plant state for
    oracle checks and is never serialized.
    """

    t: np.ndarray
    y: np.ndarray
    u: np.ndarray
    u_ref: np.ndarray
    dt: float
    meta: dict = field(default_factory=dict)
    states: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.u_ref = np.atleast_2d(np.asarray(self.u_ref, dtype=float))
        T = len(self.t)
        if not (len(self.y) == len(self.u) == len(self.u_ref) == T):
            raise ConfigurationError("trajectory arrays have inconsistent lengths")
        if T > 1 and np.max(np.abs(np.diff(self.t) - self.dt)) > 1e-9:
            raise ConfigurationError("trajectory timestamps are not uniform")

    def __len__(self):
        return len(self.t)

    @property
    def o(self):
        return self.y.shape[1]

    @property
    def m(self):
        return self.u.shape[1]

    @property
    def samples(self):
        return [pl.Observation(self.y[k], self.u[k], self.u_ref[k], self.t[k])
                for k in range(len(self))]

    def slice(self, start, stop=None):
        s = slice(start, stop)
        return Trajectory(self.t[s], self.y[s], self.u[s], self.u_ref[s], self.dt,
                          dict(self.meta),
                          None if self.states is None else self.states[s])

    def with_y(self, y):
        return Trajectory(self.t, y, self.u, self.u_ref, self.dt, dict(self.meta), self.states)

    def header(self):
        return (["t"] + [f"y{i + 1}" for i in range(self.o)]
                + [f"u{i + 1}" for i in range(self.m)]
                + [f"uref{i + 1}" for i in range(self.m)])

    def to_csv(self, path):
        data = np.column_stack([self.t, self.y, self.u, self.u_ref])
        np.savetxt(path, data, delimiter=",", header=",".join(self.header()),
                   comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path, meta=None):
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        o = sum(1 for h in header if h.startswith("y"))
        m = sum(1 for h in header if h.startswith("uref"))
        if header[0] != "t" or len(header) != 1 + o + 2 * m:
            raise ConfigurationError(f"{path}: unexpected trajectory header")
        t = data[:, 0]
        dt = float(t[1] - t[0]) if len(t) > 1 else 0.02
        return cls(t, data[:, 1:1 + o], data[:, 1 + o:1 + o + m], data[:, 1 + o + m:],
                   round(dt, 12), dict(meta or {}))


def simulate(cfg, u_ref, dt, x0=None, noise_std=0.0, rng=None, t0=0.0, meta=None,
             keep_states=False):
    """Simulate the plant under a sampled command sequence ``u_ref`` of shape (T, m)."""
    u_ref = np.atleast_2d(np.asarray(u_ref, dtype=float))
    if u_ref.shape[1] != cfg.m_inputs:
        raise ConfigurationError("u_ref width does not match m_inputs")
    T = len(u_ref)
    x = pl.equilibrium(cfg).to_vector() if x0 is None else np.asarray(x0, dtype=float).copy()
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    nq = cfg.n_q
    states = np.empty((T, cfg.n_state))
    for k in range(T):
        states[k] = x
        x = pl.advance(x, u_ref[k], dt, cfg, t=t0 + k * dt)
    y = cfg.reference_positions[cfg.obs_index] + states[:, cfg.obs_index]
    if noise_std > 0:
        y = y + rng.normal(0.0, noise_std, size=y.shape)
    t = t0 + dt * np.arange(T)
    traj = Trajectory(t, y, states[:, 2 * nq:], u_ref, dt, dict(meta or {}),
                      states if keep_states else None)
    traj.meta["final_state"] = x.tolist() if keep_states else None
    return traj


# -- decay collection ---------------------------------------------------------

@dataclass
class DecayProtocol:
    n_traj: int = 30
    pulse_duration: float = 0.4
    pulse_magnitude: float = 1.0
    direction_seed: int = 0
    record_horizon: float = 4.0
    pre_roll: float = 0.1
    dt: float = 0.02
    noise_std: float = 2e-4
    input_bound: float = 1.0


class DecayCollection(list):
    """List of trajectories that also reports how many runs were discarded."""

    n_discarded = 0


def collect_decays(cfg, protocol=None, **overrides):
    """Pulse the actuators in random directions, release, record the decay.

    Each trajectory: ``pre_roll`` seconds at rest, a ``u_ref`` pulse of the given
    magnitude along a random unit direction held for ``pulse_duration``, then
    ``u_ref = 0`` for ``record_horizon``.  ``meta['release']`` is the index of
    the first sample after release.
    """
    p = protocol or DecayProtocol()
    if overrides:
        p = DecayProtocol(**{**p.__dict__, **overrides})
    if p.pulse_magnitude > p.input_bound * np.sqrt(cfg.m_inputs) + 1e-12:
        raise ConfigurationError("pulse magnitude exceeds actuator bounds")
    n_pre = int(round(p.pre_roll / p.dt))
    n_pulse = int(round(p.pulse_duration / p.dt))
    n_rec = int(round(p.record_horizon / p.dt))
    seeds = np.random.SeedSequence(p.direction_seed).spawn(max(p.n_traj, 1))
    out = DecayCollection()
    for i in range(p.n_traj):
        rng = np.random.default_rng(seeds[i])
        d = rng.normal(size=cfg.m_inputs)
        d /= np.linalg.norm(d)
        level = np.clip(p.pulse_magnitude * d, -p.input_bound, p.input_bound)
        u_ref = np.zeros((n_pre + n_pulse + n_rec, cfg.m_inputs))
        u_ref[n_pre:n_pre + n_pulse] = level
        meta = {"protocol": "decay", "seed": [p.direction_seed, i],
                "release": n_pre + n_pulse, "pre_roll": n_pre,
                "direction": d.tolist()}
        try:
            traj = simulate(cfg, u_ref, p.dt, noise_std=p.noise_std, rng=rng, meta=meta)
        except IntegrationError as exc:
            log.warning("decay %d discarded: %s", i, exc)
            out.n_discarded += 1
            continue
        out.append(traj)
    if out.n_discarded:
        log.warning("%d of %d decay trajectories discarded", out.n_discarded, p.n_traj)
    return out


def staircase(n_steps, m, dt, hold=0.25, bound=1.0, seed=0):
    """Per-input random staircase; levels uniform in ``[-bound, bound]`` every ``hold`` s."""
    rng = np.random.default_rng(seed)
    per = max(int(round(hold / dt)), 1)
    n_levels = -(-n_steps // per)
    levels = rng.uniform(-bound, bound, size=(n_levels, m))
    return np.repeat(levels, per, axis=0)[:n_steps]


# -- smoothing -------------------------------------------------------------------

def kalman_rts_smooth(traj, q_noise, r_noise, v0=1.0):
    """Constant-velocity Kalman filter + Rauch-Tung-Striebel smoother on ``y``.

    ``q_noise`` is the white-acceleration spectral density, ``r_noise`` the
    measurement variance.  Every coordinate shares the same model, so the
    covariance recursion runs once and the gains are applied column-wise.
    Actuator channels are passed through untouched.
    """
    if q_noise <= 0 or r_noise <= 0:
        raise ConfigurationError("q_noise and r_noise must be positive")
    Y = traj.y
    T = len(Y)
    dt = traj.dt
    F = np.array([[1.0, dt], [0.0, 1.0]])
    Q = q_noise * np.array([[dt ** 3 / 3, dt ** 2 / 2], [dt ** 2 / 2, dt]])
    xs = np.empty((T, 2, Y.shape[1]))
    Ps = np.empty((T, 2, 2))
    xp = np.empty_like(xs)
    Pp = np.empty_like(Ps)
    x = np.vstack([Y[0], np.zeros(Y.shape[1])])
    P = np.diag([r_noise, v0])
    for k in range(T):
        if k > 0:
            x = F @ x
            P = F @ P @ F.T + Q
        xp[k], Pp[k] = x, P
        S = P[0, 0] + r_noise
        K = P[:, 0] / S
        x = x + np.outer(K, Y[k] - x[0])
        P = P - np.outer(K, P[0])
        if not np.all(np.isfinite(P)):
            raise NumericalError(f"non-finite covariance at sample {k}", index=k)
        xs[k], Ps[k] = x, P
    for k in range(T - 2, -1, -1):
        C = Ps[k] @ F.T @ np.linalg.inv(Pp[k + 1])
        xs[k] = xs[k] + C @ (xs[k + 1] - xp[k + 1])
        Ps[k] = Ps[k] + C @ (Ps[k + 1] - Pp[k + 1]) @ C.T
        if not np.all(np.isfinite(Ps[k])):
            raise NumericalError(f"non-finite covariance at sample {k}", index=k)
    return traj.with_y(xs[:, 0, :])


class ConstantVelocityFilter:
    """Causal counterpart of :func:`kalman_rts_smooth` for streaming use.

    Same per-coordinate constant-velocity model; ``update`` consumes one
    measurement row and returns the filtered position estimate.
    """

    def __init__(self, dt, q_noise, r_noise, v0=1.0):
        if q_noise <= 0 or r_noise <= 0:
            raise ConfigurationError("q_noise and r_noise must be positive")
        self.F = np.array([[1.0, dt], [0.0, 1.0]])
        self.Q = q_noise * np.array([[dt ** 3 / 3, dt ** 2 / 2], [dt ** 2 / 2, dt]])
        self.r, self.v0 = r_noise, v0
        self.x = None

    def update(self, y):
        y = np.asarray(y, dtype=float)
        if self.x is None:
            self.x = np.vstack([y, np.zeros_like(y)])
            self.P = np.diag([self.r, self.v0])
        else:
            self.x = self.F @ self.x
            self.P = self.F @ self.P @ self.F.T + self.Q
        K = self.P[:, 0] / (self.P[0, 0] + self.r)
        self.x = self.x + np.outer(K, y - self.x[0])
        self.P = self.P - np.outer(K, self.P[0])
        return self.x[0].copy()


# -- embedding and derivatives ------------------------------------------------------

def embed_array(X, L):
    """Stack lags: row ``i`` is ``[X[i+L-1]; X[i+L-2]; ...; X[i]]`` (lag 0 first)."""
    X = np.atleast_2d(X)
    if L < 1:
        raise ConfigurationError("embedding depth L must be >= 1")
    T = len(X)
    if T < L:
        raise ConfigurationError(f"trajectory of length {T} too short for L = {L}")
    return np.hstack([X[L - 1 - k:T - k] for k in range(L)])


def delay_embed(traj, L):
    """Delay-embedded observed augmented states, shape ``(T - L + 1, L (o + m))``.

    Block ``k`` (``k = 0..L-1``) of each row is ``[y(t - k dt); u(t - k dt)]``.
    """
    if L < 1:
        raise ConfigurationError("embedding depth L must be >= 1")
    if len(traj) < L:
        raise ConfigurationError(f"trajectory of length {len(traj)} too short for L = {L}")
    return embed_array(np.hstack([traj.y, traj.u]), L)


def embedded_commands(traj, L):
    """Command history aligned with :func:`delay_embed`: rows ``[u_ref(t); ...; u_ref(t-(L-1)dt)]``."""
    return embed_array(traj.u_ref, L)


def estimate_derivatives(Z, dt):
    """Fourth-order central differences inside, second-order one-sided at the ends."""
    Z = np.asarray(Z, dtype=float)
    squeeze = Z.ndim == 1
    Z = Z.reshape(len(Z), -1)
    T = len(Z)
    if T < 5:
        raise ConfigurationError("need at least 5 samples for derivative estimation")
    D = np.empty_like(Z)
    D[2:-2] = (-Z[4:] + 8 * Z[3:-1] - 8 * Z[1:-3] + Z[:-4]) / (12 * dt)
    for k in (0, 1):
        D[k] = (-3 * Z[k] + 4 * Z[k + 1] - Z[k + 2]) / (2 * dt)
    for k in (T - 2, T - 1):
        D[k] = (3 * Z[k] - 4 * Z[k - 1] + Z[k - 2]) / (2 * dt)
    return D[:, 0] if squeeze else D


# -- datasets ------------------------------------------------------------------

@dataclass
class Normalizer:
    """Affine map ``x_n = (x - center) / scale`` with per-coordinate scales."""

    center: np.ndarray
    scale: np.ndarray

    def transform(self, X):
        return (np.asarray(X) - self.center) / self.scale

    def inverse_transform(self, Xn):
        return np.asarray(Xn) * self.scale + self.center

    def to_dict(self):
        return {"center": self.center.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["center"], dtype=float), np.array(d["scale"], dtype=float))


def group_scales(o, m, L, y_scale, u_scale):
    """One scale for all position coordinates and one for all actuator channels."""
    return np.tile(np.concatenate([np.full(o, y_scale), np.full(m, u_scale)]), L)


def rest_state(trajectories):
    """Mean observed augmented rest state over pre-roll samples (or first samples)."""
    rows = []
    for tr in trajectories:
        n = max(int(tr.meta.get("pre_roll", 1)), 1)
        rows.append(np.hstack([tr.y[:n], tr.u[:n]]))
    return np.vstack(rows).mean(axis=0)


def split_trajectories(trajectories, fractions=(0.7, 0.15, 0.15), seed=0):
    """Trajectory-disjoint train / validation / test split."""
    n = len(trajectories)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    pick = lambda idx: [trajectories[i] for i in sorted(idx)]  # noqa: E731
    return (pick(order[:n_train]), pick(order[n_train:n_train + n_val]),
            pick(order[n_train + n_val:]))


@dataclass
class Dataset:
    """Embedded, release-phase training data in normalized deviation coordinates."""

    X: np.ndarray
    Xdot: np.ndarray
    traj_id: np.ndarray
    normalizer: Normalizer
    L: int
    o: int
    m: int


def release_segments(trajectories, L):
    """Yield ``(trajectory index, embedded rows, commands)`` for the decay phase.

    Every lag block of every emitted row lies after the release, so ``u_ref``
    is zero throughout.
    """
    for i, tr in enumerate(trajectories):
        seg = tr.slice(int(tr.meta.get("release", 0)))
        if len(seg) < L + 4:
            continue
        yield i, delay_embed(seg, L), embedded_commands(seg, L)


def build_dataset(trajectories, L, center=None, y_scale=None, u_scale=None, smooth=None):
    """Embed release phases, normalize, and estimate time derivatives.

    ``smooth`` is an optional ``(q_noise, r_noise)`` pair applied per trajectory
    before embedding.
    """
    if smooth is not None:
        trajectories = [kalman_rts_smooth(tr, *smooth) for tr in trajectories]
    if center is None:
        center = np.tile(rest_state(trajectories), L)
    o, m = trajectories[0].o, trajectories[0].m
    blocks, ids = [], []
    for i, E, _ in release_segments(trajectories, L):
        blocks.append(E)
        ids.append(np.full(len(E) - 4, i))
    if not blocks:
        raise ConfigurationError("no release-phase data long enough to embed")
    # only rows with fourth-order central differences enter the fit
    raw = np.vstack([E[2:-2] for E in blocks])
    dev = raw - center
    if y_scale is None:
        y_cols = np.concatenate([np.arange(k * (o + m), k * (o + m) + o) for k in range(L)])
        y_scale = float(np.sqrt(np.mean(dev[:, y_cols] ** 2)))
    if u_scale is None:
        u_cols = np.concatenate([np.arange(k * (o + m) + o, (k + 1) * (o + m)) for k in range(L)])
        u_scale = float(np.sqrt(np.mean(dev[:, u_cols] ** 2)))
    norm = Normalizer(np.asarray(center, dtype=float), group_scales(o, m, L, y_scale, u_scale))
    X = norm.transform(raw)
    Xdot = np.vstack([estimate_derivatives(norm.transform(E), trajectories[0].dt)[2:-2]
                      for E in blocks])
    return Dataset(X, Xdot, np.concatenate(ids), norm, L, o, m)
