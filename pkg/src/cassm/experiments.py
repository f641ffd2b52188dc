"""Benchmark harness: shared datasets, validation tuning, open-loop segment
benchmark and closed-loop tracking references."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import OSSM, Koopman
from .control import MpcConfig, closed_loop_run
from .exceptions import ConfigurationError, DivergenceError
from .manifold import CaSSM
from .pipeline import DecayProtocol, collect_decays, kalman_rts_smooth, simulate, staircase
from .plant import equilibrium, observe, tip_index, workspace_radius

MODEL_KINDS = ("cassm", "ossm", "koopman")
ESTIMATORS = {"cassm": CaSSM, "ossm": OSSM, "koopman": Koopman}

# validation grids; first entry doubles as the untuned default
GRIDS = {
    "cassm": [{"length_scale": ls, "ridge": r} for ls in (20.0, 40.0) for r in (1e-4, 1e-3)],
    "ossm": [{"ridge": r, "n_delays": L} for L in (2, 3) for r in (1e-6, 1e-4, 1e-2)],
    "koopman": [{"ridge": r} for r in (1e-8, 1e-6, 1e-4, 1e-3)],
}


@dataclass
class BenchmarkProtocol:
    """Data-generation and segment-protocol constants (seeded)."""

    n_decays: int = 30
    noise_std: float = 2e-4
    smoothing_q: float | None = 1.0
    n_calibration: int = 10
    calibration_steps: int = 500
    calibration_hold: float = 0.5
    calibration_bound: float = 0.5
    total_s: float = 15.0
    segment_steps: int = 5
    dt: float = 0.02
    test_hold: float = 0.25
    test_bound: float = 1.0
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class BenchmarkData:
    decays: list
    train: list
    calibration: list
    validation: object
    test: object
    protocol: BenchmarkProtocol


def _smooth(trajs, proto):
    if proto.smoothing_q is None or proto.noise_std <= 0:
        return list(trajs)
    return [kalman_rts_smooth(t, proto.smoothing_q, proto.noise_std ** 2) for t in trajs]


def random_actuation(cfg, proto, seed, steps=None):
    """Plant response to a seeded random staircase, measured with noise."""
    steps = steps or int(round(proto.total_s / proto.dt))
    U = staircase(steps, cfg.m_inputs, proto.dt, proto.test_hold, proto.test_bound, seed)
    rng = np.random.default_rng([proto.seed, seed, 7])
    return simulate(cfg, U, proto.dt, noise_std=proto.noise_std, rng=rng,
                    meta={"protocol": "random-actuation", "seed": np.atleast_1d(seed).tolist()})


def generate_data(cfg, proto=None):
    proto = proto or BenchmarkProtocol()
    decays = collect_decays(cfg, DecayProtocol(n_traj=proto.n_decays, dt=proto.dt,
                                               noise_std=proto.noise_std,
                                               direction_seed=proto.seed))
    calib = []
    for i in range(proto.n_calibration):
        U = staircase(proto.calibration_steps, cfg.m_inputs, proto.dt, proto.calibration_hold,
                      proto.calibration_bound, seed=[proto.seed, 100 + i])
        calib.append(simulate(cfg, U, proto.dt, noise_std=proto.noise_std,
                              rng=np.random.default_rng([proto.seed, 200 + i]),
                              meta={"protocol": "calibration", "seed": i}))
    val = random_actuation(cfg, proto, seed=[proto.seed, 1])
    test = random_actuation(cfg, proto, seed=[proto.seed, 2])
    return BenchmarkData(list(decays), _smooth(decays, proto), _smooth(calib, proto), val, test,
                         proto)


# ---------------------------------------------------------------------------
# open loop
# ---------------------------------------------------------------------------

@dataclass
class SegmentResult:
    rmse: np.ndarray          # metres, nan where diverged
    diverged: np.ndarray      # bool
    starts: np.ndarray

    @property
    def mean_mm(self):
        ok = ~self.diverged
        return float(1e3 * np.mean(self.rmse[ok])) if ok.any() else float("nan")

    @property
    def median_mm(self):
        ok = ~self.diverged
        return float(1e3 * np.median(self.rmse[ok])) if ok.any() else float("nan")

    @property
    def n_diverged(self):
        return int(self.diverged.sum())


def segment_rmse(model, traj, segment_steps=5, n_segments=None):
    """Per-segment RMSE of open-loop predictions from measured start states.

    Segment ``j`` starts at sample ``j * segment_steps`` (the first start is
    shifted forward when the model needs more history) and predicts
    ``segment_steps`` samples; RMSE is over marker position vectors.
    """
    T = len(traj)
    n_segments = n_segments or (T - 1) // segment_steps
    L = model.L
    rmse, div, starts = [], [], []
    for j in range(n_segments):
        s0 = max(j * segment_steps, L - 1)
        if s0 + segment_steps >= T:
            break
        Yh = traj.y[s0 - L + 1:s0 + 1][::-1]
        Uh = traj.u[s0 - L + 1:s0 + 1][::-1]
        hist = traj.u_ref[max(0, s0 - L + 1):s0][::-1]
        starts.append(s0)
        try:
            Yp = model.predict_from_history(Yh, Uh, traj.u_ref[s0:s0 + segment_steps], traj.dt,
                                            u_hist=hist if len(hist) else None)
        except DivergenceError:
            rmse.append(np.nan)
            div.append(True)
            continue
        d = (Yp[1:] - traj.y[s0 + 1:s0 + segment_steps + 1]).reshape(segment_steps, -1, 3)
        rmse.append(float(np.sqrt(np.mean(np.sum(d ** 2, axis=2)))))
        div.append(False)
    return SegmentResult(np.array(rmse), np.array(div, dtype=bool), np.array(starts))


def fit_model(kind, data, params=None):
    if kind not in ESTIMATORS:
        raise ConfigurationError(f"unknown model kind {kind!r}")
    est = ESTIMATORS[kind](**(params or {}))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if kind == "cassm":
            est.fit(data.train)
        else:
            est.fit(data.train, data.calibration)
    return est


def tune(kind, data, grid=None):
    """Pick hyperparameters by mean segment RMSE on the validation sequence.

    Returns ``(estimator, params, table)``; diverged segments count as a
    penalty through the divergence count first.
    """
    grid = GRIDS[kind] if grid is None else grid
    table, best = [], None
    for params in grid:
        est = fit_model(kind, data, params)
        res = segment_rmse(est.model_, data.validation, data.protocol.segment_steps)
        key = (res.n_diverged, res.mean_mm)
        table.append({"params": params, "mean_rmse_mm": res.mean_mm,
                      "diverged": res.n_diverged})
        if best is None or key < best[0]:
            best = (key, est, params)
    return best[1], best[2], table


def open_loop_benchmark(models, traj, segment_steps=5):
    """``{name: SegmentResult}`` for already-fitted reduced models on ``traj``."""
    return {name: segment_rmse(m, traj, segment_steps) for name, m in models.items()}


def summary_rows(results):
    return [{"model": k, "mean_rmse_mm": r.mean_mm, "median_rmse_mm": r.median_mm,
             "diverged_segments": r.n_diverged} for k, r in results.items()]


# ---------------------------------------------------------------------------
# references and tracking
# ---------------------------------------------------------------------------

WORKSPACE_FRACTIONS = (0.30, 0.50, 0.65, 0.80)


@dataclass
class ReferenceTrajectory:
    shape: str
    center: np.ndarray
    radius: float
    omega: float
    duration: float
    t: np.ndarray
    y: np.ndarray            # (T, 3): tip x, y, z reference
    meta: dict = field(default_factory=dict)


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3 - 2 * s)


def make_reference(shape, center, radius, omega, duration=None, dt=0.02, ramp=1.0, height=0.0):
    """Circle ``c + r (cos wt, sin wt)`` or figure-eight ``c + r (sin wt, sin 2wt)``.

    The radius ramps in with a smoothstep over ``ramp`` seconds, so both
    shapes start at the centre.  Default duration is the ramp plus one
    period.
    """
    if shape not in ("circle", "figure-eight"):
        raise ConfigurationError(f"unknown reference shape {shape!r}")
    if radius < 0 or omega <= 0:
        raise ConfigurationError("radius must be >= 0 and omega > 0")
    duration = ramp + 2 * np.pi / omega if duration is None else duration
    t = np.arange(int(round(duration / dt)) + 1) * dt
    r = radius * (_smoothstep(t / ramp) if ramp > 0 else np.ones_like(t))
    if shape == "circle":
        xy = np.column_stack([np.cos(omega * t), np.sin(omega * t)]) * r[:, None]
    else:
        xy = np.column_stack([np.sin(omega * t), np.sin(2 * omega * t)]) * r[:, None]
    y = np.column_stack([center[0] + xy[:, 0], center[1] + xy[:, 1], np.full(len(t), height)])
    return ReferenceTrajectory(shape, np.asarray(center, dtype=float), radius, omega, duration, t, y)


def reference_for(cfg, shape, fraction, omega, dt=0.02, duration=None):
    """Reference around the tip rest position with radius = fraction of the workspace."""
    st = equilibrium(cfg)
    tip = observe(st, np.zeros(cfg.m_inputs), cfg).y[tip_index(cfg)]
    ref = make_reference(shape, tip[:2], fraction * workspace_radius(cfg), omega, duration, dt,
                         height=tip[2])
    ref.meta["fraction"] = fraction
    return ref


def run_tracking(cfg, model, ref, mpc_config=None, noise_std=2e-4, seed=0, filter_q=1e-3):
    mc = mpc_config or MpcConfig()
    return closed_loop_run(cfg, model, mc, ref.y, noise_std=noise_std, seed=seed,
                           filter_q=filter_q)


def koopman_mpc_config(**kw):
    base = dict(horizon=2, Q=(1.0, 1.0, 0.0), Q_f=(20.0, 20.0, 0.0), R_delta=(0.05, 0.05))
    base.update(kw)
    return MpcConfig(**base)
