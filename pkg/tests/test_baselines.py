import numpy as np
import pytest
from scipy import linalg

from cassm.baselines import OSSM, Koopman, load_model, save_model
from cassm.exceptions import CalibrationError, ConfigurationError
from cassm.experiments import BenchmarkProtocol, fit_model, generate_data, segment_rmse
from cassm.manifold import CaSSM, fit_subspace
from cassm.pipeline import Trajectory, build_dataset, staircase
from cassm.plant import PlantConfig

from conftest import TUNED


def _linear_system_data(A, B, dt, n_traj=6, T=300, seed=0):
    n, m = B.shape
    M = linalg.expm(np.block([[A, B], [np.zeros((m, n + m))]]) * dt)
    Ad, Bd = M[:n, :n], M[:n, n:]
    trajs = []
    for i in range(n_traj):
        U = staircase(T, m, dt, hold=0.1, bound=1.0, seed=[seed, i])
        X = np.zeros((T, n))
        for k in range(T - 1):
            X[k + 1] = Ad @ X[k] + Bd @ U[k]
        trajs.append(Trajectory(dt * np.arange(T), X, np.zeros((T, m)), U, dt, {"pre_roll": 1}))
    return trajs, Ad, Bd


def test_ossm_requires_calibration(bench):
    for calib in (None, []):
        with pytest.raises(CalibrationError, match="calibration"):
            OSSM().fit(bench.train, calib)


def test_slow_actuators_favour_cassm(fitted, bench):
    ca = segment_rmse(fitted["cassm"].model_, bench.test).mean_mm
    os_ = segment_rmse(fitted["ossm"].model_, bench.test).mean_mm
    assert os_ > ca


@pytest.mark.slow
def test_fast_actuators_ossm_within_factor_two():
    # at |Lambda| = 200 the decays must be sampled at 5 ms for the actuator
    # transient to be resolved; segments keep the 0.1 s horizon
    cfg = PlantConfig.linear_variant(lambda_true=-200.0 * np.eye(2))
    dt, seg = 0.005, 20
    data = generate_data(cfg, BenchmarkProtocol(dt=dt, segment_steps=seg,
                                                calibration_steps=int(10 / dt)))
    ca = fit_model("cassm", data, TUNED["cassm"])
    os_ = fit_model("ossm", data, TUNED["ossm"])
    ev = linalg.eigvals(ca.Lambda_)
    assert np.all(np.abs(ev / -200.0 - 1) < 0.05)
    r_ca = segment_rmse(ca.model_, data.test, seg)
    r_os = segment_rmse(os_.model_, data.test, seg)
    assert r_ca.n_diverged == 0 and r_os.n_diverged == 0
    assert r_os.mean_mm <= 2 * r_ca.mean_mm


def test_unresolved_fast_actuator_warns():
    cfg = PlantConfig.linear_variant(lambda_true=-200.0 * np.eye(2))
    data = generate_data(cfg, BenchmarkProtocol(n_decays=8, n_calibration=1, total_s=1.0))
    with pytest.warns(RuntimeWarning, match="not resolved"):
        CaSSM(**TUNED["cassm"]).fit(data.train)


def test_koopman_degree_one_is_exact_discretization():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4)) - 2.5 * np.eye(4)
    B = rng.normal(size=(4, 2))
    dt = 0.02
    trajs, Ad, Bd = _linear_system_data(A, B, dt)
    est = Koopman(n_delays=1, degree=1, ridge=1e-12).fit(trajs)
    assert est.model_.n == 4
    assert np.max(np.abs(est.model_.A - Ad)) < 1e-4
    np.testing.assert_allclose(est.model_.B * est.model_.normalizer.scale[0], Bd, atol=1e-4)


def test_koopman_spectral_radius_warning():
    A = np.diag([0.5, -1.0, -2.0])
    trajs, _, _ = _linear_system_data(A, np.eye(3)[:, :1], 0.02, T=100)
    with pytest.warns(RuntimeWarning, match="spectral radius"):
        est = Koopman(n_delays=1, degree=1, ridge=1e-12).fit(trajs)
    assert est.spectral_radius_ > 1 + 1e-6


def test_koopman_lifted_dimension(fitted):
    # 9 markers x 2 lags, quadratic lifting: 18 + C(19, 2)
    assert fitted["koopman"].model_.n == 18 + 171


def test_koopman_lift_guard(bench):
    with pytest.raises(ConfigurationError, match="lifted dimension"):
        Koopman(n_delays=10, degree=3).fit(bench.train, bench.calibration)


def test_koopman_residual_non_increasing(bench):
    res = [Koopman(n_delays=1, degree=d, ridge=1e-10).fit(bench.train, bench.calibration).residual_
           for d in (1, 2, 3)]
    assert res[0] >= res[1] >= res[2]


def test_koopman_rejects_other_rates(fitted):
    m = fitted["koopman"].model_
    with pytest.raises(ConfigurationError):
        m.step(np.zeros(m.n), np.zeros((1, 2)), 0.01)


@pytest.mark.parametrize("kind", ["cassm", "ossm", "koopman"])
def test_rest_state_is_fixed_point(kind, fitted):
    m = fitted[kind].model_
    c = m.normalizer.center
    p = m.o if not m.uses_actuator_state else m.o + m.m
    Y = np.array([c[k * p:k * p + m.o] for k in range(m.L)])
    U = np.zeros((m.L, m.m))
    Yp = m.predict_from_history(Y, U, np.zeros((25, m.m)), 0.02)
    assert np.max(np.abs(Yp - Y[0])) < 1e-12


def test_divergence_ranking(fitted, bench):
    d = {k: segment_rmse(fitted[k].model_, bench.test).n_diverged for k in fitted}
    assert d["koopman"] >= d["ossm"] >= d["cassm"]


def test_shared_pca_path(bench, fitted):
    ds = build_dataset(bench.train, 2)
    V, _ = fit_subspace(ds.X, 7)
    np.testing.assert_array_equal(V, fitted["cassm"].model_.V)


@pytest.mark.parametrize("kind", ["ossm", "koopman"])
def test_baseline_round_trip(kind, fitted, bench, tmp_path):
    m = fitted[kind].model_
    save_model(m, tmp_path / f"{kind}.json")
    back = load_model(tmp_path / f"{kind}.json")
    a = segment_rmse(m, bench.test, n_segments=20).rmse
    b = segment_rmse(back, bench.test, n_segments=20).rmse
    np.testing.assert_array_equal(a, b)


def test_load_model_reports_path(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{"version": "ossm-model/1", "dims": {}}')
    with pytest.raises(ConfigurationError, match="broken.json"):
        load_model(p)
    p.write_text("not json")
    with pytest.raises(ConfigurationError, match="broken.json"):
        load_model(p)
