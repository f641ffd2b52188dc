import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy import linalg

from cassm.experiments import BenchmarkProtocol, fit_model, generate_data
from cassm.manifold import CaSSM
from cassm.pipeline import DecayProtocol, Trajectory, collect_decays
from cassm.plant import PlantConfig, augmented_matrix, linearize_plant

# derandomized so two consecutive runs execute identical examples
settings.register_profile("repro", derandomize=True, deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repro")

ACCEPTANCE = {}

TUNED = {"cassm": {"length_scale": 40.0, "ridge": 1e-4},
         "ossm": {"n_delays": 3, "ridge": 1e-4},
         "koopman": {"ridge": 1e-6}}


def record(criterion, ok, detail):
    ACCEPTANCE[criterion] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def acceptance():
    return record


@pytest.fixture(scope="session")
def default_cfg():
    return PlantConfig()


@pytest.fixture(scope="session")
def linear_cfg():
    return PlantConfig.linear_variant()


@pytest.fixture(scope="session")
def linear_decays(linear_cfg):
    return collect_decays(linear_cfg, DecayProtocol(noise_std=0.0))


@pytest.fixture(scope="session")
def linear_l1(linear_decays):
    # unembedded decays of the linear variant span exactly 8 directions
    return CaSSM(n_components=8, n_delays=1, w_features="polynomial", r_features="polynomial",
                 poly_degree=2, ridge=1e-10).fit(linear_decays)


@pytest.fixture(scope="session")
def linear_l2(linear_decays):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return CaSSM(n_components=7, n_delays=2, ridge=1e-4, ref_mode="exact").fit(linear_decays)


@pytest.fixture(scope="session")
def bench(default_cfg):
    return generate_data(default_cfg, BenchmarkProtocol())


@pytest.fixture(scope="session")
def fitted(bench):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return {k: fit_model(k, bench, p) for k, p in TUNED.items()}


@pytest.fixture(scope="session")
def exact_subspace_model(linear_cfg):
    """Fully observed linear plant restricted to a 6-dim slow invariant subspace."""
    A, A_u, Lam = linearize_plant(linear_cfg)
    Aa = augmented_matrix(A, A_u, Lam)
    N, m = A.shape[0], Lam.shape[0]
    lam, P = linalg.eig(Aa)
    act = [i for i in range(len(lam)) if np.linalg.norm(P[N:, i]) > 1e-6 * np.linalg.norm(P[:, i])]
    mech = [i for i in np.argsort(-lam.real, kind="stable") if i not in act][:4]
    B = linalg.orth(np.hstack([P[:, mech + act].real, P[:, mech + act].imag]))
    assert B.shape[1] == 6
    dt, rng = 0.002, np.random.default_rng(0)
    E = linalg.expm(Aa * dt)
    trajs = []
    for _ in range(12):
        x = B @ rng.normal(size=6)
        x *= 0.01 / np.linalg.norm(x[:N])
        X = [np.zeros(N + m)] * 5 + [x]
        for _ in range(800):
            X.append(E @ X[-1])
        X = np.array(X)
        trajs.append(Trajectory(dt * np.arange(len(X)), X[:, :N], X[:, N:], np.zeros((len(X), m)),
                                dt, {"release": 5, "pre_roll": 5}))
    est = CaSSM(n_components=6, n_delays=1, w_features="polynomial", r_features="polynomial",
                poly_degree=2, ridge=1e-12).fit(trajs)
    return est.model_, Aa


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
