"""``cassm`` command line: collect, fit, predict, track, diagnose.

Every command is driven by one JSON experiment config plus a seed.  Exit
codes: 0 success (a diverged closed-loop run is a valid outcome), 1 fit or
prediction failure, 2 I/O or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import linalg

from . import __version__
from .baselines import load_model, save_model
from .control import MpcConfig, closed_loop_run
from .exceptions import (CalibrationError, ConfigurationError, DivergenceError, NumericalError,
                         RankError)
from .experiments import (MODEL_KINDS, BenchmarkData, BenchmarkProtocol, fit_model,
                          generate_data, koopman_mpc_config, random_actuation, reference_for,
                          segment_rmse, summary_rows)
from .features import RandomFourierFeatures
from .manifold import ManifoldModel, invariance_residual, spectral_diagnostic
from .pipeline import Trajectory
from .plant import PlantConfig, augmented_matrix, linearize_plant, observation_matrix

log = logging.getLogger("cassm")

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2

DEFAULT_MODELS = ({"kind": "cassm", "params": {}},
                  {"kind": "ossm", "params": {"n_delays": 3, "ridge": 1e-4}},
                  {"kind": "koopman", "params": {"ridge": 1e-6}})
DEFAULT_REFERENCES = ({"shape": "circle", "fraction": 0.5, "omega": 0.5},
                      {"shape": "figure-eight", "fraction": 0.5, "omega": 0.5},
                      {"shape": "figure-eight", "fraction": 0.5, "omega": 1.0})


class InputError(Exception):
    """Missing or unreadable files (exit code 2)."""


@dataclass
class ExperimentConfig:
    plant: PlantConfig = field(default_factory=PlantConfig)
    protocol: BenchmarkProtocol = field(default_factory=BenchmarkProtocol)
    models: list = field(default_factory=lambda: [dict(m) for m in DEFAULT_MODELS])
    closedloop: list = field(default_factory=lambda: [dict(r) for r in DEFAULT_REFERENCES])
    mpc: MpcConfig = field(default_factory=MpcConfig)
    mpc_koopman: MpcConfig = field(default_factory=koopman_mpc_config)
    closedloop_noise_std: float = 2e-4
    closedloop_filter_q: float | None = 1e-3
    seed: int = 0
    out: str | None = None

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"openloop"}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        proto = dict(d.get("protocol", {}))
        proto.update(d.get("openloop", {}))
        try:
            cfg = cls(
                plant=PlantConfig.from_dict(d.get("plant", {})),
                protocol=BenchmarkProtocol(**proto),
                models=[dict(m) for m in d.get("models", DEFAULT_MODELS)],
                closedloop=[dict(r) for r in d.get("closedloop", DEFAULT_REFERENCES)],
                mpc=MpcConfig.from_dict(d["mpc"]) if "mpc" in d else MpcConfig(),
                mpc_koopman=(MpcConfig.from_dict(d["mpc_koopman"]) if "mpc_koopman" in d
                             else koopman_mpc_config()),
                closedloop_noise_std=float(d.get("closedloop_noise_std", 2e-4)),
                closedloop_filter_q=d.get("closedloop_filter_q", 1e-3),
                seed=int(d.get("seed", 0)),
                out=d.get("out"),
            )
        except TypeError as exc:
            raise ConfigurationError(f"invalid config: {exc}") from exc
        for m in cfg.models:
            if m.get("kind") not in MODEL_KINDS:
                raise ConfigurationError(f"unknown model kind {m.get('kind')!r}")
            m.setdefault("params", {})
        for r in cfg.closedloop:
            if r.get("shape") not in ("circle", "figure-eight"):
                raise ConfigurationError(f"unknown reference shape {r.get('shape')!r}")
        return cfg

    def with_seed(self, seed):
        self.seed = int(seed)
        self.protocol.seed = int(seed)
        return self

    def to_dict(self):
        return {"plant": self.plant.to_dict(), "protocol": asdict(self.protocol),
                "models": self.models, "closedloop": self.closedloop,
                "mpc": self.mpc.to_dict(), "mpc_koopman": self.mpc_koopman.to_dict(),
                "closedloop_noise_std": self.closedloop_noise_std,
                "closedloop_filter_q": self.closedloop_filter_q, "seed": self.seed}

    def hash(self):
        blob = json.dumps(_jsonable(self.to_dict()), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    return obj


def load_config(path):
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as fh:
            return ExperimentConfig.from_dict(json.load(fh))
    except FileNotFoundError as exc:
        raise InputError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows, fmt="%.10g"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(rows, dtype=float).reshape(-1, len(header)), delimiter=",",
               header=",".join(header), comments="", fmt=fmt)


def _stamp(cfg, report):
    report["config_hash"] = cfg.hash()
    report["version"] = __version__
    report["seed"] = cfg.seed
    return report


def _eig_pairs(M):
    ev = linalg.eigvals(np.atleast_2d(M))
    ev = ev[np.lexsort((ev.imag, ev.real))]
    return [[float(e.real), float(e.imag)] for e in ev]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_collect(cfg, out):
    """Decay and calibration trajectories (smoothed) plus a manifest."""
    data_dir = Path(out) / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    proto = cfg.protocol
    if proto.n_decays == 0:
        data = BenchmarkData([], [], [], None, None, proto)
        calib = []
    else:
        data = generate_data(cfg.plant, proto)
        calib = data.calibration
    entries = []
    for group, trajs in (("decay", data.train), ("calibration", calib)):
        for i, tr in enumerate(trajs):
            name = f"{group}_{i:03d}.csv"
            tr.to_csv(data_dir / name)
            entries.append({"file": name, "group": group, "seed": tr.meta.get("seed"),
                            "release": tr.meta.get("release"), "samples": len(tr)})
    manifest = _stamp(cfg, {"command": "collect", "files": entries,
                            "smoothing_q": proto.smoothing_q, "noise_std": proto.noise_std,
                            "dt": proto.dt})
    _write_json(data_dir / "manifest.json", manifest)
    return EXIT_OK, manifest


def _read_data(data_dir):
    data_dir = Path(data_dir)
    try:
        manifest = json.loads((data_dir / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise InputError(f"no manifest in {data_dir}; run 'cassm collect' first") from exc
    groups = {"decay": [], "calibration": []}
    for e in manifest["files"]:
        path = data_dir / e["file"]
        if not path.exists():
            raise InputError(f"missing trajectory file {path}")
        meta = {k: e[k] for k in ("release", "seed") if e.get(k) is not None}
        groups[e["group"]].append(Trajectory.from_csv(path, meta))
    return groups["decay"], groups["calibration"]


def _training_rmse_mm(model, trajs, limit=5):
    vals = []
    for tr in trajs[:limit]:
        res = segment_rmse(model, tr, segment_steps=1)
        if len(res.rmse) and not res.diverged.all():
            vals.append(res.mean_mm)
    return float(np.mean(vals)) if vals else None


def fit_report(cfg, kind, est, decays):
    model = est.model_
    rep = {"kind": kind, "dims": {"o": model.o, "m": model.m, "L": model.L,
                                  "n": int(getattr(model, "n", len(model.A) if kind == "koopman"
                                                   else model.V.shape[1]))},
           "train_one_step_rmse_mm": _training_rmse_mm(model, decays)}
    if hasattr(est, "explained_variance_ratio_"):
        rep["explained_variance_ratio"] = est.explained_variance_ratio_
    if kind == "cassm":
        A, A_u, Lam = linearize_plant(cfg.plant)
        rep["eig_lambda_hat"] = _eig_pairs(model.Lam)
        rep["eig_lambda_true"] = _eig_pairs(cfg.plant.lambda_true)
        rep["invariance_residual"] = invariance_residual(
            model, augmented_matrix(A, A_u, Lam), observation_matrix(cfg.plant),
            dt=cfg.protocol.dt)
        rep["spectral"] = spectral_diagnostic(model, (A, A_u, Lam)).to_dict()
    elif kind == "ossm":
        rep["eig_J0"] = _eig_pairs(model.J0)
    else:
        rep["spectral_radius"] = float(est.spectral_radius_)
    return rep


def cmd_fit(cfg, out, data_dir=None):
    decays, calib = _read_data(data_dir or Path(out) / "data")
    data = BenchmarkData(decays, decays, calib, None, None, cfg.protocol)
    models_dir = Path(out) / "models"
    reports, code = [], EXIT_OK
    for spec in cfg.models:
        kind = spec["kind"]
        try:
            est = fit_model(kind, data, spec["params"])
            save_model(est.model_, models_dir / f"{kind}.json")
            reports.append(fit_report(cfg, kind, est, decays))
        except (RankError, CalibrationError, NumericalError, ConfigurationError,
                np.linalg.LinAlgError) as exc:
            log.error("fit of %s failed: %s", kind, exc)
            reports.append({"kind": kind, "error": f"{type(exc).__name__}: {exc}"})
            code = EXIT_FAIL
    report = _stamp(cfg, {"command": "fit", "models": reports})
    _write_json(models_dir / "fit_report.json", report)
    return code, report


def _load_models(paths):
    models = {}
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise InputError(f"model file not found: {p}")
        models[p.stem] = load_model(p)
    return models


def _model_paths(cfg, out, explicit):
    if explicit:
        return explicit
    return [Path(out) / "models" / f"{m['kind']}.json" for m in cfg.models]


def cmd_predict(cfg, out, model_paths=None):
    models = _load_models(_model_paths(cfg, out, model_paths))
    test = random_actuation(cfg.plant, cfg.protocol, seed=[cfg.seed, 2])
    k_seg = cfg.protocol.segment_steps
    results, rows = {}, []
    for name, model in models.items():
        res = segment_rmse(model, test, k_seg)
        results[name] = res
        for j, (s0, r, d) in enumerate(zip(res.starts, res.rmse, res.diverged)):
            rows.append((name, j, int(s0), 1e3 * r, int(d)))
    pred_dir = Path(out) / "predict"
    pred_dir.mkdir(parents=True, exist_ok=True)
    with open(pred_dir / "segments.csv", "w") as fh:
        fh.write("model,segment,start,rmse_mm,diverged\n")
        for name, j, s0, r, d in rows:
            fh.write(f"{name},{j},{s0},{'' if np.isnan(r) else f'{r:.10g}'},{d}\n")
    table = summary_rows(results)
    with open(pred_dir / "summary.csv", "w") as fh:
        fh.write("model,mean_rmse_mm,median_rmse_mm,diverged_segments\n")
        for r in table:
            fh.write(f"{r['model']},{r['mean_rmse_mm']:.10g},{r['median_rmse_mm']:.10g},"
                     f"{r['diverged_segments']}\n")
    report = _stamp(cfg, {"command": "predict", "segment_steps": k_seg,
                          "n_segments": len(next(iter(results.values())).rmse) if results else 0,
                          "summary": table})
    _write_json(pred_dir / "summary.json", report)
    return EXIT_OK, report


def _reference_tag(kind, ref):
    return f"{kind}_{ref['shape']}_f{ref['fraction']:g}_w{ref['omega']:g}"


def cmd_track(cfg, out, model_paths=None, references=None):
    models = _load_models(_model_paths(cfg, out, model_paths))
    track_dir = Path(out) / "track"
    runs = []
    for name, model in models.items():
        mc = cfg.mpc_koopman if model.kind == "koopman" else cfg.mpc
        for ref_spec in references or cfg.closedloop:
            ref = reference_for(cfg.plant, ref_spec["shape"], ref_spec["fraction"],
                                ref_spec["omega"], dt=mc.dt, duration=ref_spec.get("duration"))
            res = closed_loop_run(cfg.plant, model, mc, ref.y,
                                  noise_std=cfg.closedloop_noise_std, seed=cfg.seed,
                                  filter_q=cfg.closedloop_filter_q)
            tag = _reference_tag(name, ref_spec)
            o, p, m = res.y.shape[1], res.y_ref.shape[1], res.u.shape[1]
            header = (["t"] + [f"y{i + 1}" for i in range(o)] + [f"yref{i + 1}" for i in range(p)]
                      + [f"u{i + 1}" for i in range(m)] + [f"uref{i + 1}" for i in range(m)]
                      + ["solve_ms", "scp_iters"])
            _write_csv(track_dir / f"{tag}.csv", header, res.log_table())
            summ = res.summary()
            summ.update({"tag": tag, "model": name, "reference": ref_spec,
                         "radius_m": ref.radius, "outcome": "Diverged" if res.diverged else "ok",
                         "budget_exceeded": summ["mean_solve_ms"] > 1e3 * mc.actuation_period})
            runs.append(summ)
    report = _stamp(cfg, {"command": "track", "runs": runs})
    _write_json(track_dir / "summary.json", report)
    return EXIT_OK, report


def kernel_check(fmap, n_pairs=100, seed=0):
    """Largest deviation of ``phi(x).phi(y)`` from the RBF kernel over seeded pairs."""
    rng = np.random.default_rng(seed)
    n, ls = fmap.n_features_in_, fmap.length_scale
    X = rng.normal(0.0, ls, size=(n_pairs, n))
    Y = X + rng.normal(0.0, 0.5 * ls, size=(n_pairs, n))
    approx = np.sum(fmap.transform(X) * fmap.transform(Y), axis=1)
    exact = np.exp(-np.sum((X - Y) ** 2, axis=1) / (2 * ls ** 2))
    return float(np.max(np.abs(approx - exact)))


def cmd_diagnose(cfg, out, model_path, with_plant=True):
    path = Path(model_path)
    if not path.exists():
        raise InputError(f"model file not found: {path}")
    model = load_model(path)
    rep = {"command": "diagnose", "model": str(path), "kind": model.kind,
           "dims": {"o": model.o, "m": model.m, "L": model.L}}
    if isinstance(model, ManifoldModel):
        rep["dims"]["n"] = model.n
        lin = linearize_plant(cfg.plant) if with_plant else None
        rep["spectral"] = spectral_diagnostic(model, lin).to_dict()
        rep["eig_lambda_hat"] = _eig_pairs(model.Lam)
        if lin is not None:
            rep["invariance_residual"] = invariance_residual(
                model, augmented_matrix(*lin), observation_matrix(cfg.plant), dt=cfg.protocol.dt)
        rep["kernel_check"] = {name: kernel_check(fm) for name, fm in
                               (("w", model.w_map), ("r", model.r_map))
                               if isinstance(fm, RandomFourierFeatures)}
    elif model.kind == "ossm":
        rep["eig_J0"] = _eig_pairs(model.J0)
    else:
        rep["spectral_radius"] = float(np.max(np.abs(linalg.eigvals(model.A))))
    return EXIT_OK, _stamp(cfg, rep)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="cassm", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="experiment config JSON (defaults built in)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (else $CASSM_OUT, config 'out', ./cassm_out)")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("collect", help="generate decay and calibration data")
    f = sub.add_parser("fit", help="fit every configured model")
    f.add_argument("--data", help="data directory (default OUT/data)")
    pr = sub.add_parser("predict", help="open-loop segment benchmark")
    pr.add_argument("--models", nargs="+", help="model JSON files (default OUT/models/*)")
    t = sub.add_parser("track", help="closed-loop MPC tracking on the simulated plant")
    t.add_argument("--models", nargs="+")
    t.add_argument("--shape", choices=("circle", "figure-eight"))
    t.add_argument("--fraction", type=float, default=0.5)
    t.add_argument("--omega", type=float, default=0.5)
    d = sub.add_parser("diagnose", help="spectral and invariance diagnostics for a model")
    d.add_argument("model")
    d.add_argument("--no-plant", action="store_true", help="skip plant-based checks")
    return p


def resolve_out(args, cfg):
    return Path(args.out or os.environ.get("CASSM_OUT") or cfg.out or "cassm_out")


def _print_human(report):
    cmd = report.get("command")
    if cmd == "predict":
        for r in report["summary"]:
            print(f"{r['model']:>10}  mean {r['mean_rmse_mm']:.3f} mm  "
                  f"median {r['median_rmse_mm']:.3f} mm  diverged {r['diverged_segments']}")
    elif cmd == "track":
        for r in report["runs"]:
            rm = "Diverged" if r["diverged"] else f"{r['rmse_mm']:.3f} mm"
            print(f"{r['tag']}: {rm}  solve {r['mean_solve_ms']:.1f} ms"
                  + ("  [over budget]" if r["budget_exceeded"] else ""))
    elif cmd == "fit":
        for r in report["models"]:
            print(f"{r['kind']}: " + (r["error"] if "error" in r else "ok"))
    elif cmd == "collect":
        print(f"{len(report['files'])} trajectories written")
    else:
        print(json.dumps(_jsonable(report), indent=2, sort_keys=True))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.with_seed(args.seed)
        out = resolve_out(args, cfg)
        if args.command == "collect":
            code, report = cmd_collect(cfg, out)
        elif args.command == "fit":
            code, report = cmd_fit(cfg, out, args.data)
        elif args.command == "predict":
            code, report = cmd_predict(cfg, out, args.models)
        elif args.command == "track":
            refs = None
            if args.shape:
                refs = [{"shape": args.shape, "fraction": args.fraction, "omega": args.omega}]
            code, report = cmd_track(cfg, out, args.models, refs)
        else:
            code, report = cmd_diagnose(cfg, out, args.model, not args.no_plant)
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (RankError, CalibrationError, NumericalError, DivergenceError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if args.json:
        print(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    else:
        _print_human(report)
    return code


if __name__ == "__main__":
    sys.exit(main())
