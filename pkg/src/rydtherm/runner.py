"""Run orchestration: backends, pipeline, sweeps and reproducibility manifests.

Outputs are staged in a scratch directory and moved into place only after
the computation has finished, so a failed run leaves at most its manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import shutil
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import (
    dominant_frequency,
    eth_diagnostics,
    interior_maxima,
    running_average,
    scaling_alpha,
)
from .census import BlockadeCensus, UnsupportedGraph, blockade_graph, count_only, enumerate_census
from .config import RunConfig, SCHEMA, ConfigParseError, ConfigValidationError, _convert
from .geometry import blockade_radius, build_chain, interaction_matrix
from .hamiltonian import SpinSystem
from .lindblad import NoiseModel, lindblad_evolve, monte_carlo_quench, samples_manifest
from .master_eq import (
    DegenerateDistribution,
    FitFailure,
    InsufficientData,
    MasterEquationModel,
    balance_ratios,
    census_rate_guess,
    fit_rates,
    integrate_master,
)
from .mps import NoConvergence, TruncationOverflow, tebd_evolve
from .statevec import ConvergenceFailure, EmptyWindow, default_t_relax, quench_evolve, steady_average

NUMERICAL_ERRORS = (
    ConvergenceFailure,
    NoConvergence,
    TruncationOverflow,
    FitFailure,
    DegenerateDistribution,
    InsufficientData,
    EmptyWindow,
    FloatingPointError,
    np.linalg.LinAlgError,
)


class NumericalFailure(RuntimeError):
    def __init__(self, message: str, manifest_path: Path | None = None):
        super().__init__(message)
        self.manifest_path = manifest_path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def build_system(cfg: RunConfig):
    geom = build_chain(cfg.N, cfg["geometry.d_um"], cfg.theta)
    V = interaction_matrix(geom, cfg["physics.C6_GHz_um6"], cfg["physics.v12_override_MHz"])
    sys = SpinSystem(V, 2 * math.pi * cfg["physics.omega_MHz"], 2 * math.pi * cfg["physics.delta_MHz"])
    rng = effective_range(cfg)
    if rng is not None:
        sys = sys.truncated(rng)
    return geom, V, sys


def effective_range(cfg: RunConfig) -> int | None:
    """Coupling range actually simulated (None = all pairs)."""
    rng = cfg["physics.interaction_range"]
    if rng is None and cfg.backend == "mps":
        return 2
    return rng


def census_for(cfg: RunConfig, geom, enumerate_configs: bool = False) -> dict | None:
    """Blockade census at the configured drive, or None without a drive."""
    omega = 2 * math.pi * cfg["physics.omega_MHz"]
    if omega <= 0:
        return None
    r_b = blockade_radius(cfg["physics.C6_GHz_um6"], omega)
    graph = blockade_graph(geom, r_b)
    out = {"r_B_um": r_b, "edges": len(graph.edges)}
    census = None
    if enumerate_configs:
        census = enumerate_census(graph)
        nu = list(census.nu)
    else:
        try:
            nu, _ = count_only(graph)
        except UnsupportedGraph:
            census = enumerate_census(graph)
            nu = list(census.nu)
    out["nu"] = [int(x) for x in nu]
    out["D"] = int(sum(nu))
    out["n_max"] = len(nu) - 1
    out["f_R_census"] = float(sum(n * c for n, c in enumerate(nu)) / (cfg.N * sum(nu)))
    out["_census"] = census
    return out


def noise_model(cfg: RunConfig) -> NoiseModel:
    return NoiseModel(
        gamma=2 * math.pi * cfg["backend.gamma_kHz"] * 1e-3,
        gamma_c=2 * math.pi * cfg["backend.gamma_c_kHz"] * 1e-3,
        omega0=cfg["backend.omega0_MHz"],
        d_omega=cfg["backend.d_omega_MHz"],
        delta0=cfg["backend.delta0_MHz"],
        d_delta=cfg["backend.d_delta_MHz"],
        shots=cfg["backend.shots"],
        seed=cfg["backend.seed"],
    )


def _monte_carlo(cfg: RunConfig) -> bool:
    return (cfg["backend.shots"] > 1 or cfg["backend.d_omega_MHz"] > 0 or cfg["backend.d_delta_MHz"] > 0
            or cfg["backend.omega0_MHz"] is not None or cfg["backend.delta0_MHz"] is not None)


def simulate(cfg: RunConfig, sys: SpinSystem, census: BlockadeCensus | None, threads: int = 1):
    """Dispatch to the configured backend; returns (trace, extra files {name: text})."""
    t_max, dt_out = cfg["schedule.t_max_us"], cfg["schedule.dt_out_us"]
    kind, method = cfg.backend, cfg["backend.method"]
    extra: dict[str, str] = {}
    if kind in ("ed", "lindblad") and _monte_carlo(cfg):
        noise = noise_model(cfg)
        trace = monte_carlo_quench(sys, noise, t_max, dt_out,
                                   backend="statevec" if kind == "ed" else "lindblad", workers=threads,
                                   max_step=cfg["backend.max_step_us"])
        extra["samples.json"] = samples_manifest(trace, noise)
    elif kind == "ed":
        trace = quench_evolve(sys, t_max, dt_out, method=method or "expm-krylov", census=census)
    elif kind == "lindblad":
        trace = lindblad_evolve(sys, noise_model(cfg), t_max, dt_out, method=method or "split",
                                max_step=cfg["backend.max_step_us"])
    else:
        res = tebd_evolve(sys, t_max, dt_out, chi_max=cfg["backend.chi_max"],
                          omega_dt=cfg["backend.omega_dt"], tol=cfg["backend.compress_tol"],
                          return_state=True)
        trace = res.trace
        extra["bonds.jsonl"] = res.bond_log_jsonl()
    return trace, extra


def conservation_summary(trace) -> dict:
    d = trace.diagnostics
    out = {"max_prob_sum_dev": float(np.abs(trace.P.sum(axis=1) - 1.0).max())}
    if "norm" in d:
        out["max_norm_dev"] = float(np.abs(np.asarray(d["norm"]) - 1.0).max())
    if "trace_dev" in d:
        out["max_trace_dev"] = float(np.max(d["trace_dev"]))
        out["min_population"] = float(np.min(d["min_population"]))
    if "norm_before" in d:
        out["max_norm_loss"] = float(np.max(1.0 - np.asarray(d["norm_before"])))
        out["min_fidelity"] = float(np.min(d["min_fidelity"]))
    return out


class _Stage:
    """Scratch directory whose files are moved into ``out_dir`` on commit."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.tmp = Path(tempfile.mkdtemp(prefix=".stage-"))
        self.files: list[str] = []

    def write_text(self, name: str, text: str) -> Path:
        path = self.tmp / name
        path.write_text(text)
        self.files.append(name)
        return path

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.tmp / name

    def digests(self) -> dict:
        return {name: sha256_file(self.tmp / name) for name in sorted(set(self.files))}

    def commit(self, manifest: dict) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name in sorted(set(self.files)):
            shutil.move(str(self.tmp / name), str(self.out_dir / name))
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(_jsonable(manifest), indent=2))
        self.discard()
        return path

    def discard(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def _manifest(cfg: RunConfig, command: str, derived: dict, started: float) -> dict:
    return {
        "command": command,
        "software": {
            "package": "rydtherm",
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "config": cfg.to_nested(),
        "seed": cfg["backend.seed"],
        "derived": derived,
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "status": "ok",
        "error": None,
        "outputs": {},
        "flags": [],
    }


def _derived(cfg: RunConfig, geom, V, sys, census_info: dict | None) -> dict:
    Vm = V.V / (2 * math.pi)
    N = cfg.N
    out = {
        "positions_um": geom.positions.tolist(),
        "V12_MHz": float(Vm[0, 1]) if N > 1 else None,
        "V13_MHz": float(Vm[0, 2]) if N > 2 else None,
        "V_max_MHz": float(Vm.max()) if N > 1 else None,
        "interaction_range": effective_range(cfg),
        "t_relax_us": t_relax_of(cfg),
    }
    if census_info is not None:
        out["census"] = {k: v for k, v in census_info.items() if not k.startswith("_")}
    return out


def t_relax_of(cfg: RunConfig) -> float:
    t = cfg["schedule.t_relax_us"]
    if t is None:
        t = default_t_relax(cfg.theta)
    return min(t, cfg["schedule.t_max_us"])


def _fail(stage: _Stage, manifest: dict, started: float, exc: Exception) -> NumericalFailure:
    manifest["status"] = "failed"
    manifest["error"] = f"{type(exc).__name__}: {exc}"
    manifest["wall_clock_s"] = time.time() - started
    stage.files.clear()
    path = stage.commit(manifest)
    return NumericalFailure(manifest["error"], path)


def execute_run(cfg: RunConfig, out_dir, threads: int = 1) -> dict:
    """Run one configuration; returns the manifest.  Raises NumericalFailure."""
    cfg.validate()
    started = time.time()
    geom, V, sys = build_system(cfg)
    census_info = census_for(cfg, geom, enumerate_configs=cfg["outputs.emit_cm2"])
    manifest = _manifest(cfg, "run", _derived(cfg, geom, V, sys, census_info), started)
    stage = _Stage(Path(out_dir))
    try:
        census = census_info["_census"] if (census_info and cfg["outputs.emit_cm2"]) else None
        trace, extra = simulate(cfg, sys, census, threads)
        trace.write_csv(stage.path("trace.csv"))
        if census is not None:
            trace.write_cm2_csv(stage.path("cm2.csv"))
        for name, text in extra.items():
            stage.write_text(name, text)
        analysis = analyse(cfg, trace, sys, census_info, stage)
        stage.write_text("analysis.json", json.dumps(_jsonable(analysis), indent=2))
        stage.write_text("config.txt", cfg.to_text())
    except NUMERICAL_ERRORS as exc:
        raise _fail(stage, manifest, started, exc) from exc
    except BaseException:
        stage.discard()
        raise
    manifest["diagnostics"] = conservation_summary(trace)
    manifest["outputs"] = stage.digests()
    manifest["wall_clock_s"] = time.time() - started
    stage.commit(manifest)
    return manifest


def analyse(cfg: RunConfig, trace, sys, census_info, stage: _Stage | None) -> dict:
    t_relax = t_relax_of(cfg)
    out: dict = {"N": cfg.N, "theta_deg": cfg.theta}
    if t_relax <= trace.times[-1]:
        st = steady_average(trace, t_relax)
        out.update(t_relax_us=t_relax, f_R_bar=st.f_R_bar, M2_bar=st.M2_bar, P_eq=st.P_eq)
        if st.Cm2_eq is not None:
            out["Cm2_eq_weight"] = float(st.Cm2_eq.sum())
    if cfg["physics.omega_MHz"] > 0:
        out["alpha"] = scaling_alpha(cfg["physics.omega_MHz"], cfg.theta, cfg["geometry.d_um"],
                                     cfg["physics.C6_GHz_um6"])
    if census_info is not None:
        out["f_R_census"] = census_info["f_R_census"]
    if cfg["analysis.frequency"]:
        out["dominant_frequency_MHz"] = dominant_frequency(trace, cfg["analysis.frequency_window_us"])
        out["frequency_window_us"] = list(cfg["analysis.frequency_window_us"])
    if cfg["analysis.eth"]:
        eth = eth_diagnostics(sys, cfg["analysis.eth_site"])
        h_mean, h_std = eth.histogram_moments()
        out["eth"] = {
            "site": eth.site,
            "mean_E": eth.mean_E,
            "sigma_E": eth.sigma_E,
            "sigma_E_analytic": sys.omega * math.sqrt(sys.N) / 2,
            "hist_mean": h_mean,
            "hist_std": h_std,
            "bins": len(eth.rho_E),
            "n_diag_scatter": eth.scatter(eth.sigma_E),
        }
        if stage is not None:
            eth.write_csv(stage.path("eth_eigen.csv"), stage.path("eth_rho.csv"))
    out["conservation"] = conservation_summary(trace)
    return out


def pipeline_t_early(cfg: RunConfig, trace) -> float:
    """Configured value, else 0.3 us at 1 MHz scaled by the drive, capped at the first f_R maximum."""
    if cfg["pipeline.t_early_us"] is not None:
        return cfg["pipeline.t_early_us"]
    t = 0.3 / cfg["physics.omega_MHz"]
    peaks = interior_maxima(trace.f_R)
    if len(peaks):
        t = min(t, float(trace.times[peaks[0]]))
    return t


def build_master_model(cfg: RunConfig, trace, census_info: dict | None, t_relax: float):
    """Steady state -> ratios -> early-time fit.  Returns (model, details)."""
    N = cfg.N
    omega = 2 * math.pi * cfg["physics.omega_MHz"]
    if omega == 0.0 or census_info is None:
        model = MasterEquationModel(N, 0.0, np.zeros(N), np.zeros(N), flags=["frozen-drive"])
        return model, {"t_early_us": None}
    nu = census_info["nu"]
    n_max = len(nu) - 1
    st = steady_average(trace, t_relax)
    P_eq = np.concatenate([st.P_eq[:n_max], [st.P_eq[n_max:].sum()]])
    ratios = balance_ratios(P_eq).with_fallback(nu)
    t_early = pipeline_t_early(cfg, trace)
    mask = trace.times <= t_early + 1e-12
    model = fit_rates(trace.times[mask], trace.P[mask], ratios, omega, N,
                      guess=census_rate_guess(nu), restarts=cfg["pipeline.restarts"],
                      seed=cfg["backend.seed"], max_residual=cfg["pipeline.max_residual"])
    return model, {"t_early_us": t_early, "P_eq": P_eq, "fit_samples": int(mask.sum())}


def execute_pipeline(cfg: RunConfig, out_dir, threads: int = 1) -> dict:
    """Quench, steady average, ratios, rate fit and master-equation comparison."""
    cfg.validate()
    started = time.time()
    geom, V, sys = build_system(cfg)
    census_info = census_for(cfg, geom)
    manifest = _manifest(cfg, "pipeline", _derived(cfg, geom, V, sys, census_info), started)
    stage = _Stage(Path(out_dir))
    t_relax = t_relax_of(cfg)
    try:
        trace, extra = simulate(cfg, sys, None, threads)
        trace.write_csv(stage.path("trace.csv"))
        for name, text in extra.items():
            stage.write_text(name, text)
        model, details = build_master_model(cfg, trace, census_info, t_relax)
        P0 = np.zeros(model.n_max + 1)
        P0[0] = 1.0
        master = integrate_master(model, P0, trace.times)
        master.write_csv(stage.path("master_trace.csv"))
        stage.write_text("model.json", model.to_json())
        avg = running_average(trace, cfg["pipeline.avg_width_us"])
        diff = avg - master.f_R
        with open(stage.path("comparison.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_us", "f_R_quantum", "f_R_quantum_avg", "f_R_master", "diff"])
            for k, t in enumerate(trace.times):
                w.writerow([repr(float(x)) for x in (t, trace.f_R[k], avg[k], master.f_R[k], diff[k])])
        late = trace.times >= t_relax - 1e-12
        plateau = master.times <= t_relax + 1e-12
        summary = {
            **details,
            "t_relax_us": t_relax,
            "fit_residual": model.fit_residual,
            "flags": model.flags,
            "max_abs_diff_after_relax": float(np.abs(diff[late]).max()) if late.any() else None,
            "master_asymptote_f_R": float(np.arange(model.n_max + 1) @ model.stationary() / cfg.N)
            if "frozen-drive" not in model.flags else 0.0,
            "master_interior_maxima": int(len(interior_maxima(master.f_R[plateau]))),
            "f_R_census": census_info["f_R_census"] if census_info else None,
            "conservation": {
                "quantum": conservation_summary(trace),
                "master_max_prob_sum_dev": float(np.abs(master.P.sum(axis=1) - 1).max()),
                "master_min_P": float(master.P.min()),
            },
        }
        stage.write_text("analysis.json", json.dumps(_jsonable(summary), indent=2))
        stage.write_text("config.txt", cfg.to_text())
        manifest["flags"] = list(model.flags)
    except NUMERICAL_ERRORS as exc:
        raise _fail(stage, manifest, started, exc) from exc
    except BaseException:
        stage.discard()
        raise
    manifest["diagnostics"] = conservation_summary(trace)
    manifest["outputs"] = stage.digests()
    manifest["wall_clock_s"] = time.time() - started
    stage.commit(manifest)
    return manifest


def parse_axis(spec: str) -> tuple[str, list]:
    """``key=v1,v2,...`` -> (key, typed values).  Empty value list is a validation error."""
    if "=" not in spec:
        raise ConfigParseError(f"axis must look like key=v1,v2: {spec!r}")
    key, raw = (s.strip() for s in spec.split("=", 1))
    if key not in SCHEMA:
        raise ConfigParseError(f"unknown axis key {key!r}")
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if not items:
        raise ConfigValidationError(f"axis {key!r} has no values")
    return key, [_convert(key, s) for s in items]


def _sweep_point(args):
    cfg, out_dir = args
    try:
        manifest = execute_run(cfg, out_dir, threads=1)
        analysis = json.loads((Path(out_dir) / "analysis.json").read_text())
        return {"status": "ok", "analysis": analysis, "manifest": manifest}
    except NumericalFailure as exc:
        return {"status": "failed", "error": str(exc)}


def execute_sweep(cfg: RunConfig, axis: str, out_dir, threads: int = 1) -> dict:
    key, values = parse_axis(axis)
    points = [cfg.with_values({key: v}) for v in values]
    for p in points:
        p.validate()
    out_dir = Path(out_dir)
    short = key.split(".")[-1]
    jobs = [(p, out_dir / f"{i:03d}_{short}={v}") for i, (p, v) in enumerate(zip(points, values))]
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]

    out_dir.mkdir(parents=True, exist_ok=True)
    columns = ["index", key, "status", "N", "theta_deg", "alpha", "f_R_bar", "M2_bar", "f_R_census",
               "dominant_frequency_MHz", "directory"]
    rows = []
    for i, ((p, d), v, res) in enumerate(zip(jobs, values, results)):
        a = res.get("analysis", {})
        rows.append([i, v, res["status"], p.N, p.theta, a.get("alpha"), a.get("f_R_bar"), a.get("M2_bar"),
                     a.get("f_R_census"), a.get("dominant_frequency_MHz"), d.name])
    agg = out_dir / "aggregate.csv"
    with open(agg, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if x is None else (repr(x) if isinstance(x, float) else x) for x in r])
    summary = {
        "command": "sweep",
        "axis": key,
        "values": values,
        "points": [{"directory": d.name, "status": r["status"], "error": r.get("error")}
                   for (_, d), r in zip(jobs, results)],
        "aggregate": {"aggregate.csv": sha256_file(agg)},
        "config": cfg.to_nested(),
    }
    (out_dir / "sweep_manifest.json").write_text(json.dumps(_jsonable(summary), indent=2))
    return summary
