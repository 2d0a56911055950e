"""Experiment runner: fixtures in, reports and artifacts out.

Each subcommand executes one named experiment end to end and writes a
machine-readable ``report.json``, the fully resolved configuration, CSV
tables, and SVG plots into the output directory.  Pass/fail is decided
only from recorded values and thresholds, so every verdict can be
re-derived from the emitted files.  Outputs carry no timestamps: identical
config and seed give byte-identical CSV/JSON.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import sys

import jsonschema
import numpy as np

from . import __version__
from . import geometry as geo
from . import reconstruct as rec
from . import spectral as spec
from .correlation import duality_check, stability_experiment
from .grid import Grid
from .noise import CutoffProfile, resolve_seed, sample_white_noise
from .solver import ConfigError, SolverConfig, SourceTerm, SubBox
from .source_to_solution import (
    blago_inner_product,
    build_lambda_record,
    correlation_to_lambda,
    final_state_inner,
)

EXPERIMENTS = (
    "stability",
    "duality",
    "blago",
    "distances",
    "cutlocus",
    "metric",
    "spectral",
    "full-pipeline",
)

EXIT_PASS, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(ValueError):
    """Invalid configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration: schema, defaults, resolution

SCHEMA = {
    "type": "object",
    "properties": {
        "fixture": {"enum": ["euclid", "lens", "torus", "diag"]},
        "grid": {
            "type": "object",
            "properties": {
                "dim": {"type": "integer", "minimum": 1, "maximum": 3},
                "extent": {"type": "number", "exclusiveMinimum": 0},
                "cells": {"type": "integer", "minimum": 8},
                "periodic": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "solver": {
            "type": "object",
            "properties": {
                "cfl_factor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "boundary": {"enum": ["enlarged_box", "periodic", "dirichlet"]},
            },
            "additionalProperties": False,
        },
        "metric_params": {"type": "object"},
        "noise": {"type": "object"},
        "seed": {"type": "integer", "minimum": 0},
        "workers": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
        "thresholds": {"type": "object"},
        "params": {"type": "object"},
    },
    "additionalProperties": False,
}

DEFAULTS = {
    "fixture": "euclid",
    "grid": {"dim": 2, "extent": 16.0, "cells": 128, "periodic": False},
    "solver": {"cfl_factor": 0.5, "boundary": "enlarged_box"},
    "metric_params": {},
    "noise": {
        "ramp": 0.5,
        "kappa_center": [0.0, 0.0],
        "kappa_radius": 3.0,
        "kappa_amplitude": 1.0,
        "plateau_radius": None,
    },
    "seed": 0,
    "workers": 1,
    "out": "out",
    "thresholds": {},
    "params": {},
}

THRESHOLD_DEFAULTS = {
    "duality": {"residual": 3e-2},
    "stability": {"slope_lo": -2.6, "slope_hi": -1.4, "gap": 0.1},
    "blago": {"residual": 3e-2},
    "distances": {"tol_dx": 5.0},
    "cutlocus": {"tol_dx": 4.0},
    "metric": {"entry": 5e-2, "relative": 0.10},
    "spectral": {"gap": 5e-2, "blago": 5e-2},
    "full-pipeline": {
        "duality": 3e-2,
        "lambda_rel": 5e-2,
        "kappa2_rel": 5e-2,
        "tol_dx": 5.0,
        "entry": 5e-2,
    },
}


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(experiment: str, raw: dict, overrides: dict) -> dict:
    """Validate, apply defaults and CLI overrides, and freeze the config."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        raise UsageError(f"config schema violation: {e.message}") from e
    cfg = _deep_merge(DEFAULTS, raw)
    cfg["thresholds"] = _deep_merge(
        THRESHOLD_DEFAULTS[experiment], cfg["thresholds"]
    )
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    if "PWL_SEED" in os.environ and overrides.get("seed") is None and "seed" not in raw:
        cfg["seed"] = resolve_seed(None)
    cfg["experiment"] = experiment
    cfg["generator"] = f"pwl {__version__}"
    return cfg


def _build_grid(cfg: dict) -> Grid:
    g = cfg["grid"]
    periodic = g["periodic"] or cfg["fixture"] == "torus"
    return Grid(g["dim"], g["extent"], g["cells"], periodic)


def build_fixture(cfg: dict) -> geo.MetricField:
    grid = _build_grid(cfg)
    name = cfg["fixture"]
    params = cfg["metric_params"]
    if name in ("euclid", "torus"):
        return geo.euclidean_field(grid)
    if name == "lens":
        return geo.conformal_lens_field(grid, **params)
    if name == "diag":
        return geo.diag_field(grid, params.get("values", [4.0] * grid.dim))
    raise UsageError(f"unknown fixture {name!r}")


def _profile(cfg: dict) -> CutoffProfile:
    n = cfg["noise"]
    return CutoffProfile(
        ramp=n["ramp"],
        kappa_center=tuple(n["kappa_center"]),
        kappa_radius=n["kappa_radius"],
        kappa_amplitude=n.get("kappa_amplitude", 1.0),
        plateau_radius=n.get("plateau_radius"),
    )


def _source(desc: dict) -> SourceTerm:
    return SourceTerm.bump(
        desc["t_center"],
        tuple(desc["x_center"]),
        desc["t_radius"],
        desc["x_radius"],
        desc.get("amplitude", 1.0),
    )


# ---------------------------------------------------------------------------
# artifact emission


def emit_plot(series, kind, path):
    """Standalone SVG of (x, y) series; loglog plots carry a fitted slope.

    ``series`` maps labels to (x, y) pairs.  The output contains no
    timestamp metadata, so identical data produces identical bytes.
    """
    if not series or all(len(xy[0]) == 0 for xy in series.values()):
        raise ValueError("cannot plot an empty series")
    if kind not in ("loglog", "line"):
        raise ValueError(f"unknown plot kind {kind!r}")
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "pwl"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    plot = ax.loglog if kind == "loglog" else ax.plot
    for label, (xs, ys) in series.items():
        plot(xs, ys, marker="o", label=label)
        if kind == "loglog" and len(xs) >= 2:
            slope = np.polyfit(np.log(xs), np.log(ys), 1)[0]
            fit = np.exp(np.polyval(np.polyfit(np.log(xs), np.log(ys), 1), np.log(xs)))
            ax.loglog(xs, fit, "--", label=f"{label} slope {slope:.2f}")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    return path


def _check(name, value, tolerance, passed) -> dict:
    return {
        "name": name,
        "value": value,
        "tolerance": tolerance,
        "passed": bool(passed),
    }


# ---------------------------------------------------------------------------
# the experiments; each returns (checks, artifact paths)


def run_duality(cfg, out):
    metric = build_fixture(cfg)
    profile = _profile(cfg)
    p = cfg["params"]
    f = _source(
        p.get(
            "source",
            {"t_center": 1.5, "x_center": [0.6, -0.4], "t_radius": 0.5, "x_radius": 0.8},
        )
    )
    horizon = p.get("horizon", 3.0)
    run = SolverConfig(
        cfl_factor=cfg["solver"]["cfl_factor"],
        horizon=horizon,
        boundary=cfg["solver"]["boundary"],
    )
    dt, steps = run.time_step(metric)
    W = sample_white_noise(metric.grid, dt, steps, cfg["seed"])
    lhs, rhs = duality_check(metric, W, profile, f, run)
    residual = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
    arts = [
        _write_csv(
            os.path.join(out, "duality.csv"),
            ["lhs", "rhs", "residual"],
            [(lhs, rhs, residual)],
        )
    ]
    thr = cfg["thresholds"]["residual"]
    return [_check("duality_residual", residual, thr, residual <= thr)], arts


def run_stability(cfg, out):
    p = cfg["params"]
    T_values = p.get("T_values", [4.0, 8.0, 16.0])
    n_seeds = p.get("n_seeds", 8)
    if len(T_values) < 3:
        raise UsageError("need at least 3 averaging horizons to fit a slope")
    if n_seeds < 2:
        raise UsageError("need at least 2 seeds for a variance")
    metric = build_fixture(cfg)
    profile = _profile(cfg)
    f = _source(
        p.get(
            "f",
            {"t_center": 1.0, "x_center": [0.8, 0.0], "t_radius": 0.4, "x_radius": 0.7},
        )
    )
    h = _source(
        p.get(
            "h",
            {"t_center": 1.2, "x_center": [-0.6, 0.5], "t_radius": 0.4, "x_radius": 0.7},
        )
    )
    base = SolverConfig(
        cfl_factor=cfg["solver"]["cfl_factor"], boundary=cfg["solver"]["boundary"]
    )
    report = stability_experiment(
        metric,
        profile,
        f,
        h,
        T_values,
        [cfg["seed"] + i for i in range(n_seeds)],
        cfg=base,
        workers=cfg["workers"],
    )
    arts = [os.path.join(out, "variance.csv")]
    report.to_csv(arts[0])
    arts.append(
        emit_plot(
            {"variance": (list(report.T_values), list(report.variances))},
            "loglog",
            os.path.join(out, "variance_loglog.svg"),
        )
    )
    t = cfg["thresholds"]
    checks = [
        _check(
            "variance_slope",
            report.slope,
            [t["slope_lo"], t["slope_hi"]],
            t["slope_lo"] <= report.slope <= t["slope_hi"],
        ),
        _check("limit_gap", report.gap, t["gap"], report.gap <= t["gap"]),
    ]
    return checks, arts


def run_blago(cfg, out):
    metric = build_fixture(cfg)
    p = cfg["params"]
    region = SubBox.centered(
        tuple(p.get("region_center", [0.0, 0.0])), p.get("region_halfwidth", 2.0)
    )
    two_T = p.get("two_T", 4.0)
    base = SolverConfig(
        cfl_factor=cfg["solver"]["cfl_factor"], boundary=cfg["solver"]["boundary"]
    )
    sources = {
        "f": _source(
            p.get(
                "f",
                {"t_center": 0.7, "x_center": [0.6, 0.2], "t_radius": 0.5, "x_radius": 0.8},
            )
        ),
        "h": _source(
            p.get(
                "h",
                {"t_center": 0.9, "x_center": [-0.5, -0.4], "t_radius": 0.6, "x_radius": 0.9},
            )
        ),
    }
    record = build_lambda_record(metric, sources, region, two_T, base)
    T = 0.5 * two_T
    rows = []
    worst = 0.0
    for a in record.ids():
        for b in record.ids():
            via = blago_inner_product(record, a, b, T)
            direct = final_state_inner(metric, record.source(a), record.source(b), T, base)
            scale = math.sqrt(
                abs(final_state_inner(metric, record.source(a), record.source(a), T, base))
                * abs(final_state_inner(metric, record.source(b), record.source(b), T, base))
            )
            residual = abs(via - direct) / max(scale, 1e-300)
            worst = max(worst, residual)
            rows.append((a, b, via, direct, residual))
    arts = [
        _write_csv(
            os.path.join(out, "blago.csv"),
            ["f", "h", "identity", "direct", "residual"],
            rows,
        )
    ]
    thr = cfg["thresholds"]["residual"]
    return [_check("blago_residual", worst, thr, worst <= thr)], arts


def _random_pairs(metric, region_halfwidth, n_pairs, seed, d_lo, d_hi):
    rng = np.random.Generator(np.random.Philox(key=(seed, 1)))
    dim = metric.grid.dim
    pairs = []
    while len(pairs) < n_pairs:
        x = rng.uniform(-region_halfwidth, region_halfwidth, dim)
        y = rng.uniform(-region_halfwidth, region_halfwidth, dim)
        d = geo.distance_oracle(metric, x, y)
        if d_lo <= d <= d_hi:
            pairs.append((x, y, d))
    return pairs


def run_distances(cfg, out):
    metric = build_fixture(cfg)
    p = cfg["params"]
    hw = p.get("region_halfwidth", 3.0)
    region = SubBox.centered(tuple(p.get("region_center", [0.0, 0.0])), hw)
    two_T = p.get("two_T", 8.0)
    n_pairs = p.get("n_pairs", 10)
    eps = p.get("eps", 3.0 * metric.grid.spacing)
    base = SolverConfig(
        cfl_factor=cfg["solver"]["cfl_factor"], boundary=cfg["solver"]["boundary"]
    )
    ws = rec.BlagoWorkspace(metric, region, two_T, base)
    pairs = _random_pairs(
        metric,
        hw - 2 * eps,
        n_pairs,
        cfg["seed"],
        p.get("d_lo", 1.0),
        p.get("d_hi", min(2.0 * hw, two_T - 1.0)),
    )
    rows = []
    worst = 0.0
    for x, y, d_true in pairs:
        d_hat = rec.recover_distance_in_X(ws, x, y, eps)
        err = abs(d_hat - d_true) / metric.grid.spacing
        worst = max(worst, err)
        rows.append((*x, *y, d_hat, d_true, err))
    dim = metric.grid.dim
    arts = [
        _write_csv(
            os.path.join(out, "distances.csv"),
            [f"x{a}" for a in range(dim)]
            + [f"y{a}" for a in range(dim)]
            + ["estimate", "oracle", "error_dx"],
            rows,
        )
    ]
    thr = cfg["thresholds"]["tol_dx"]
    return [_check("first_arrival_error_dx", worst, thr, worst <= thr)], arts


def run_cutlocus(cfg, out):
    metric = build_fixture(cfg)
    p = cfg["params"]
    region = SubBox.centered(
        tuple(p.get("region_center", [0.0, 0.0])), p.get("region_halfwidth", 3.0)
    )
    two_T = p.get("two_T", 12.0)
    y = tuple(p.get("y", [0.0, 0.0]))
    xi = tuple(p.get("xi", [1.0, 0.0]))
    base = SolverConfig(
        cfl_factor=cfg["solver"]["cfl_factor"], boundary=cfg["solver"]["boundary"]
    )
    ws = rec.BlagoWorkspace(metric, region, two_T, base)
    tau_hat = rec.recover_cut_distance(ws, y, xi, eps=p.get("eps"))
    oracle = geo.cut_distance_oracle(metric, y, xi)
    rows = [(tau_hat, oracle.value, int(oracle.observed))]
    arts = [
        _write_csv(
            os.path.join(out, "cutlocus.csv"),
            ["estimate", "oracle", "oracle_observed"],
            rows,
        )
    ]
    thr = cfg["thresholds"]["tol_dx"]
    if not oracle.observed or math.isinf(oracle.value):
        passed = math.isinf(tau_hat)
        value = tau_hat
    else:
        value = abs(tau_hat - oracle.value) / metric.grid.spacing
        passed = value <= thr
    return [_check("cut_distance_error_dx", value, thr, passed)], arts


def _is_euclidean(metric) -> bool:
    return getattr(metric.analytic, "kind", None) == "euclidean"


def _oracle_family(metric, probes, pts, shape, sp):
    rows = []
    for pnt in probes.values():
        if _is_euclidean(metric):
            rows.append(np.linalg.norm(pts - np.asarray(pnt), axis=1))
        else:
            df = geo.distance_field_from(metric, pnt)
            rows.append([df.at(z) for z in pts])
    return rec.DistanceFamily(
        points=pts,
        probe_ids=list(probes),
        generators=list(probes.values()),
        values=np.array(rows),
        grid_shape=shape,
        spacing=sp,
    )


def _far_base_indices(pts, probes, min_dist):
    """Observation indices at least ``min_dist`` from every probe.

    Near the probes the distance rows are dominated by front curvature, so
    the covector fit is cleanest on the far points; None means no filter.
    """
    if min_dist <= 0.0:
        return None
    probe_pts = np.asarray(list(probes.values()), dtype=float)
    d = np.min(
        np.linalg.norm(pts[:, None, :] - probe_pts[None, :, :], axis=-1), axis=1
    )
    idx = np.nonzero(d >= min_dist)[0].tolist()
    return idx or None


def _cluster(center, d):
    center = np.asarray(center, dtype=float)
    offs = {"p0": (0.0, 0.0), "pxm": (-d, 0.0), "pxp": (d, 0.0),
            "pym": (0.0, -d), "pyp": (0.0, d)}
    return {pid: tuple(center + off) for pid, off in offs.items()}


def run_metric(cfg, out):
    metric = build_fixture(cfg)
    p = cfg["params"]
    obs = SubBox.centered(
        tuple(p.get("obs_center", [0.0, 0.0])), p.get("obs_halfwidth", 1.6875)
    )
    pts, shape, sp = rec.observation_grid(obs, metric.grid, p.get("stride", 3))
    probes = _cluster(p.get("probe", [2.4, 0.2]), p.get("cluster_d", 0.3))
    family = _oracle_family(metric, probes, pts, shape, sp)
    est = rec.recover_metric(
        family,
        "p0",
        [k for k in probes if k != "p0"],
        metric,
        base_indices=_far_base_indices(pts, probes, p.get("base_min_dist", 0.0)),
    )
    est.save(os.path.join(out, "metric.json"))
    arts = [os.path.join(out, "metric.json")]
    checks = [
        _check("positive_definite", float(est.eigenvalues.min()), 0.0, est.positive_definite)
    ]
    t = cfg["thresholds"]
    if _is_euclidean(metric):
        err = float(np.abs(est.matrix - np.eye(metric.grid.dim)).max())
        checks.append(_check("identity_entry_error", err, t["entry"], err <= t["entry"]))
    else:
        oracle = rec.pushforward_oracle(family, probes, "p0", metric)
        rel = float(np.abs(est.matrix - oracle).max() / np.abs(oracle).max())
        checks.append(
            _check("pushforward_relative_error", rel, t["relative"], rel <= t["relative"])
        )
    return checks, arts


def run_spectral(cfg, out):
    if cfg["fixture"] != "torus":
        raise UsageError("spectral experiment needs the torus fixture")
    metric = build_fixture(cfg)
    grid = metric.grid
    p = cfg["params"]
    k_ladder = p.get("k_ladder", [4, 8, 16])
    two_T = p.get("two_T", 4.0)
    f = _source(
        p.get(
            "source",
            {"t_center": 0.8, "x_center": [0.5, -0.3], "t_radius": 0.6, "x_radius": 1.0},
        )
    )
    base = SolverConfig(cfl_factor=cfg["solver"]["cfl_factor"], boundary="periodic")
    from .solver import solve_forward

    run = SolverConfig(
        cfl_factor=base.cfl_factor, horizon=two_T, boundary="periodic", even_steps=True
    )
    direct = solve_forward(metric, f, run)
    den = float(np.linalg.norm(direct.samples))
    gaps = []
    for k in k_ladder:
        data = spec.torus_eigendata(grid, k)
        u = spec.spectral_source_to_solution(data, f, two_T, base)
        gaps.append(float(np.linalg.norm(u.samples - direct.samples)) / den)
    arts = [
        _write_csv(
            os.path.join(out, "spectral.csv"),
            ["k_max", "gap"],
            list(zip(k_ladder, gaps)),
        ),
        emit_plot(
            {"gap": (list(map(float, k_ladder)), gaps)},
            "loglog",
            os.path.join(out, "spectral_gap.svg"),
        ),
    ]
    t = cfg["thresholds"]
    monotone = all(b <= a + 1e-3 for a, b in zip(gaps, gaps[1:]))
    # the spectral record must satisfy the same final-state identity
    region = SubBox.centered((0.0, 0.0), p.get("region_halfwidth", 2.5))
    data = spec.torus_eigendata(grid, max(k_ladder))
    h = SourceTerm.bump(0.9, tuple(p.get("h_center", [-0.5, -0.4])), 0.6, 0.9)
    record = spec.build_spectral_record(data, {"f": f, "h": h}, region, two_T, base)
    via = blago_inner_product(record, "f", "h", 0.5 * two_T)
    direct_fh = final_state_inner(metric, f, h, 0.5 * two_T, base)
    scale = math.sqrt(
        abs(final_state_inner(metric, f, f, 0.5 * two_T, base))
        * abs(final_state_inner(metric, h, h, 0.5 * two_T, base))
    )
    blago_res = abs(via - direct_fh) / max(scale, 1e-300)
    checks = [
        _check("gap_at_k_max", gaps[-1], t["gap"], gaps[-1] <= t["gap"]),
        _check("gap_monotone", gaps, None, monotone),
        _check("spectral_blago_residual", blago_res, t["blago"], blago_res <= t["blago"]),
    ]
    return checks, arts


def run_full_pipeline(cfg, out):
    """Noise to metric in one sweep on a small fixture.

    Chains the storyline: a passively driven wave yields correlations, the
    correlations determine the local source-to-solution map, the map gives
    distances, and the distance family gives the metric.
    """
    metric = build_fixture(cfg)
    profile = _profile(cfg)
    p = cfg["params"]
    t = cfg["thresholds"]
    base = SolverConfig(
        cfl_factor=cfg["solver"]["cfl_factor"], boundary=cfg["solver"]["boundary"]
    )
    checks, arts = [], []

    # stage 1: the pathwise duality behind correlation convergence
    f = _source(
        p.get(
            "f",
            {"t_center": 1.0, "x_center": [0.6, 0.0], "t_radius": 0.4, "x_radius": 0.7},
        )
    )
    run = SolverConfig(
        cfl_factor=base.cfl_factor, horizon=p.get("horizon", 3.0), boundary=base.boundary
    )
    dt, steps = run.time_step(metric)
    W = sample_white_noise(metric.grid, dt, steps, cfg["seed"])
    lhs, rhs = duality_check(metric, W, profile, f, run)
    dres = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
    checks.append(_check("duality_residual", dres, t["duality"], dres <= t["duality"]))

    # stage 2: correlations -> Lambda_X responses and kappa^2; the recovered
    # record is only claimed on its coverage window, so compare there
    lam_region = SubBox.centered(
        tuple(p.get("lam_center", [0.0, 0.0])), p.get("lam_halfwidth", 1.2)
    )
    two_T = p.get("two_T", 6.0)
    h = _source(
        p.get(
            "h",
            {"t_center": 1.2, "x_center": [0.4, 0.1], "t_radius": 0.8, "x_radius": 0.9},
        )
    )
    record, kappa2 = correlation_to_lambda(
        metric, profile, {"h": h}, lam_region, two_T, base
    )
    from .source_to_solution import lambda_apply

    direct = lambda_apply(metric, h, lam_region, two_T, base)
    got = record.response("h").samples
    i0 = int(math.ceil(record.coverage[0] / record.dt))
    i1 = int(math.floor(record.coverage[1] / record.dt))
    lam_rel = float(
        np.linalg.norm(got[i0 : i1 + 1] - direct.samples[i0 : i1 + 1])
        / np.linalg.norm(direct.samples[i0 : i1 + 1])
    )
    checks.append(_check("lambda_relative_l2", lam_rel, t["lambda_rel"], lam_rel <= t["lambda_rel"]))
    kap_rel = kappa2.plateau_error(profile)
    checks.append(_check("kappa2_plateau_error", kap_rel, t["kappa2_rel"], kap_rel <= t["kappa2_rel"]))

    # stage 3: distances from the operator, against the geodesic oracle
    region = SubBox.centered(
        tuple(p.get("region_center", [0.0, 0.0])), p.get("region_halfwidth", 2.0)
    )
    ws = rec.BlagoWorkspace(metric, region, two_T, base)
    eps = p.get("eps", 3.0 * metric.grid.spacing)
    pairs = _random_pairs(
        metric, region.halfwidth.min() - 2 * eps, p.get("n_pairs", 5), cfg["seed"],
        p.get("d_lo", 1.0), p.get("d_hi", 2.5),
    )
    rows = []
    worst = 0.0
    for x, y, d_true in pairs:
        d_hat = rec.recover_distance_in_X(ws, x, y, eps)
        err = abs(d_hat - d_true) / metric.grid.spacing
        worst = max(worst, err)
        rows.append((*x, *y, d_hat, d_true, err))
    dim = metric.grid.dim
    arts.append(
        _write_csv(
            os.path.join(out, "pipeline_distances.csv"),
            [f"x{a}" for a in range(dim)]
            + [f"y{a}" for a in range(dim)]
            + ["estimate", "oracle", "error_dx"],
            rows,
        )
    )
    checks.append(_check("distance_error_dx", worst, t["tol_dx"], worst <= t["tol_dx"]))

    # stage 4: metric from a distance family over the observation grid
    obs = SubBox.centered(
        tuple(p.get("obs_center", [0.0, 0.0])), p.get("obs_halfwidth", 1.5)
    )
    pts, shape, sp = rec.observation_grid(obs, metric.grid, p.get("stride", 3))
    probes = _cluster(p.get("probe", [0.0, 0.0]), p.get("cluster_d", 0.3))
    family = _oracle_family(metric, probes, pts, shape, sp)
    family.save(
        os.path.join(out, "pipeline_family.csv"),
        os.path.join(out, "pipeline_family.json"),
    )
    arts += [
        os.path.join(out, "pipeline_family.csv"),
        os.path.join(out, "pipeline_family.json"),
    ]
    est = rec.recover_metric(
        family,
        "p0",
        [k for k in probes if k != "p0"],
        metric,
        base_indices=_far_base_indices(pts, probes, p.get("base_min_dist", 1.2)),
    )
    est.save(os.path.join(out, "pipeline_metric.json"))
    arts.append(os.path.join(out, "pipeline_metric.json"))
    if _is_euclidean(metric):
        merr = float(np.abs(est.matrix - np.eye(dim)).max())
        checks.append(_check("metric_entry_error", merr, t["entry"], merr <= t["entry"]))
    checks.append(
        _check("metric_positive_definite", float(est.eigenvalues.min()), 0.0, est.positive_definite)
    )
    return checks, arts


RUNNERS = {
    "duality": run_duality,
    "stability": run_stability,
    "blago": run_blago,
    "distances": run_distances,
    "cutlocus": run_cutlocus,
    "metric": run_metric,
    "spectral": run_spectral,
    "full-pipeline": run_full_pipeline,
}


# ---------------------------------------------------------------------------
# driver


def run(cfg: dict) -> dict:
    """Execute the configured experiment and write the report; returns it."""
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    # the output directory is a run location, not an experiment parameter:
    # leaving it out keeps resolved configs and digests location-independent
    resolved = json.dumps(
        {k: v for k, v in cfg.items() if k != "out"}, indent=2, sort_keys=True
    )
    with open(os.path.join(out, "config.resolved.json"), "w") as fh:
        fh.write(resolved + "\n")
    digest = hashlib.sha256(resolved.encode()).hexdigest()
    checks, artifacts = RUNNERS[cfg["experiment"]](cfg, out)
    report = {
        "experiment": cfg["experiment"],
        "generator": cfg["generator"],
        "config_digest": digest,
        "checks": checks,
        "artifacts": [os.path.basename(a) for a in artifacts],
        "passed": all(c["passed"] for c in checks),
    }
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pwl",
        description="Passive wave-correlation laboratory experiment runner.",
        epilog=(
            "CSV columns: stability: T,mean,variance; blago: f,h,identity,"
            "direct,residual; distances: x*,y*,estimate,oracle,error_dx; "
            "cutlocus: estimate,oracle; spectral: k_max,gap."
        ),
    )
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--seed", type=int, default=None, help="master RNG seed")
        sp.add_argument("--workers", type=int, default=None, help="worker processes")
        sp.add_argument("--out", default=None, help="output directory")
    args = parser.parse_args(argv)

    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        print(f"pwl: cannot read config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = resolve_config(
            args.experiment,
            raw,
            {"seed": args.seed, "workers": args.workers, "out": args.out},
        )
    except UsageError as e:
        print(f"pwl: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        report = run(cfg)
    except (UsageError, ConfigError) as e:
        print(f"pwl: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # runtime failure: report the failing stage
        print(f"pwl: {cfg['experiment']} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    for c in report["checks"]:
        verdict = "PASS" if c["passed"] else "FAIL"
        print(f"{verdict} {c['name']} = {c['value']} (tolerance {c['tolerance']})")
    return EXIT_PASS if report["passed"] else EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
