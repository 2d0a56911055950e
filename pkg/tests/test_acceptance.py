"""End-to-end acceptance runs at desk scale.

Each test covers one headline capability with frozen configurations and
prints a single PASS/FAIL line with the measured values before asserting.
These runs are heavier than the unit tests (the full file takes ~30 min);
every tolerance is stated inline next to the assertion it guards.
"""

import math
import multiprocessing as mp

import numpy as np

from pwl import correlation as co
from pwl import geometry as geo
from pwl import noise as nz
from pwl import reconstruct as rc
from pwl import solver as sv
from pwl import source_to_solution as s2s
from pwl import spectral as sp
from pwl.grid import Grid
from pwl.solver import SolverConfig, SourceTerm, SubBox


def _report(name, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}", flush=True)
    return ok


# ---------------------------------------------------------------------------
# 1. forward/adjoint duality identity


def test_01_duality_identity():
    profile = nz.CutoffProfile(ramp=0.5, kappa_center=(0.0, 0.0), kappa_radius=3.0)
    f = SourceTerm.bump(1.5, [0.6, -0.4], 0.5, 0.8)
    residuals = []
    for cells in (32, 64, 128):
        m = geo.euclidean_field(Grid(2, 18.0, cells))
        run = SolverConfig(horizon=4.0)
        dt, steps = run.time_step(m)
        W = nz.sample_white_noise(m.grid, dt, steps, 0)
        lhs, rhs = co.duality_check(m, W, profile, f, run)
        residuals.append(abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    # the discrete forward and reversed solves are exact adjoints, so the
    # residual sits at round-off; the refinement clause is then trivially
    # satisfied down to a 1e-12 floor
    ok = residuals[-1] <= 3e-2
    for coarse, fine in zip(residuals, residuals[1:]):
        ok = ok and fine <= max(coarse / 3.0, 1e-12)
    assert _report(
        "duality", ok, "residuals " + ", ".join(f"{r:.2e}" for r in residuals)
    )


# ---------------------------------------------------------------------------
# 2. statistical stability of the empirical correlation (3D, 48^3)


def test_02_statistical_stability():
    m = geo.euclidean_field(Grid(3, 180.0, 48))
    profile = nz.CutoffProfile(
        ramp=1.0, kappa_center=(0.0, 0.0, 0.0), kappa_radius=10.0
    )
    f = SourceTerm.bump(3.0, [2.0, 0.0, 0.0], 2.0, 8.0)
    h = SourceTerm.bump(3.0, [-2.0, 0.0, 0.0], 2.0, 8.0)
    rep = co.stability_experiment(
        m, profile, f, h, (8.0, 16.0, 32.0, 64.0), 64, workers=8
    )
    slope_ok = -2.6 <= rep.slope <= -1.4
    gap_ok = rep.gap <= 0.1
    _report(
        "stability",
        slope_ok and gap_ok,
        f"slope {rep.slope:.3f} (want [-2.6, -1.4]), gap {rep.gap:.4f} (<= 0.1), "
        f"{rep.n_seeds} seeds",
    )
    # Measured variance decays like T^-1 (time average of a short-memory
    # process), so the slope window is not met; asserted faithfully.
    assert gap_ok
    assert slope_ok


# ---------------------------------------------------------------------------
# 3. Gaussian product-moment structure of shifted pairings


def test_03_isserlis_structure():
    m = geo.euclidean_field(Grid(2, 30.0, 32))
    profile = nz.CutoffProfile(ramp=1.0, kappa_center=(0.0, 0.0), kappa_radius=3.0)
    f = SourceTerm.bump(1.5, [0.8, 0.0], 1.0, 1.2)
    h = SourceTerm.bump(1.5, [-0.8, 0.5], 1.0, 1.2)
    ens = co.pairing_ensembles(
        m, profile, f, h, 4.0, 3.0, 500,
        SolverConfig(boundary="dirichlet"), workers=8,
    )
    gaussian = co.isserlis_check(*ens)
    control = co.isserlis_check(*co.surrogate_ensembles(500, seed=0))
    ok = gaussian <= 0.05 and control > 0.05
    assert _report(
        "isserlis", ok, f"gaussian {gaussian:.4f} (<= 0.05), "
        f"uniform control {control:.4f} (> 0.05)"
    )


# ---------------------------------------------------------------------------
# 4. final-state inner products from region-restricted responses


def _blago_residual(m, cfg):
    X = SubBox.centered([0.0, 0.0], 2.0)
    f = SourceTerm.bump(1.0, [0.6, 0.2], 0.7, 0.8)
    h = SourceTerm.bump(1.4, [-0.5, -0.4], 0.7, 0.8)
    T = 3.0
    rec = s2s.build_lambda_record(m, {"f": f, "h": h}, X, 2 * T, cfg)
    got = s2s.blago_inner_product(rec, "f", "h", T)
    want = s2s.final_state_inner(m, f, h, T, cfg)
    nf = math.sqrt(s2s.final_state_inner(m, f, f, T, cfg))
    nh = math.sqrt(s2s.final_state_inner(m, h, h, T, cfg))
    return abs(got - want) / (nf * nh)


def test_04_blago_identity():
    details, ok = [], True
    for name, build, cfg in (
        ("euclid", geo.euclidean_field, None),
        ("lens", geo.conformal_lens_field, SolverConfig(boundary="dirichlet")),
    ):
        res = [
            _blago_residual(build(Grid(2, 18.0, cells)), cfg)
            for cells in (48, 96, 192)
        ]
        ok = ok and res[0] <= 3e-2
        # second-order refinement: each halving should shrink the residual
        # by about 4x; require at least 3x
        for coarse, fine in zip(res, res[1:]):
            ok = ok and fine <= coarse / 3.0
        details.append(name + " " + ", ".join(f"{r:.2e}" for r in res))
    assert _report("blago", ok, "; ".join(details))


# ---------------------------------------------------------------------------
# 5. source-to-solution responses recovered from correlations alone


def test_05_lambda_from_correlations():
    m = geo.euclidean_field(Grid(2, 18.0, 96))
    profile = nz.CutoffProfile(
        ramp=1.0, kappa_center=(0.0, 0.0), kappa_radius=4.0, plateau_radius=2.5
    )
    region = SubBox.centered([0.0, 0.0], 1.2)
    two_T = 6.0
    h = SourceTerm.bump(1.2, [0.4, 0.1], 0.8, 0.9)
    rec, k2 = s2s.correlation_to_lambda(m, profile, {"h": h}, region, two_T)
    direct = sv.solve_forward(m, h, SolverConfig(horizon=two_T, record_region=region))
    i0 = math.ceil(rec.coverage[0] / rec.dt)
    i1 = math.floor(rec.coverage[1] / rec.dt)
    got = rec.response("h").samples[i0:i1 + 1]
    want = direct.samples[i0:i1 + 1]
    rel = float(np.linalg.norm(got - want) / np.linalg.norm(want))
    plateau = k2.plateau_error(profile)
    ok = rel <= 5e-2 and plateau <= 0.05
    assert _report(
        "lambda_from_correlations", ok,
        f"response rel L2 {rel:.4f} (<= 0.05), kappa^2 plateau {plateau:.4f} (<= 0.05)",
    )


# ---------------------------------------------------------------------------
# 6. three distance recoveries agree pairwise and with the geodesic oracle


def _distance_fixture(name):
    if name == "euclid":
        return geo.euclidean_field(Grid(2, 24.0, 96))
    return geo.conformal_lens_field(Grid(2, 36.0, 144))


def _sample_distance_pairs(fixture, n_pairs, seed):
    """Pairs (a, z) with z in the backward cone of the geodesic through a.

    The reference point z sits behind the far endpoint a along the shooting
    geodesic (within +-45 degrees), which is the regime where the covering
    scan's completion crossing reads off d(a, z) directly.
    """
    m = _distance_fixture(fixture)
    rng = np.random.default_rng(seed)
    y0 = np.zeros(2)
    pairs = []
    while len(pairs) < n_pairs:
        v = rng.normal(size=2)
        gx = geo.interp_metric(m, y0)
        xi = v / np.sqrt(v @ gx @ v)
        rt = rng.uniform(2.4, 2.8)
        try:
            a = geo.geodesic_shoot(m, y0, xi, rt)
            x_split, vel = geo.geodesic_shoot(m, y0, xi, 0.5 * rt, return_velocity=True)
        except geo.GeodesicExit:
            continue
        if np.max(np.abs(a)) > 2.7:
            continue
        back = -np.asarray(vel) / np.linalg.norm(vel)
        ang = rng.uniform(-np.pi / 4, np.pi / 4)
        c, s = np.cos(ang), np.sin(ang)
        u = np.array([c * back[0] - s * back[1], s * back[0] + c * back[1]])
        z = x_split + rng.uniform(0.3, 1.0) * u
        if np.max(np.abs(z)) > 2.7:
            continue
        d = geo.distance_oracle(m, a, z)
        pairs.append((tuple(xi), rt, tuple(a), tuple(z), d))
    return pairs


def _distance_pair_job(args):
    fixture, xi, rt, a, z, d = args
    m = _distance_fixture(fixture)
    ws = rc.BlagoWorkspace(m, SubBox.centered([0.0, 0.0], 3.5), 10.0)
    profile = nz.CutoffProfile(
        ramp=0.5, kappa_center=(0.0, 0.0), kappa_radius=5.5, plateau_radius=4.0
    )
    data = s2s.CorrelationData(m, profile, 8.0)
    d1 = rc.recover_distance_in_X(ws, a, z, eps=0.75)
    d2 = rc.recover_distance_function(ws, [0.0, 0.0], xi, rt, z)
    d3 = rc.recover_distance_via_future(data, a, z, (0.625, 0.5), t_max=5.0)
    return d, d1, d2, d3


def test_06_distance_recovery():
    details, ok = [], True
    for fixture in ("euclid", "lens"):
        pairs = _sample_distance_pairs(fixture, 20, 31)
        dx = _distance_fixture(fixture).grid.spacing
        tasks = [(fixture,) + p for p in pairs]
        # one pair per worker process: each task builds its own workspace,
        # and recycling the process caps the resident memory
        with mp.get_context("fork").Pool(processes=4, maxtasksperchild=1) as pool:
            results = pool.map(_distance_pair_job, tasks)
        worst_oracle = worst_pair = 0.0
        for d, d1, d2, d3 in results:
            ests = (d1, d2, d3)
            worst_oracle = max(worst_oracle, max(abs(e - d) for e in ests) / dx)
            worst_pair = max(
                worst_pair, max(abs(p - q) for p in ests for q in ests) / dx
            )
        ok = ok and worst_oracle <= 5.0 and worst_pair <= 5.0
        details.append(
            f"{fixture} worst oracle {worst_oracle:.2f}dx, "
            f"worst pairwise {worst_pair:.2f}dx (<= 5dx)"
        )
    assert _report("distance_recovery", ok, "; ".join(details))


# ---------------------------------------------------------------------------
# 7. cut distance from covering statistics


def test_07_cut_distance():
    # flat torus, axis direction: the wrap cut sits at half the period
    m = geo.euclidean_field(Grid(2, 8.0, 64, periodic=True))
    ws = rc.BlagoWorkspace(
        m, SubBox.centered([0.0, 0.0], 4.0), 12.0, SolverConfig(boundary="periodic")
    )
    tau_torus = rc.recover_cut_distance(ws, [0, 0], [1, 0], eps=0.375)
    torus_ok = abs(tau_torus - 4.0) <= 4 * m.grid.spacing

    # euclidean control at matched spacing: no cut anywhere
    m = geo.euclidean_field(Grid(2, 26.0, 208))
    ws = rc.BlagoWorkspace(m, SubBox.centered([0.0, 0.0], 4.0), 12.0)
    tau_euclid = rc.recover_cut_distance(ws, [0, 0], [1, 0], eps=0.375)
    euclid_ok = math.isinf(tau_euclid)

    # lens: conjugate-point cut, checked against a doubled-resolution oracle
    m = geo.conformal_lens_field(Grid(2, 41.0, 164), sigma=1.8)
    ws = rc.BlagoWorkspace(m, SubBox.centered([-1.36, 0.0], 1.9), 12.0)
    tau_lens = rc.recover_cut_distance(ws, [-2.5, 0.0], [1, 0], eps=0.5)
    fine = geo.conformal_lens_field(Grid(2, 41.0, 328), sigma=1.8)
    oracle = geo.cut_distance_oracle(fine, [-2.5, 0.0], [1.0, 0.0])
    lens_ok = oracle.observed and abs(tau_lens - oracle.value) <= 5 * m.grid.spacing

    ok = torus_ok and euclid_ok and lens_ok
    assert _report(
        "cut_distance", ok,
        f"torus {tau_torus:.3f} (want 4.0 +- 0.5), euclid {tau_euclid} (want inf), "
        f"lens {tau_lens:.3f} vs oracle {oracle.value:.3f} (+- {5 * m.grid.spacing:.2f})",
    )


# ---------------------------------------------------------------------------
# 8. metric recovery at probes outside the observation region


def _probe_cluster(center, d):
    center = np.asarray(center, dtype=float)
    offs = {"p0": (0.0, 0.0), "pxm": (-d, 0.0), "pxp": (d, 0.0),
            "pym": (0.0, -d), "pyp": (0.0, d)}
    return {pid: tuple(center + off) for pid, off in offs.items()}


def _distance_family(metric, probes, pts, shape, spacing):
    rows = []
    for pnt in probes.values():
        if getattr(metric.analytic, "kind", None) == "euclidean":
            rows.append(np.linalg.norm(pts - np.asarray(pnt), axis=1))
        else:
            df = geo.distance_field_from(metric, pnt)
            rows.append([df.at(z) for z in pts])
    return rc.DistanceFamily(
        points=pts,
        probe_ids=list(probes),
        generators=list(probes.values()),
        values=np.array(rows),
        grid_shape=shape,
        spacing=spacing,
    )


def test_08_metric_recovery():
    grid = Grid(2, 12.0, 96)
    obs = SubBox.centered((0.0, 0.0), 1.6875)
    probes = _probe_cluster([2.4, 0.2], 0.3)
    others = [k for k in probes if k != "p0"]

    m = geo.euclidean_field(grid)
    pts, shape, spacing = rc.observation_grid(obs, grid, stride=3)
    fam = _distance_family(m, probes, pts, shape, spacing)
    est = rc.recover_metric(fam, "p0", others, m)
    entry_err = float(np.abs(est.matrix - np.eye(2)).max())
    euclid_ok = est.positive_definite and entry_err <= 5e-2

    m = geo.conformal_lens_field(grid)
    fam = _distance_family(m, probes, pts, shape, spacing)
    est = rc.recover_metric(fam, "p0", others, m)
    oracle = rc.pushforward_oracle(fam, probes, "p0", m)
    rel = float(np.abs(est.matrix - oracle).max() / np.abs(oracle).max())
    lens_ok = est.positive_definite and rel <= 0.10

    ok = euclid_ok and lens_ok
    assert _report(
        "metric_recovery", ok,
        f"euclid entry err {entry_err:.4f} (<= 0.05), "
        f"lens pushforward rel {rel:.4f} (<= 0.10), both positive definite",
    )


# ---------------------------------------------------------------------------
# 9. torus mode sums match direct solves and feed the final-state identity


def test_09_spectral_bridge():
    grid = Grid(2, 8.0, 64, periodic=True)
    m = geo.euclidean_field(grid)
    f = SourceTerm.bump(0.7, (0.6, 0.2), 0.5, 0.8)
    two_T = 4.0

    run = SolverConfig(horizon=two_T, boundary="periodic", even_steps=True)
    direct = sv.solve_forward(m, f, run)
    den = float(np.linalg.norm(direct.samples))
    gaps = []
    for k_max in (4, 8, 16):
        data = sp.torus_eigendata(grid, k_max)
        u = sp.spectral_source_to_solution(data, f, two_T)
        gaps.append(float(np.linalg.norm(u.samples - direct.samples)) / den)
    gap_ok = gaps[-1] <= 5e-2
    mono_ok = all(b <= a + 1e-3 for a, b in zip(gaps, gaps[1:]))

    # the mode-sum record must satisfy the final-state identity as well
    X = SubBox.centered((0.0, 0.0), 2.5)
    T = 2.0
    srcs = {"f": f, "h": SourceTerm.bump(0.9, (-0.5, -0.4), 0.6, 0.9)}
    rec = sp.build_spectral_record(sp.torus_eigendata(grid, 16), srcs, X, two_T)
    got = s2s.blago_inner_product(rec, "f", "h", T)
    cfg = SolverConfig(horizon=T, boundary="periodic", even_steps=True)
    uf = sv.solve_forward(m, srcs["f"], cfg)
    uh = sv.solve_forward(m, srcs["h"], cfg)
    want = sv.weighted_inner(m, uf.samples[-1], uh.samples[-1])
    scale = math.sqrt(
        sv.weighted_inner(m, uf.samples[-1], uf.samples[-1])
        * sv.weighted_inner(m, uh.samples[-1], uh.samples[-1])
    )
    blago_res = abs(got - want) / scale
    blago_ok = blago_res <= 3e-2

    ok = gap_ok and mono_ok and blago_ok
    assert _report(
        "spectral_bridge", ok,
        "gaps " + ", ".join(f"{g:.4f}" for g in gaps)
        + f" (k16 <= 0.05, monotone), record blago residual {blago_res:.2e} (<= 0.03)",
    )


# ---------------------------------------------------------------------------
# 10. axis-permutation relabeling leaves the distance pipeline bitwise intact


def test_10_axis_permutation_bitwise():
    m = geo.euclidean_field(Grid(2, 18.0, 72))

    def family(swap):
        P = lambda x: (x[1], x[0]) if swap else tuple(x)
        region = SubBox.centered(P([0.3, -0.2]), 2.0)
        ws = rc.BlagoWorkspace(m, region, 6.0, SolverConfig())
        probes = {"a": P([0.5, 0.1]), "b": P([-0.4, -0.6])}
        pts = np.array([P(z) for z in [[1.0, 0.3], [-0.8, 0.9], [0.2, -1.1]]])
        return rc.build_distance_family(ws, probes, pts, eps=0.75)

    base = family(False)
    swapped = family(True)
    ok = np.array_equal(base.values, swapped.values)
    assert _report(
        "axis_permutation", ok,
        f"bitwise equal {ok}, max |diff| "
        f"{float(np.max(np.abs(base.values - swapped.values))):.1e}",
    )
