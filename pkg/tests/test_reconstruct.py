import json

import numpy as np
import pytest

from pwl import geometry as geo
from pwl import reconstruct as rc
from pwl import solver as sv
from pwl.grid import Grid
from pwl.noise import CutoffProfile
from pwl.source_to_solution import CorrelationData


@pytest.fixture(scope="module")
def ws():
    g = Grid(2, 16.0, 80)
    m = geo.euclidean_field(g)
    return rc.BlagoWorkspace(m, sv.SubBox.centered([0.0, 0.0], 2.5), 6.0)


@pytest.fixture(scope="module")
def data():
    g = Grid(2, 12.0, 48)
    m = geo.euclidean_field(g)
    prof = CutoffProfile(ramp=0.5, kappa_center=(0.0, 0.0), kappa_radius=3.0)
    return CorrelationData(m, prof, 6.0, sv.SolverConfig(boundary="dirichlet"))


def euclid_cover_margin(p, lp, y, ly, z, lz, n=720):
    """Signed margin of B(p,lp) subset B(y,ly) u B(z,lz), positive if covered."""
    p, y, z = (np.asarray(v, float) for v in (p, y, z))
    ang = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    pts = p + lp * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    dy = ly - np.linalg.norm(pts - y, axis=-1)
    dz = lz - np.linalg.norm(pts - z, axis=-1)
    return float(np.min(np.maximum(dy, dz)))


def test_config_report_lists_thresholds():
    cfg = rc.ReconstructionConfig()
    rep = cfg.report()
    assert rep["delta_bi"] == cfg.delta_bi
    assert rep["delta_nr"] == cfg.delta_nr
    assert set(rep) >= {"eta_arr", "delta_fc", "knee_fraction"}


def test_observation_grid():
    g = Grid(2, 12.0, 48)
    region = sv.SubBox.centered([0.0, 0.0], 1.0)
    pts, shape, spacing = rc.observation_grid(region, g, stride=2)
    assert pts.shape == (shape[0] * shape[1], 2)
    assert spacing == pytest.approx(2 * g.spacing)
    assert np.all(np.abs(pts) <= 1.0)


def test_distance_in_X_euclidean_pair(ws):
    dx = ws.grid.spacing
    eps = 0.4
    x = np.array([-0.9, 0.0])
    y = np.array([0.6, 0.3])
    d = rc.recover_distance_in_X(ws, x, y, eps)
    assert d == pytest.approx(np.linalg.norm(x - y), abs=2 * dx + eps)


def test_distance_in_X_coincident_floor(ws):
    # the ball-separation correction bounds the x = y output by ~1.5 eps
    eps = 0.4
    d = rc.recover_distance_in_X(ws, [0.3, 0.3], [0.3, 0.3], eps)
    assert 0.0 <= d <= 1.5 * eps + 2 * ws.grid.spacing


def test_wave_ball_nested(ws):
    ok, res = rc.wave_ball_inclusion_test(
        ws, [0.0, 0.0], 1.0, [0.0, 0.0], 1.4, [0.0, 0.0], 1.4, 0.4,
        return_residual=True,
    )
    assert ok
    assert res <= 0.05


def test_wave_ball_disjoint(ws):
    ok, res = rc.wave_ball_inclusion_test(
        ws, [1.5, 1.5], 0.9, [-1.5, -1.5], 0.9, [-1.5, 1.5], 0.9, 0.4,
        return_residual=True,
    )
    assert not ok
    assert res >= 0.9


def test_wave_ball_genuine_cover(ws):
    ok = rc.wave_ball_inclusion_test(
        ws, [0.0, 0.0], 1.4, [-0.8, 0.0], 2.3, [0.8, 0.0], 2.3, 0.4
    )
    assert ok


def test_wave_ball_matches_oracle_sweep(ws):
    eps = 0.4
    dx = ws.grid.spacing
    rng = np.random.default_rng(5)
    agree = 0
    n = 12
    for _ in range(n):
        p, y, z = rng.uniform(-0.6, 0.6, (3, 2))
        lp = rng.uniform(0.9, 1.4)
        ly, lz = rng.uniform(0.9, 1.9, 2)
        got = rc.wave_ball_inclusion_test(ws, p, lp, y, ly, z, lz, eps)
        want = geo.ball_inclusion_oracle(ws.metric, p, lp, y, ly, z, lz)
        if got == want:
            agree += 1
        else:
            # disagreements may only occur near the decision boundary
            assert abs(euclid_cover_margin(p, lp, y, ly, z, lz)) <= 3 * dx
    assert agree >= 0.9 * n


def test_nonradiating_examples(data):
    region = sv.SubBox.centered([0.5, 0.0], 0.8)
    t0 = 1.4
    phi = sv.SourceTerm.bump(0.6, [-0.5, 0.0], 0.4, 0.5)
    silent = rc._box_of_bump(data, phi)
    assert rc.nonradiating_test(data, silent, t0, region)
    loud = sv.SourceTerm.bump(0.6, [-0.5, 0.0], 0.4, 0.5)
    assert not rc.nonradiating_test(data, loud, t0, region)
    assert rc.nonradiating_test(data, loud.scaled(0.0), t0, region)


def test_future_cone_single_flip(data):
    x1 = np.array([-0.6, 0.0])
    x2 = np.array([0.6, 0.0])
    eps = 0.375
    d = np.linalg.norm(x1 - x2)
    ts = np.linspace(0.5, 2.4, 9)
    flags = [rc.future_cone_test(data, x1, x2, t, eps) for t in ts]
    assert flags[0] and not flags[-1]
    flips = [i for i in range(len(flags) - 1) if flags[i] != flags[i + 1]]
    assert len(flips) == 1
    # the flip brackets the oracle distance up to grid and ball widths
    lo, hi = ts[flips[0]], ts[flips[0] + 1]
    slack = 3 * data.metric.grid.spacing + 2 * eps
    assert lo - slack <= d <= hi + slack


def test_recover_distance_via_future_euclid(data):
    x1 = np.array([-0.5, 0.1])
    x2 = np.array([0.5, 0.1])
    d = rc.recover_distance_via_future(data, x1, x2, (0.5, 0.375))
    assert d == pytest.approx(1.0, abs=3 * data.metric.grid.spacing)
    with pytest.raises(ValueError):
        rc.recover_distance_via_future(data, x1, x2, (0.375, 0.5))


def synthetic_family():
    g = Grid(2, 12.0, 48)
    region = sv.SubBox.centered([0.0, 0.0], 1.0)
    pts, shape, spacing = rc.observation_grid(region, g)
    probes = {
        "p0": np.array([0.3, 2.2]),
        "p1": np.array([0.55, 2.2]),
        "p2": np.array([0.05, 2.2]),
        "p3": np.array([0.3, 2.45]),
        "p4": np.array([0.3, 1.95]),
    }
    vals = np.array(
        [np.linalg.norm(pts - p, axis=-1) for p in probes.values()]
    )
    fam = rc.DistanceFamily(
        points=pts,
        probe_ids=list(probes),
        generators=[tuple(p) for p in probes.values()],
        values=vals,
        grid_shape=shape,
        spacing=spacing,
    )
    return fam, probes, geo.euclidean_field(g)


def test_distance_family_serialization(tmp_path):
    fam, _, _ = synthetic_family()
    fam.save(tmp_path / "fam.csv", tmp_path / "fam.json")
    lines = (tmp_path / "fam.csv").read_text().strip().split("\n")
    assert len(lines) == 1 + len(fam.probe_ids)
    first = lines[1].split(",")
    assert first[0] == "p0"
    np.testing.assert_allclose(
        [float(v) for v in first[1:]], fam.row("p0"), rtol=1e-10
    )
    man = json.loads((tmp_path / "fam.json").read_text())
    assert man["grid_shape"] == list(fam.grid_shape)
    assert man["spacing"] == fam.spacing


def test_reverse_triangle_defect_nonpositive_for_exact_family():
    fam, _, _ = synthetic_family()
    defect = fam.reverse_triangle_defect(
        lambda a, b: float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    )
    assert defect <= 1e-9


def test_build_distance_family_empty():
    g = Grid(2, 12.0, 48)
    m = geo.euclidean_field(g)
    ws_small = rc.BlagoWorkspace(m, sv.SubBox.centered([0.0, 0.0], 1.5), 4.0)
    pts = np.array([[0.0, 0.0], [0.5, 0.5]])
    fam = rc.build_distance_family(ws_small, {}, pts)
    assert fam.values.shape == (0, 2)
    assert fam.probe_ids == []


def test_chart_coordinates_euclidean():
    fam, probes, metric = synthetic_family()
    cp = rc.chart_coordinates(fam, "p0", (4, 4), metric)
    z = fam.points.reshape(fam.grid_shape + (-1,))[4, 4]
    np.testing.assert_allclose(cp.vector, probes["p0"] - z, atol=5e-2)
    assert cp.g_norm(metric) == pytest.approx(
        np.linalg.norm(probes["p0"] - z), abs=5e-2
    )


def test_chart_needs_grid():
    fam, _, metric = synthetic_family()
    flat = rc.DistanceFamily(
        points=fam.points,
        probe_ids=fam.probe_ids,
        generators=fam.generators,
        values=fam.values,
    )
    with pytest.raises(ValueError):
        rc.chart_coordinates(flat, "p0", (4, 4), metric)


def test_recover_metric_euclidean_identity():
    fam, probes, metric = synthetic_family()
    est = rc.recover_metric(fam, "p0", ["p1", "p2", "p3", "p4"], metric)
    np.testing.assert_allclose(est.matrix, np.eye(2), atol=5e-2)
    assert est.positive_definite
    assert est.residual <= 5e-2
    assert est.n_covectors == fam.points.shape[0]
    blob = est.to_json()
    assert np.allclose(blob["matrix"], est.matrix.tolist())


def test_pushforward_oracle_euclidean_identity():
    fam, probes, metric = synthetic_family()
    truth = rc.pushforward_oracle(fam, probes, "p0", metric)
    np.testing.assert_allclose(truth, np.eye(2), atol=5e-2)
