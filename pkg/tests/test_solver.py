import numpy as np
import pytest

from pwl import geometry as geo
from pwl import solver as sv
from pwl.grid import Grid


def test_smooth_bump_support():
    s = np.array([-2.0, -1.0, 0.0, 0.5, 1.0, 3.0])
    v = sv.smooth_bump(s)
    assert v[0] == v[1] == v[4] == v[5] == 0.0
    assert v[2] == pytest.approx(1.0)
    assert 0.0 < v[3] < 1.0


def test_subbox_slices_and_mask():
    g = Grid(2, 12.0, 48)
    box = sv.SubBox.centered([0.0, 0.0], 1.0)
    sl = box.slices(g)
    pts = g.centers[sl]
    assert np.all(np.abs(pts) <= 1.0)
    mask = box.mask(g)
    assert mask.sum() == pts.shape[0] * pts.shape[1]
    assert box.contains_point([0.9, -0.9])
    assert not box.contains_point([1.1, 0.0])
    assert box.diameter() == pytest.approx(np.sqrt(8.0))


def test_source_term_supports():
    f = sv.SourceTerm.bump(1.5, [0.5, -0.5], 1.0, 0.75)
    assert f.time_support == (0.5, 2.5)
    assert f.space_support.lo == (-0.25, -1.25)
    assert f.evaluate(1.5, np.array([0.5, -0.5])) == pytest.approx(1.0)
    assert f.evaluate(3.0, np.array([0.5, -0.5])) == 0.0
    assert f.evaluate(1.5, np.array([2.0, 2.0])) == 0.0
    assert f.scaled(2.0).evaluate(1.5, np.array([0.5, -0.5])) == pytest.approx(2.0)


def test_product_of_bumps():
    f = sv.SourceTerm.product_of_bumps(1.0, [0.0, 0.0], 1.0, [0.5, 2.0])
    # anisotropic support: outside along x, inside along y
    assert f.evaluate(1.0, np.array([0.6, 0.0])) == 0.0
    assert f.evaluate(1.0, np.array([0.0, 0.6])) > 0.0


def test_solver_config_validation():
    with pytest.raises(sv.ConfigError):
        sv.SolverConfig(cfl_factor=0.0)
    with pytest.raises(sv.ConfigError):
        sv.SolverConfig(boundary="absorbing")


def test_time_step_cfl(euclid):
    cfg = sv.SolverConfig(cfl_factor=0.5, horizon=2.0)
    dt, steps = cfg.time_step(euclid)
    assert dt * steps == pytest.approx(2.0)
    assert dt <= 0.5 * euclid.grid.spacing / np.sqrt(2.0) + 1e-12
    dte, se = sv.SolverConfig(horizon=2.0, even_steps=True).time_step(euclid)
    assert se % 2 == 0


def test_laplace_beltrami_self_adjoint(lens, rng):
    u = rng.standard_normal(lens.grid.shape)
    v = rng.standard_normal(lens.grid.shape)
    L = sv.LaplaceBeltrami(lens)
    lhs = sv.weighted_inner(lens, L(u), v)
    rhs = sv.weighted_inner(lens, u, L(v))
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


def test_energy_conserved_after_source_off(euclid):
    f = sv.SourceTerm.bump(0.5, [0.0, 0.0], 0.4, 1.0)
    cfg = sv.SolverConfig(horizon=3.0, boundary="dirichlet", snapshot_times=())
    fld = sv.solve_forward(euclid, f, cfg)
    fld.assert_finite()
    i0 = fld.step_of(fld.dt * round(1.2 / fld.dt))
    e0 = sv.energy(euclid, fld, i0)
    e1 = sv.energy(euclid, fld, fld.steps - 1)
    assert e1 == pytest.approx(e0, rel=1e-2)


def test_enlarged_box_too_small(euclid):
    f = sv.SourceTerm.bump(0.5, [0.0, 0.0], 0.4, 1.0)
    cfg = sv.SolverConfig(horizon=50.0, boundary="enlarged_box")
    with pytest.raises(sv.ConfigError):
        sv.solve_forward(euclid, f, cfg)


def test_wave_operator_inverts_solve(euclid):
    # solve then apply the discrete wave operator: recovers the source rows
    f = sv.SourceTerm.bump(0.6, [0.0, 0.0], 0.5, 1.0)
    cfg = sv.SolverConfig(horizon=2.0, boundary="dirichlet")
    fld = sv.solve_forward(euclid, f, cfg)
    back = sv.apply_wave_operator(euclid, fld)
    rows = sv.sample_source(euclid, f, cfg).samples
    # interior steps only; the operator cannot know the last-step data
    err = np.max(np.abs(back.samples[1:-1] - rows[1:-1]))
    assert err <= 1e-8 * max(np.max(np.abs(rows)), 1.0)


def test_record_region_restriction(euclid):
    box = sv.SubBox.centered([0.0, 0.0], 1.0)
    f = sv.SourceTerm.bump(0.5, [0.0, 0.0], 0.4, 0.8)
    cfg = sv.SolverConfig(horizon=1.5, boundary="dirichlet", record_region=box)
    fld = sv.solve_forward(euclid, f, cfg)
    want_shape = euclid.grid.centers[box.slices(euclid.grid)].shape[:-1]
    assert fld.samples.shape[1:] == want_shape


def test_snapshots(euclid):
    f = sv.SourceTerm.bump(0.5, [0.0, 0.0], 0.4, 0.8)
    cfg = sv.SolverConfig(horizon=2.0, boundary="dirichlet", snapshot_times=(1.0,))
    fld = sv.solve_forward(euclid, f, cfg)
    (t_snap,) = fld.snapshots
    assert t_snap == pytest.approx(1.0, abs=fld.dt)
    assert fld.snapshots[t_snap].shape == euclid.grid.shape


def test_spacetime_field_binary_round_trip(euclid, tmp_path):
    f = sv.SourceTerm.bump(0.5, [0.0, 0.0], 0.4, 0.8)
    cfg = sv.SolverConfig(horizon=1.0, boundary="dirichlet")
    fld = sv.solve_forward(euclid, f, cfg)
    path = tmp_path / "field.bin"
    fld.to_binary(path)
    back = sv.SpaceTimeField.from_binary(path, euclid.grid)
    np.testing.assert_array_equal(back.samples, fld.samples)
    assert back.dt == fld.dt
    assert back.t0 == fld.t0


def test_flipped_source():
    f = sv.SourceTerm.bump(0.5, [0.0, 0.0], 0.4, 0.8)
    flip = sv.FlippedSource(f, 3.0)
    assert flip.time_support == (0.5 + 2.0 - 0.4 + 0.4 - 0.4, 2.9)
    X = np.array([0.1, 0.1])
    assert flip.evaluate(2.6, X) == pytest.approx(f.evaluate(0.4, X))


def test_sum_source():
    f = sv.SourceTerm.bump(0.5, [-1.0, 0.0], 0.4, 0.5)
    h = sv.SourceTerm.bump(1.5, [1.0, 0.0], 0.4, 0.5)
    s = sv.SumSource([f, h])
    assert s.time_support == pytest.approx((0.1, 1.9))
    X = np.array([-1.0, 0.0])
    assert s.evaluate(0.5, X) == pytest.approx(f.evaluate(0.5, X))


def test_time_reversed_field(euclid):
    f = sv.SourceTerm.bump(0.5, [0.0, 0.0], 0.4, 0.8)
    cfg = sv.SolverConfig(horizon=1.0, boundary="dirichlet")
    fld = sv.solve_forward(euclid, f, cfg)
    rev = fld.time_reversed(1.0)
    np.testing.assert_array_equal(rev.samples, fld.samples[::-1])
