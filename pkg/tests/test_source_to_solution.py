import numpy as np
import pytest

from pwl import geometry as geo
from pwl import noise as nz
from pwl import solver as sv
from pwl import source_to_solution as s2s
from pwl.grid import Grid


@pytest.fixture(scope="module")
def setup():
    g = Grid(2, 16.0, 64)
    m = geo.euclidean_field(g)
    region = sv.SubBox.centered([0.0, 0.0], 2.0)
    f = sv.SourceTerm.bump(0.8, [0.5, 0.2], 0.6, 0.9)
    h = sv.SourceTerm.bump(1.0, [-0.6, -0.3], 0.7, 0.9)
    return m, region, f, h


def test_lambda_apply_support_check(setup):
    m, region, f, _ = setup
    outside = sv.SourceTerm.bump(0.5, [5.0, 5.0], 0.4, 0.5)
    with pytest.raises(ValueError):
        s2s.lambda_apply(m, outside, region, 6.0)
    late = sv.SourceTerm.bump(7.0, [0.0, 0.0], 0.5, 0.5)
    with pytest.raises(ValueError):
        s2s.lambda_apply(m, late, region, 6.0)


def test_lambda_record_round_trip(setup, tmp_path):
    m, region, f, h = setup
    rec = s2s.build_lambda_record(m, {"f": f, "h": h}, region, 6.0)
    rec.save(tmp_path / "rec")
    back = s2s.LambdaRecord.load(tmp_path / "rec")
    assert back.ids() == rec.ids()
    assert back.two_T == rec.two_T
    np.testing.assert_array_equal(back.weight, rec.weight)
    np.testing.assert_array_equal(
        back.response("f").samples, rec.response("f").samples
    )
    with pytest.raises(s2s.CatalogMissError):
        back.response("missing")


def test_j_operator_exact_on_constants():
    # J phi(t) = (T - t) c for phi = c on (0, 2T)
    dt = 0.1
    n = 40  # 2T = 4
    c = 3.0
    out = s2s.j_operator(np.full((n + 1, 2), c), dt)
    T = 0.5 * n * dt
    t = dt * np.arange(out.shape[0])
    want = c * (T - t)
    np.testing.assert_allclose(out[:, 0], want, atol=1e-12)


def test_blago_identity_matches_direct(setup):
    m, region, f, h = setup
    rec = s2s.build_lambda_record(m, {"f": f, "h": h}, region, 6.0)
    lhs = s2s.blago_inner_product(rec, "f", "h")
    rhs = s2s.final_state_inner(m, f, h, 3.0)
    assert abs(lhs - rhs) / abs(rhs) <= 3e-2


def test_nonradiating_source_reproduces_primitive(setup):
    m, region, _, h = setup
    cfg = sv.SolverConfig(horizon=4.0, boundary="dirichlet")
    phi_src = sv.SourceTerm.bump(1.0, [0.0, 0.0], 0.8, 1.0)
    phi = sv.solve_forward(m, phi_src, cfg)
    nr = s2s.nonradiating_source(m, phi, region)
    # solving with f = Box(phi) returns exactly phi
    back = sv.solve_forward(m, nr, sv.SolverConfig(horizon=4.0, boundary="dirichlet"))
    err = np.max(np.abs(back.samples[:-1] - phi.samples[:-1]))
    assert err <= 1e-8 * np.max(np.abs(phi.samples))


def test_nonradiating_needs_zero_start(setup):
    m, region, _, _ = setup
    bad = sv.SpaceTimeField(
        grid=m.grid, dt=0.1, samples=np.ones((5,) + m.grid.shape)
    )
    with pytest.raises(ValueError):
        s2s.nonradiating_source(m, bad, region)


def test_correlation_data_inner_symmetric(setup):
    m, _, f, h = setup
    prof = nz.CutoffProfile(ramp=0.5, kappa_center=(0.0, 0.0), kappa_radius=3.0)
    data = s2s.CorrelationData(m, prof, 6.0, sv.SolverConfig(boundary="dirichlet"))
    ab = data.inner(f, h)
    ba = data.inner(h, f)
    assert ab == pytest.approx(ba, rel=1e-12)
    assert data.inner(f, f) > 0.0


def test_correlation_data_cache_is_bounded(setup):
    m, _, f, _ = setup
    prof = nz.CutoffProfile(ramp=0.5, kappa_center=(0.0, 0.0), kappa_radius=2.0)
    data = s2s.CorrelationData(m, prof, 2.0, sv.SolverConfig(boundary="dirichlet"))
    data._cache_max = 3
    probes = [
        sv.SourceTerm.bump(0.5, [0.0, 0.0], 0.4, 0.5, amplitude=1.0 + 0.1 * k)
        for k in range(6)
    ]
    for p in probes:
        data.inner(p, f)
    assert len(data._cache) <= 3
    # cached entries pin their source objects so id() keys stay valid
    for key, (src, _) in data._cache.items():
        assert id(src) == key
