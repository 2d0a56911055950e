"""Metric fields, geodesics and ground-truth geometry oracles.

The distance oracle is a graph shortest-path solver on the grid (wide
first-neighbor stencil plus one local relaxation pass).  It is deliberately
independent of the wave-based recovery routes so it can serve as ground truth
for them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from typing import NamedTuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .grid import Grid


class OutOfDomainError(ValueError):
    """A query point lies outside the grid box."""


class GeodesicExit(RuntimeError):
    """A geodesic left the box before the requested time."""

    def __init__(self, exit_time: float, point: np.ndarray):
        super().__init__(f"geodesic left the box at t={exit_time:.6g}")
        self.exit_time = exit_time
        self.point = point


# ---------------------------------------------------------------------------
# analytic metric descriptions (used for fixtures and for smooth geodesics)


class _Euclidean:
    kind = "euclidean"

    def g(self, x):
        x = np.asarray(x, dtype=float)
        return np.eye(x.shape[-1])

    def ginv(self, x):
        return self.g(x)

    def dginv(self, x):
        n = np.asarray(x).shape[-1]
        return np.zeros((n, n, n))

    def params(self):
        return {}


class _Diag:
    kind = "diag"

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)

    def g(self, x):
        return np.diag(self.values)

    def ginv(self, x):
        return np.diag(1.0 / self.values)

    def dginv(self, x):
        n = len(self.values)
        return np.zeros((n, n, n))

    def params(self):
        return {"values": self.values.tolist()}


class _ConformalLens:
    """g = c(x)^{-2} delta with c = 1 - amplitude * exp(-|x-c0|^2 / sigma^2)."""

    kind = "conformal_lens"

    def __init__(self, dim, amplitude, sigma, center=None):
        self.dim = dim
        self.amplitude = float(amplitude)
        self.sigma = float(sigma)
        self.center = np.zeros(dim) if center is None else np.asarray(center, float)

    def speed(self, x):
        r2 = np.sum((np.asarray(x, float) - self.center) ** 2, axis=-1)
        return 1.0 - self.amplitude * np.exp(-r2 / self.sigma**2)

    def _speed_grad(self, x):
        d = np.asarray(x, float) - self.center
        r2 = np.sum(d * d, axis=-1)
        return self.amplitude * np.exp(-r2 / self.sigma**2) * 2.0 * d / self.sigma**2

    def g(self, x):
        c = self.speed(x)
        return np.eye(self.dim) / c**2

    def ginv(self, x):
        c = self.speed(x)
        return np.eye(self.dim) * c**2

    def dginv(self, x):
        # d/dx_k (c^2 delta_ij) = 2 c dc/dx_k delta_ij
        c = self.speed(x)
        dc = self._speed_grad(x)
        out = np.zeros((self.dim, self.dim, self.dim))
        for k in range(self.dim):
            out[k] = 2.0 * c * dc[k] * np.eye(self.dim)
        return out

    def params(self):
        return {
            "amplitude": self.amplitude,
            "sigma": self.sigma,
            "center": self.center.tolist(),
        }


# ---------------------------------------------------------------------------
# domain types


@dataclass
class MetricField:
    """Grid-sampled symmetric positive definite tensor, Euclidean far out.

    Immutable after construction; the private caches only memoize derived
    read-only data (shortest-path graph, distance fields).
    """

    grid: Grid
    tensor: np.ndarray  # (*grid.shape, dim, dim)
    euclidean_radius: float
    analytic: object | None = None
    _cache: dict = dc_field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        expected = self.grid.shape + (self.grid.dim, self.grid.dim)
        if self.tensor.shape != expected:
            raise ValueError(f"tensor shape {self.tensor.shape} != {expected}")

    def eigenvalue_range(self) -> tuple[float, float]:
        ev = np.linalg.eigvalsh(self.tensor.reshape(-1, self.grid.dim, self.grid.dim))
        return float(ev.min()), float(ev.max())

    @property
    def c_max(self) -> float:
        """Speed bound used for CFL and enlarged-box sizing."""
        lam_min, lam_max = self.eigenvalue_range()
        return max(math.sqrt(lam_max), 1.0 / math.sqrt(lam_min))

    def sqrt_det(self) -> np.ndarray:
        key = "sqrt_det"
        if key not in self._cache:
            det = np.linalg.det(self.tensor)
            self._cache[key] = np.sqrt(det)
        return self._cache[key]

    def inverse_tensor(self) -> np.ndarray:
        key = "inv"
        if key not in self._cache:
            self._cache[key] = np.linalg.inv(self.tensor)
        return self._cache[key]


@dataclass(frozen=True)
class TangentVector:
    base_point: tuple
    components: tuple

    def as_arrays(self):
        return np.asarray(self.base_point, float), np.asarray(self.components, float)

    def g_norm(self, fld: MetricField) -> float:
        x, v = self.as_arrays()
        g = interp_metric(fld, x)
        return float(np.sqrt(v @ g @ v))

    def normalized(self, fld: MetricField) -> "TangentVector":
        x, v = self.as_arrays()
        n = self.g_norm(fld)
        if n == 0:
            raise ValueError("cannot normalize zero vector")
        return TangentVector(tuple(x), tuple(v / n))


@dataclass
class DistanceField:
    source: np.ndarray
    grid: Grid
    values: np.ndarray  # (*grid.shape,)

    def at(self, x) -> float:
        """Multilinear interpolation of the distance values at ``x``."""
        return float(_interp_scalar(self.grid, self.values, np.asarray(x, float)))

    def to_csv(self, path):
        pts = self.grid.centers.reshape(-1, self.grid.dim)
        vals = self.values.reshape(-1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.grid.dim)] + ["value"])
            for p, v in zip(pts, vals):
                w.writerow([f"{c:.17g}" for c in p] + [f"{v:.17g}"])


class CutResult(NamedTuple):
    value: float
    observed: bool  # False: geodesic left the box before any cut


# ---------------------------------------------------------------------------
# constructors


def euclidean_field(grid: Grid) -> MetricField:
    tensor = np.broadcast_to(
        np.eye(grid.dim), grid.shape + (grid.dim, grid.dim)
    ).copy()
    return MetricField(grid, tensor, euclidean_radius=0.0, analytic=_Euclidean())


def diag_field(grid: Grid, values) -> MetricField:
    values = np.asarray(values, dtype=float)
    tensor = np.broadcast_to(
        np.diag(values), grid.shape + (grid.dim, grid.dim)
    ).copy()
    r = grid.extent  # constant field: "Euclidean radius" is the whole box
    return MetricField(grid, tensor, euclidean_radius=r, analytic=_Diag(values))


def conformal_lens_field(
    grid: Grid, amplitude: float = 0.4, sigma: float | None = None, center=None
) -> MetricField:
    """Canonical slow-lens fixture: c = 1 - amplitude * exp(-r^2/sigma^2)."""
    if sigma is None:
        sigma = 0.15 * grid.extent
    lens = _ConformalLens(grid.dim, amplitude, sigma, center)
    c = lens.speed(grid.centers)
    tensor = np.zeros(grid.shape + (grid.dim, grid.dim))
    for i in range(grid.dim):
        tensor[..., i, i] = 1.0 / c**2
    return MetricField(grid, tensor, euclidean_radius=3.0 * sigma, analytic=lens)


def metric_from_json(grid: Grid, desc: dict) -> MetricField:
    """Build a fixture metric from a JSON description.

    ``{"kind": "euclidean"}``, ``{"kind": "diag", "values": [...]}`` or
    ``{"kind": "conformal_lens", "amplitude": a, "sigma": s, "center": [...]}``.
    """
    kind = desc.get("kind")
    if kind == "euclidean":
        return euclidean_field(grid)
    if kind == "diag":
        return diag_field(grid, desc["values"])
    if kind == "conformal_lens":
        return conformal_lens_field(
            grid,
            amplitude=desc.get("amplitude", 0.4),
            sigma=desc.get("sigma"),
            center=desc.get("center"),
        )
    raise ValueError(f"unknown metric kind {kind!r}")


def metric_to_json(fld: MetricField) -> dict:
    if fld.analytic is None:
        raise ValueError("only analytic fixtures have a JSON form")
    return {"kind": fld.analytic.kind, **fld.analytic.params()}


# ---------------------------------------------------------------------------
# interpolation


def _interp_weights(grid: Grid, x: np.ndarray):
    """Corner indices and weights for multilinear interpolation at ``x``."""
    h = grid.spacing
    u = (x + 0.5 * grid.extent) / h - 0.5  # fractional cell-center coordinate
    i0 = np.floor(u).astype(int)
    frac = u - i0
    corners = []
    for corner in range(2**grid.dim):
        idx = []
        w = 1.0
        for a in range(grid.dim):
            bit = (corner >> a) & 1
            ia = i0[a] + bit
            if grid.periodic:
                ia = ia % grid.cells
            else:
                ia = min(max(ia, 0), grid.cells - 1)
            idx.append(ia)
            w *= frac[a] if bit else (1.0 - frac[a])
        corners.append((tuple(idx), w))
    return corners


def _interp_scalar(grid: Grid, values: np.ndarray, x: np.ndarray) -> float:
    return sum(w * values[idx] for idx, w in _interp_weights(grid, x))


def interp_metric(fld: MetricField, x) -> np.ndarray:
    """Multilinear interpolation of the metric tensor at a continuous point."""
    x = np.asarray(x, dtype=float)
    if not fld.grid.periodic and not fld.grid.contains(x):
        raise OutOfDomainError(f"point {x} outside the grid box")
    out = np.zeros((fld.grid.dim, fld.grid.dim))
    for idx, w in _interp_weights(fld.grid, x):
        out += w * fld.tensor[idx]
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# graph shortest-path distance oracle


def _moves(dim: int) -> np.ndarray:
    """Primitive lattice moves: wide stencil keeps metrication error small."""
    reach = 3 if dim <= 2 else 2
    rng = range(-reach, reach + 1)
    moves = []
    for off in np.ndindex(*((2 * reach + 1,) * dim)):
        m = tuple(o - reach for o in off)
        if all(v == 0 for v in m):
            continue
        if math.gcd(*[abs(v) for v in m]) != 1 if dim > 1 else abs(m[0]) != 1:
            continue
        moves.append(m)
    return np.array(moves, dtype=int)


def _quadratic_form(fld: MetricField, d: np.ndarray) -> np.ndarray:
    """d^T g(x) d at every cell for a fixed displacement d."""
    return np.einsum("...ij,i,j->...", fld.tensor, d, d)


def _edge_data(fld: MetricField):
    """Cached (move, neighbor-index, weight) arrays for the distance graph."""
    if "edges" in fld._cache:
        return fld._cache["edges"]
    grid = fld.grid
    moves = _moves(grid.dim)
    h = grid.spacing
    n = grid.n_cells
    idx_nd = np.indices(grid.shape).reshape(grid.dim, -1)
    rows_all, cols_all, data_all = [], [], []
    per_move = []
    for m in moves:
        tgt = idx_nd + m[:, None]
        if grid.periodic:
            tgt = tgt % grid.cells
            valid = np.ones(n, dtype=bool)
        else:
            valid = np.all((tgt >= 0) & (tgt < grid.cells), axis=0)
        src_flat = np.arange(n)[valid]
        tgt_flat = np.ravel_multi_index(
            tuple(tgt[:, valid]), grid.shape
        )
        d = m.astype(float) * h
        qf = _quadratic_form(fld, d).reshape(-1)
        w = np.sqrt(0.5 * (qf[src_flat] + qf[tgt_flat]))
        rows_all.append(src_flat)
        cols_all.append(tgt_flat)
        data_all.append(w)
        per_move.append((src_flat, tgt_flat, w))
    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    data = np.concatenate(data_all)
    fld._cache["edges"] = (moves, per_move, rows, cols, data)
    return fld._cache["edges"]


def _segment_length(fld: MetricField, a: np.ndarray, b: np.ndarray) -> float:
    d = fld.grid.displacement(a, b)
    ga = interp_metric(fld, fld.grid.wrap(a))
    gb = interp_metric(fld, fld.grid.wrap(b))
    return float(np.sqrt(0.5 * (d @ ga @ d + d @ gb @ d)))


def distance_field_from(fld: MetricField, p) -> DistanceField:
    """Distances from ``p`` to every cell center (graph Dijkstra + one pass)."""
    p = np.asarray(p, dtype=float)
    if not fld.grid.periodic and not fld.grid.contains(p):
        raise OutOfDomainError(f"source {p} outside the grid box")
    key = ("dfield", tuple(np.round(p, 12)))
    if key in fld._cache:
        return fld._cache[key]

    grid = fld.grid
    n = grid.n_cells
    _, per_move, rows, cols, data = _edge_data(fld)

    # virtual source node n, connected to cells near p with exact segment lengths
    centers = grid.centers.reshape(-1, grid.dim)
    dp = centers - p
    if grid.periodic:
        dp = (dp + 0.5 * grid.extent) % grid.extent - 0.5 * grid.extent
    near = np.where(np.max(np.abs(dp), axis=1) <= 2.0 * grid.spacing + 1e-12)[0]
    wsrc = np.array([_segment_length(fld, p, centers[j]) for j in near])

    graph = coo_matrix(
        (
            np.concatenate([data, wsrc]),
            (
                np.concatenate([rows, np.full(len(near), n)]),
                np.concatenate([cols, near]),
            ),
        ),
        shape=(n + 1, n + 1),
    ).tocsr()
    dist = dijkstra(graph, directed=True, indices=n)[:n]

    # one local relaxation pass over the same stencil
    for src_flat, tgt_flat, w in per_move:
        np.minimum.at(dist, src_flat, dist[tgt_flat] + w)

    out = DistanceField(source=p, grid=grid, values=dist.reshape(grid.shape))
    fld._cache[key] = out
    return out


def _endpoint_distance(fld: MetricField, dfield: DistanceField, q: np.ndarray) -> float:
    """Close the path at a continuous endpoint through nearby cell centers."""
    grid = fld.grid
    centers = grid.centers.reshape(-1, grid.dim)
    dq = centers - q
    if grid.periodic:
        dq = (dq + 0.5 * grid.extent) % grid.extent - 0.5 * grid.extent
    near = np.where(np.max(np.abs(dq), axis=1) <= 2.0 * grid.spacing + 1e-12)[0]
    vals = dfield.values.reshape(-1)
    best = math.inf
    for j in near:
        best = min(best, vals[j] + _segment_length(fld, centers[j], q))
    direct = _segment_length(fld, dfield.source, q)
    return min(best, direct)


def distance_oracle(fld: MetricField, p, q) -> float:
    """Riemannian distance between two points (graph oracle).

    Exactly symmetric: the source is chosen by lexicographic order so both
    argument orders evaluate the identical computation.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    for x in (p, q):
        if not fld.grid.periodic and not fld.grid.contains(x):
            raise OutOfDomainError(f"point {x} outside the grid box")
    if tuple(q) < tuple(p):
        p, q = q, p
    dfield = distance_field_from(fld, p)
    return _endpoint_distance(fld, dfield, q)


# ---------------------------------------------------------------------------
# geodesics


def _hamiltonian_rhs(fld: MetricField, x, mom):
    if fld.analytic is not None:
        ginv = fld.analytic.ginv(x)
        dginv = fld.analytic.dginv(x)
    else:
        ginv = np.linalg.inv(interp_metric(fld, fld.grid.wrap(x)))
        h = fld.grid.spacing / 4.0
        dginv = np.zeros((fld.grid.dim,) * 3)
        for k in range(fld.grid.dim):
            e = np.zeros(fld.grid.dim)
            e[k] = h
            gp = np.linalg.inv(interp_metric(fld, fld.grid.wrap(x + e)))
            gm = np.linalg.inv(interp_metric(fld, fld.grid.wrap(x - e)))
            dginv[k] = (gp - gm) / (2 * h)
    dx = ginv @ mom
    dp = -0.5 * np.einsum("kij,i,j->k", dginv, mom, mom)
    return dx, dp


def _shoot(fld: MetricField, y, xi, t, step=None):
    """RK4 integration of the geodesic Hamiltonian flow.

    Returns (positions, momenta, times); stops early on box exit.
    """
    grid = fld.grid
    y = np.asarray(y, dtype=float)
    xi = np.asarray(xi, dtype=float)
    g0 = (
        fld.analytic.g(y)
        if fld.analytic is not None
        else interp_metric(fld, grid.wrap(y))
    )
    mom = g0 @ xi
    if step is None:
        step = grid.spacing / 4.0
    nsteps = max(1, int(math.ceil(t / step)))
    dt = t / nsteps
    xs = [y.copy()]
    ps = [mom.copy()]
    ts = [0.0]
    x, p = y.copy(), mom.copy()
    for i in range(nsteps):
        k1x, k1p = _hamiltonian_rhs(fld, x, p)
        k2x, k2p = _hamiltonian_rhs(fld, x + 0.5 * dt * k1x, p + 0.5 * dt * k1p)
        k3x, k3p = _hamiltonian_rhs(fld, x + 0.5 * dt * k2x, p + 0.5 * dt * k2p)
        k4x, k4p = _hamiltonian_rhs(fld, x + dt * k3x, p + dt * k3p)
        x = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        p = p + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        if not grid.periodic and not grid.contains(x):
            return np.array(xs), np.array(ps), np.array(ts)
        xs.append(x.copy())
        ps.append(p.copy())
        ts.append((i + 1) * dt)
    return np.array(xs), np.array(ps), np.array(ts)


def geodesic_shoot(fld: MetricField, y, xi, t, return_velocity=False):
    """Endpoint of the unit-speed geodesic from ``y`` with initial velocity ``xi``."""
    tv = TangentVector(tuple(np.asarray(y, float)), tuple(np.asarray(xi, float)))
    if abs(tv.g_norm(fld) - 1.0) > 1e-9:
        raise ValueError("initial velocity must be g-unit")
    xs, ps, ts = _shoot(fld, y, xi, t)
    if ts[-1] < t - 1e-12:
        raise GeodesicExit(float(ts[-1]), xs[-1])
    if return_velocity:
        x = xs[-1]
        ginv = (
            fld.analytic.ginv(x)
            if fld.analytic is not None
            else np.linalg.inv(interp_metric(fld, fld.grid.wrap(x)))
        )
        return xs[-1], ginv @ ps[-1]
    return xs[-1]


def cut_distance_oracle(fld: MetricField, y, xi, t_max=None) -> CutResult:
    """First time the geodesic from (y, xi) stops minimizing, by bisection.

    Compares the arc-length parameter with the distance-field oracle; the
    detection tolerance is 3 grid spacings (tol below grid resolution is
    meaningless).
    """
    grid = fld.grid
    tol_cut = 3.0 * grid.spacing
    if t_max is None:
        t_max = 1.5 * grid.extent * fld.c_max if grid.periodic else 4.0 * grid.extent
    y = np.asarray(y, float)
    dfield = distance_field_from(fld, y)
    xs, _, ts = _shoot(fld, y, np.asarray(xi, float), t_max)
    exited = ts[-1] < t_max - 1e-12

    def gap(i):
        return ts[i] - _endpoint_distance(fld, dfield, grid.wrap(xs[i]))

    hit = None
    for i in range(len(ts)):
        if gap(i) > tol_cut:
            hit = i
            break
    if hit is None:
        return CutResult(float(ts[-1]), observed=False) if exited else CutResult(
            float(ts[-1]), observed=False
        )
    lo, hi = max(hit - 1, 0), hit
    tlo, thi = ts[lo], ts[hi]
    # bisection depth 20 on the continuous parameter
    for _ in range(20):
        tm = 0.5 * (tlo + thi)
        xm, _, tm_arr = _shoot(fld, y, np.asarray(xi, float), tm)
        d = _endpoint_distance(fld, dfield, grid.wrap(xm[-1]))
        if tm_arr[-1] - d > tol_cut:
            thi = tm
        else:
            tlo = tm
    return CutResult(0.5 * (tlo + thi), observed=True)


# ---------------------------------------------------------------------------
# ball inclusion


def ball_inclusion_oracle(fld: MetricField, p, lp, y, ly, z, lz) -> bool:
    """Is B(p, lp) contained in closure(B(y, ly) ∪ B(z, lz))?

    Grid evaluation with a half-spacing margin for boundary cells.
    """
    for r in (lp, ly, lz):
        if r <= 0:
            raise ValueError("radii must be positive")
    h2 = 0.5 * fld.grid.spacing
    dp = distance_field_from(fld, p).values
    dy = distance_field_from(fld, y).values
    dz = distance_field_from(fld, z).values
    interior = dp < lp - h2
    covered = (dy <= ly + h2) | (dz <= lz + h2)
    return bool(np.all(covered[interior]))
