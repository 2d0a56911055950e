"""Leapfrog wave solves for u_tt - Delta_g u = f in divergence form.

The discrete Laplace-Beltrami operator is assembled in flux form with
face-averaged coefficients, which makes it exactly self-adjoint with respect
to the weighted inner product sum(u v sqrt|g| dx^n).  That exactness is what
the duality and Blagovestchenskii checks downstream lean on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .grid import Grid
from .geometry import MetricField


class ConfigError(ValueError):
    """Solver configuration violates a precondition (CFL, box sizing)."""


_SUPPORT_EPS = 1e-14


def smooth_bump(s):
    """The C-infinity bump exp(1 - 1/(1-s^2)) for |s| < 1, else 0."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    si = s[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - si * si))
    return out


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class SubBox:
    """Axis-aligned sub-box in physical coordinates."""

    lo: tuple
    hi: tuple

    @classmethod
    def centered(cls, center, halfwidth, dim=None):
        center = np.atleast_1d(np.asarray(center, dtype=float))
        if dim is not None and center.size == 1:
            center = np.full(dim, center[0])
        hw = np.broadcast_to(np.asarray(halfwidth, dtype=float), center.shape)
        return cls(tuple(center - hw), tuple(center + hw))

    @property
    def center(self):
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    @property
    def halfwidth(self):
        return 0.5 * (np.asarray(self.hi) - np.asarray(self.lo))

    def slices(self, grid: Grid) -> tuple:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        i0 = np.clip(
            np.ceil((lo + 0.5 * grid.extent) / grid.spacing - 0.5).astype(int),
            0,
            grid.cells,
        )
        i1 = np.clip(
            np.floor((hi + 0.5 * grid.extent) / grid.spacing - 0.5).astype(int) + 1,
            0,
            grid.cells,
        )
        return tuple(slice(int(a), int(b)) for a, b in zip(i0, i1))

    def mask(self, grid: Grid) -> np.ndarray:
        m = np.zeros(grid.shape, dtype=bool)
        m[self.slices(grid)] = True
        return m

    def contains_point(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def diameter(self) -> float:
        return float(np.linalg.norm(np.asarray(self.hi) - np.asarray(self.lo)))


# ---------------------------------------------------------------------------
# sources


@dataclass(frozen=True)
class SourceTerm:
    """Closed-form smooth compactly supported bump in space-time.

    kind "bump" uses a radial spatial profile, "product_of_bumps" a per-axis
    product; both share the temporal bump.  Evaluable at any resolution.
    """

    kind: str
    t_center: float
    x_center: tuple
    t_radius: float
    x_radius: tuple  # per-axis for product, (r,) * dim for radial
    amplitude: float = 1.0

    @classmethod
    def bump(cls, t_center, x_center, t_radius, x_radius, amplitude=1.0):
        x_center = tuple(np.atleast_1d(np.asarray(x_center, dtype=float)))
        return cls(
            "bump",
            float(t_center),
            x_center,
            float(t_radius),
            (float(x_radius),) * len(x_center),
            float(amplitude),
        )

    @classmethod
    def product_of_bumps(cls, t_center, x_center, t_radius, x_radii, amplitude=1.0):
        x_center = tuple(np.atleast_1d(np.asarray(x_center, dtype=float)))
        x_radii = np.broadcast_to(np.asarray(x_radii, dtype=float), (len(x_center),))
        return cls(
            "product_of_bumps",
            float(t_center),
            x_center,
            float(t_radius),
            tuple(x_radii),
            float(amplitude),
        )

    @property
    def time_support(self):
        return (self.t_center - self.t_radius, self.t_center + self.t_radius)

    @property
    def space_support(self) -> SubBox:
        c = np.asarray(self.x_center)
        r = np.asarray(self.x_radius)
        return SubBox(tuple(c - r), tuple(c + r))

    def evaluate(self, t, X) -> np.ndarray:
        """Evaluate at time ``t`` on points ``X`` of shape (..., dim)."""
        X = np.asarray(X, dtype=float)
        ft = smooth_bump(np.array((t - self.t_center) / self.t_radius))
        if ft == 0.0:
            return np.zeros(X.shape[:-1])
        d = X - np.asarray(self.x_center)
        if self.kind == "bump":
            s = np.sqrt(np.sum(d * d, axis=-1)) / self.x_radius[0]
            fx = smooth_bump(s)
        else:
            fx = np.ones(X.shape[:-1])
            for a, r in enumerate(self.x_radius):
                fx = fx * smooth_bump(d[..., a] / r)
        return self.amplitude * float(ft) * fx

    def scaled(self, factor) -> "SourceTerm":
        return SourceTerm(
            self.kind,
            self.t_center,
            self.x_center,
            self.t_radius,
            self.x_radius,
            self.amplitude * factor,
        )


class GriddedSource:
    """Source sampled on the solver grid, one row per time step.

    ``rows`` is either a (steps+1, *shape) array or a callable ``row(i)``
    returning the i-th time slice; streaming keeps white-noise runs in
    bounded memory.
    """

    kind = "gridded"

    def __init__(self, grid: Grid, dt: float, steps: int, rows, support: SubBox | None = None, time_support=None):
        self.grid = grid
        self.dt = dt
        self.steps = steps
        self._rows = rows
        self.space_support = support or SubBox(
            tuple(-0.5 * grid.extent * np.ones(grid.dim)),
            tuple(0.5 * grid.extent * np.ones(grid.dim)),
        )
        self.time_support = time_support or (0.0, steps * dt)

    def row(self, i: int) -> np.ndarray:
        if callable(self._rows):
            return self._rows(i)
        return self._rows[i]

    def materialize(self) -> np.ndarray:
        return np.array([self.row(i) for i in range(self.steps + 1)])


class FlippedSource:
    """Time reflection t -> S - t of another source."""

    kind = "flipped"

    def __init__(self, inner, S: float):
        self.inner = inner
        self.S = float(S)

    @property
    def time_support(self):
        a, b = self.inner.time_support
        return (self.S - b, self.S - a)

    @property
    def space_support(self):
        return self.inner.space_support

    def evaluate(self, t, X):
        return self.inner.evaluate(self.S - t, X)


class SumSource:
    """Finite linear combination of sources."""

    kind = "sum"

    def __init__(self, parts):
        self.parts = list(parts)

    @property
    def time_support(self):
        los, his = zip(*(p.time_support for p in self.parts))
        return (min(los), max(his))

    @property
    def space_support(self):
        los = np.min([p.space_support.lo for p in self.parts], axis=0)
        his = np.max([p.space_support.hi for p in self.parts], axis=0)
        return SubBox(tuple(los), tuple(his))

    def evaluate(self, t, X):
        out = np.zeros(np.asarray(X).shape[:-1])
        for p in self.parts:
            out = out + p.evaluate(t, X)
        return out


# ---------------------------------------------------------------------------
# solver configuration


@dataclass(frozen=True)
class SolverConfig:
    cfl_factor: float = 0.5
    horizon: float = 1.0
    record_region: SubBox | None = None
    boundary: str = "enlarged_box"  # enlarged_box | periodic | dirichlet
    snapshot_times: tuple = ()  # full-field snapshots at these times
    even_steps: bool = False  # force an even step count (midpoint on-grid)

    def __post_init__(self):
        if not (0.0 < self.cfl_factor <= 1.0):
            raise ConfigError(f"cfl_factor must be in (0, 1], got {self.cfl_factor}")
        if self.boundary not in ("enlarged_box", "periodic", "dirichlet"):
            raise ConfigError(f"unknown boundary mode {self.boundary!r}")

    def time_step(self, metric: MetricField) -> tuple[float, int]:
        grid = metric.grid
        dt0 = self.cfl_factor * grid.spacing / (math.sqrt(grid.dim) * metric.c_max)
        steps = max(1, int(math.ceil(self.horizon / dt0 - 1e-12)))
        if self.even_steps and steps % 2:
            steps += 1
        return self.horizon / steps, steps


@dataclass
class SpaceTimeField:
    """Discretized wave field; ``samples[i]`` is the field at t0 + i*dt."""

    grid: Grid
    dt: float
    samples: np.ndarray
    region: SubBox | None = None
    t0: float = 0.0
    snapshots: dict = dc_field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.samples.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.samples.shape[0])

    def assert_finite(self):
        if not np.all(np.isfinite(self.samples)):
            raise FloatingPointError("field contains NaN/Inf samples")

    def step_of(self, t: float) -> int:
        i = int(round((t - self.t0) / self.dt))
        if not (0 <= i <= self.steps):
            raise IndexError(f"time {t} outside recorded window")
        return i

    def time_reversed(self, S: float) -> "SpaceTimeField":
        """Field v with v(t) = self(S - t), on the reflected time window."""
        return SpaceTimeField(
            grid=self.grid,
            dt=self.dt,
            samples=self.samples[::-1].copy(),
            region=self.region,
            t0=S - (self.t0 + self.dt * self.steps),
        )

    def to_binary(self, path):
        """Flat binary dump: little-endian header (dims) then float64 data."""
        with open(path, "wb") as fh:
            header = np.array(
                [self.grid.dim, self.samples.shape[0]]
                + list(self.samples.shape[1:]),
                dtype="<i8",
            )
            fh.write(np.array([header.size], dtype="<i8").tobytes())
            fh.write(header.tobytes())
            fh.write(
                np.array(
                    [self.dt, self.grid.spacing, self.t0], dtype="<f8"
                ).tobytes()
            )
            fh.write(self.samples.astype("<f8").tobytes())

    @classmethod
    def from_binary(cls, path, grid: Grid, region: SubBox | None = None):
        with open(path, "rb") as fh:
            (hsize,) = np.frombuffer(fh.read(8), dtype="<i8")
            header = np.frombuffer(fh.read(8 * int(hsize)), dtype="<i8")
            dt, _, t0 = np.frombuffer(fh.read(24), dtype="<f8")
            shape = tuple(int(v) for v in header[1:])
            data = np.frombuffer(fh.read(), dtype="<f8").reshape(shape)
        return cls(grid=grid, dt=float(dt), samples=data.copy(), region=region, t0=float(t0))


# ---------------------------------------------------------------------------
# discrete Laplace-Beltrami


class LaplaceBeltrami:
    """Flux-form divergence discretization; exactly self-adjoint wrt sqrt|g|."""

    def __init__(self, metric: MetricField, periodic: bool | None = None):
        self.metric = metric
        self.grid = metric.grid
        self.periodic = self.grid.periodic if periodic is None else periodic
        w = metric.sqrt_det()
        ginv = metric.inverse_tensor()
        self.weight = w
        dim = self.grid.dim
        self.A = [[w * ginv[..., j, k] for k in range(dim)] for j in range(dim)]
        self.h = self.grid.spacing
        self._offdiag = any(
            np.any(self.A[j][k] != 0.0)
            for j in range(dim)
            for k in range(dim)
            if j != k
        )

    def _shift(self, u, axis, n):
        if self.periodic:
            return np.roll(u, -n, axis=axis)
        pad = [(0, 0)] * u.ndim
        if n > 0:
            pad[axis] = (0, n)
            return np.pad(u, pad)[
                tuple(
                    slice(n, None) if a == axis else slice(None)
                    for a in range(u.ndim)
                )
            ]
        pad[axis] = (-n, 0)
        return np.pad(u, pad)[
            tuple(
                slice(None, n) if a == axis else slice(None) for a in range(u.ndim)
            )
        ]

    def __call__(self, u: np.ndarray) -> np.ndarray:
        dim = self.grid.dim
        h2 = self.h * self.h
        out = np.zeros_like(u)
        for j in range(dim):
            a = self.A[j][j]
            a_face = 0.5 * (a + self._shift(a, j, 1))  # face j+1/2
            flux_hi = a_face * (self._shift(u, j, 1) - u)
            a_face_lo = self._shift(a_face, j, -1)
            flux_lo = a_face_lo * (u - self._shift(u, j, -1))
            out += (flux_hi - flux_lo) / h2
        if self._offdiag:
            for j in range(dim):
                for k in range(dim):
                    if j == k:
                        continue
                    dku = (self._shift(u, k, 1) - self._shift(u, k, -1)) / (2 * self.h)
                    v = self.A[j][k] * dku
                    out += (self._shift(v, j, 1) - self._shift(v, j, -1)) / (2 * self.h)
        return out / self.weight


def apply_laplace_beltrami(metric: MetricField, u: np.ndarray) -> np.ndarray:
    return _laplace(metric)(u)


def _laplace(metric: MetricField, periodic=None) -> LaplaceBeltrami:
    key = ("laplace", periodic)
    if key not in metric._cache:
        metric._cache[key] = LaplaceBeltrami(metric, periodic)
    return metric._cache[key]


# ---------------------------------------------------------------------------
# inner products and energies


def weighted_inner(metric: MetricField, u: np.ndarray, v: np.ndarray, region: SubBox | None = None) -> float:
    """Spatial inner product sum(u v sqrt|g|) dx^n."""
    w = metric.sqrt_det()
    if region is not None:
        sl = region.slices(metric.grid)
        u, v, w = u[sl], v[sl], w[sl]
    return float(np.sum(u * v * w) * metric.grid.spacing ** metric.grid.dim)


def spacetime_inner(metric: MetricField, a: SpaceTimeField, b: SpaceTimeField) -> float:
    """Space-time inner product; fields must share grid, dt and window."""
    if a.samples.shape != b.samples.shape or abs(a.t0 - b.t0) > 1e-12:
        raise ValueError("fields are not aligned")
    w = metric.sqrt_det()
    if a.region is not None:
        w = w[a.region.slices(metric.grid)]
    tot = float(np.sum(a.samples * b.samples * w))
    return tot * a.dt * metric.grid.spacing ** metric.grid.dim


def pair_field_source(metric: MetricField, fld: SpaceTimeField, source) -> float:
    """Discrete pairing <u, f> = sum u(t_i, x_j) f(t_i, x_j) sqrt|g| dt dx^n."""
    grid = metric.grid
    w = metric.sqrt_det()
    region_sl = fld.region.slices(grid) if fld.region is not None else tuple(
        [slice(None)] * grid.dim
    )
    pts = grid.centers[region_sl]
    wr = w[region_sl]
    tot = 0.0
    t_lo, t_hi = source.time_support
    for i, t in enumerate(fld.times):
        if t < t_lo - _SUPPORT_EPS or t > t_hi + _SUPPORT_EPS:
            continue
        f = source.evaluate(t, pts)
        tot += float(np.sum(fld.samples[i] * f * wr))
    return tot * fld.dt * grid.spacing**grid.dim


def energy(metric: MetricField, fld: SpaceTimeField, step: int) -> float:
    return local_energy(metric, fld, step, region=None)


def local_energy(metric: MetricField, fld: SpaceTimeField, step: int, region: SubBox | None) -> float:
    """Discrete energy (|D_t u|^2 + g^{jk} D_j u D_k u) sqrt|g| dx^n on K.

    Evaluated at the half step t_{step+1/2}: forward time difference for the
    kinetic term, symmetric product of the gradients at steps ``step`` and
    ``step + 1`` for the potential term.  With region = None and a
    source-free interval this quantity is an exact invariant of the leapfrog
    update, so the conservation check reflects only round-off.
    """
    if not (0 <= step < fld.samples.shape[0] - 1):
        raise IndexError("step must have a successor for the half-step energy")
    lap = _laplace(metric)
    grid = metric.grid

    def full_at(i):
        if fld.region is None:
            return fld.samples[i]
        full = np.zeros(grid.shape)
        full[fld.region.slices(grid)] = fld.samples[i]
        return full

    u, up = full_at(step), full_at(step + 1)
    dtu = (up - u) / fld.dt
    w = metric.sqrt_det()
    mask = np.ones(grid.shape, dtype=bool) if region is None else region.mask(grid)
    kin = np.sum((dtu * dtu * w)[mask])
    pot = 0.0
    h = grid.spacing
    for j in range(grid.dim):
        a = lap.A[j][j]
        a_face = 0.5 * (a + lap._shift(a, j, 1))
        du = (lap._shift(u, j, 1) - u) / h
        dv = (lap._shift(up, j, 1) - up) / h
        pot += np.sum((a_face * du * dv)[mask])
    if lap._offdiag:
        for j in range(grid.dim):
            for k in range(grid.dim):
                if j == k:
                    continue
                du = (lap._shift(u, k, 1) - lap._shift(u, k, -1)) / (2 * h)
                dv = (lap._shift(up, j, 1) - lap._shift(up, j, -1)) / (2 * h)
                pot += np.sum((lap.A[j][k] * du * dv)[mask])
    return float((kin + pot) * h**grid.dim)


# ---------------------------------------------------------------------------
# wave solves


def _validate_enlarged_box(metric: MetricField, source, cfg: SolverConfig):
    extent = metric.grid.extent
    need = 2.0 * metric.c_max * cfg.horizon + source.space_support.diameter()
    if extent < need:
        raise ConfigError(
            f"enlarged_box mode needs extent >= {need:.3g}, box has {extent:.3g}"
        )


def solve_forward(
    metric: MetricField, source, cfg: SolverConfig
) -> SpaceTimeField:
    """Leapfrog solve of w_tt = Delta_g w + f with zero initial data."""
    grid = metric.grid
    dt, steps = cfg.time_step(metric)
    periodic = cfg.boundary == "periodic"
    if cfg.boundary == "enlarged_box":
        _validate_enlarged_box(metric, source, cfg)
    if isinstance(source, GriddedSource):
        if abs(source.dt - dt) > 1e-12 * dt:
            raise ConfigError("gridded source time step does not match solver dt")
    lap = _laplace(metric, periodic=periodic)
    dt2 = dt * dt

    record_sl = (
        cfg.record_region.slices(grid) if cfg.record_region is not None else None
    )
    rec_shape = (
        grid.shape
        if record_sl is None
        else tuple(s.stop - s.start for s in record_sl)
    )
    out = np.zeros((steps + 1,) + rec_shape)
    snap_steps = {int(round(t / dt)): None for t in cfg.snapshot_times}

    src_sl = source.space_support.slices(grid)
    pts_src = grid.centers[src_sl]
    t_lo, t_hi = source.time_support

    u_prev = np.zeros(grid.shape)
    u = np.zeros(grid.shape)

    def source_row(i):
        t = i * dt
        if isinstance(source, GriddedSource):
            return None if i > source.steps else source
        if t < t_lo - _SUPPORT_EPS or t > t_hi + _SUPPORT_EPS:
            return None
        return source

    for n in range(steps + 1):
        if n > 0:
            rhs = lap(u)
            f_inc = np.zeros(grid.shape)
            src = source_row(n - 1)
            if src is not None:
                if isinstance(src, GriddedSource):
                    f_inc = src.row(n - 1)
                else:
                    f_inc[src_sl] = src.evaluate((n - 1) * dt, pts_src)
            u_next = 2.0 * u - u_prev + dt2 * (rhs + f_inc)
            if not periodic:
                # Dirichlet on the outer box edge
                for a in range(grid.dim):
                    sl0 = [slice(None)] * grid.dim
                    sl0[a] = 0
                    u_next[tuple(sl0)] = 0.0
                    sl0[a] = -1
                    u_next[tuple(sl0)] = 0.0
            u_prev, u = u, u_next
        out[n] = u if record_sl is None else u[record_sl]
        if n in snap_steps:
            snap_steps[n] = u.copy()

    fld = SpaceTimeField(
        grid=grid,
        dt=dt,
        samples=out,
        region=cfg.record_region,
        snapshots={k * dt: v for k, v in snap_steps.items() if v is not None},
    )
    fld.assert_finite()
    return fld


def solve_time_reversed(
    metric: MetricField, source, S: float, cfg: SolverConfig, t_min: float = 0.0
) -> SpaceTimeField:
    """Solution v of the final-condition problem v(S) = v_t(S) = 0.

    Implemented exactly as the time reflection of a forward solve with the
    flipped source: v(t) = w^{f~}(S - t), f~(t) = f(S - t).
    """
    flipped = FlippedSource(source, S)
    sub = SolverConfig(
        cfl_factor=cfg.cfl_factor,
        horizon=S - t_min,
        record_region=cfg.record_region,
        boundary=cfg.boundary,
    )
    w = solve_forward(metric, flipped, sub)
    v = w.time_reversed(S)
    assert abs(v.t0 - t_min) < 1e-9
    return v


def solve_dirichlet_on_region(
    metric: MetricField, source, region: SubBox, cfg: SolverConfig
) -> SpaceTimeField:
    """Forward solve with w = 0 enforced on and outside the region boundary.

    Evaluates responses of non-radiating sources without using the metric
    outside the region.
    """
    grid = metric.grid
    dt, steps = cfg.time_step(metric)
    lap = _laplace(metric, periodic=False)
    dt2 = dt * dt
    inner = region.mask(grid)
    record_sl = (
        cfg.record_region.slices(grid) if cfg.record_region is not None else None
    )
    rec_shape = (
        grid.shape
        if record_sl is None
        else tuple(s.stop - s.start for s in record_sl)
    )
    out = np.zeros((steps + 1,) + rec_shape)
    src_sl = source.space_support.slices(grid)
    pts_src = grid.centers[src_sl]
    t_lo, t_hi = source.time_support
    u_prev = np.zeros(grid.shape)
    u = np.zeros(grid.shape)
    for n in range(steps + 1):
        if n > 0:
            f_inc = np.zeros(grid.shape)
            t = (n - 1) * dt
            if isinstance(source, GriddedSource):
                if n - 1 <= source.steps:
                    f_inc = source.row(n - 1)
            elif t_lo - _SUPPORT_EPS <= t <= t_hi + _SUPPORT_EPS:
                f_inc[src_sl] = source.evaluate(t, pts_src)
            u_next = 2.0 * u - u_prev + dt2 * (lap(u) + f_inc)
            u_next[~inner] = 0.0
            u_prev, u = u, u_next
        out[n] = u if record_sl is None else u[record_sl]
    fld = SpaceTimeField(grid=grid, dt=dt, samples=out, region=cfg.record_region)
    fld.assert_finite()
    return fld


def apply_wave_operator(metric: MetricField, phi: SpaceTimeField) -> SpaceTimeField:
    """Discrete Box_g phi = D_tt phi - Delta_g phi (centered differences).

    The input must vanish at the first and last recorded steps; the output is
    a field on the same window usable as a gridded non-radiating source.
    """
    if phi.region is not None:
        raise ValueError("wave operator needs a full-grid field")
    lap = _laplace(metric)
    s = phi.samples
    out = np.zeros_like(s)
    dt2 = phi.dt * phi.dt
    out[1:-1] = (s[2:] - 2.0 * s[1:-1] + s[:-2]) / dt2
    for i in range(1, s.shape[0] - 1):
        out[i] -= lap(s[i])
    # end rows: second difference with implicit zero beyond the window
    out[0] = (s[1] - 2.0 * s[0]) / dt2 - lap(s[0])
    out[-1] = (-2.0 * s[-1] + s[-2]) / dt2 - lap(s[-1])
    return SpaceTimeField(
        grid=phi.grid, dt=phi.dt, samples=out, region=None, t0=phi.t0
    )


def sample_source(
    metric: MetricField, source, cfg: SolverConfig
) -> SpaceTimeField:
    """Sample a closed-form source on the solver's space-time lattice."""
    grid = metric.grid
    dt, steps = cfg.time_step(metric)
    out = np.zeros((steps + 1,) + grid.shape)
    sl = source.space_support.slices(grid)
    pts = grid.centers[sl]
    t_lo, t_hi = source.time_support
    for n in range(steps + 1):
        t = n * dt
        if t_lo - _SUPPORT_EPS <= t <= t_hi + _SUPPORT_EPS:
            out[(n,) + sl] = source.evaluate(t, pts)
    return SpaceTimeField(grid=grid, dt=dt, samples=out)


def as_gridded_source(fld: SpaceTimeField, support: SubBox | None = None) -> GriddedSource:
    return GriddedSource(
        grid=fld.grid,
        dt=fld.dt,
        steps=fld.steps,
        rows=fld.samples,
        support=support,
        time_support=(fld.t0, fld.t0 + fld.dt * fld.steps),
    )
