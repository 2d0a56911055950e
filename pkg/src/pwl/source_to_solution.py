"""The local source-to-solution map and what can be computed from it.

Lambda_X sends a source supported in (0, 2T) x X to the restriction of the
wave it generates back onto (0, 2T) x X.  Everything downstream of passive
recordings factors through this operator: the Blagovestchenskii identity
turns Lambda_X data into final-time inner products <w^f(T), w^h(T)> without
ever touching field values outside X, and the correlation-derived
reconstruction recovers Lambda_X responses (and the noise cutoff kappa^2)
from inner products <kappa w^f, kappa w^h> alone.
"""

from __future__ import annotations

import collections
import json
import math
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from .grid import Grid
from .geometry import MetricField
from .noise import CutoffProfile, chi0
from .solver import (
    FlippedSource,
    GriddedSource,
    SolverConfig,
    SourceTerm,
    SpaceTimeField,
    SubBox,
    apply_wave_operator,
    smooth_bump,
    solve_forward,
    weighted_inner,
)


class CatalogMissError(KeyError):
    """A Blago evaluation referenced responses absent from the record."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"catalog misses responses for: {self.missing}")


@dataclass
class LambdaRecord:
    """Region-restricted responses of the source-to-solution map.

    ``catalog`` maps source ids to (source, response) pairs where the
    response is a SpaceTimeField recorded on ``region`` over (0, two_T).
    ``weight`` is sqrt|g| on the region cells, the only piece of metric
    information the record carries.
    """

    grid: Grid
    region: SubBox
    two_T: float
    dt: float
    weight: np.ndarray
    provenance: str = "direct_solve"
    catalog: dict = dc_field(default_factory=dict)
    coverage: tuple | None = None  # (t_lo, t_hi) actually reconstructed

    def add(self, source_id: str, source, response: SpaceTimeField):
        if abs(response.dt - self.dt) > 1e-12 * self.dt:
            raise ValueError("response time step does not match record")
        self.catalog[source_id] = (source, response)

    def response(self, source_id: str) -> SpaceTimeField:
        if source_id not in self.catalog:
            raise CatalogMissError([source_id])
        return self.catalog[source_id][1]

    def source(self, source_id: str):
        if source_id not in self.catalog:
            raise CatalogMissError([source_id])
        return self.catalog[source_id][0]

    def ids(self):
        return list(self.catalog)

    # -- persistence ----------------------------------------------------

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        entries = []
        for sid, (source, response) in self.catalog.items():
            fname = f"response_{sid}.bin"
            response.to_binary(os.path.join(directory, fname))
            entries.append(
                {"id": sid, "source": _source_to_json(source), "file": fname}
            )
        np.save(os.path.join(directory, "weight.npy"), self.weight)
        manifest = {
            "grid": {
                "dim": self.grid.dim,
                "extent": self.grid.extent,
                "cells": self.grid.cells,
                "periodic": self.grid.periodic,
            },
            "region": {"lo": list(self.region.lo), "hi": list(self.region.hi)},
            "two_T": self.two_T,
            "dt": self.dt,
            "provenance": self.provenance,
            "coverage": list(self.coverage) if self.coverage else None,
            "entries": entries,
        }
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)

    @classmethod
    def load(cls, directory) -> "LambdaRecord":
        with open(os.path.join(directory, "manifest.json")) as fh:
            manifest = json.load(fh)
        gspec = manifest["grid"]
        grid = Grid(gspec["dim"], gspec["extent"], gspec["cells"], gspec["periodic"])
        region = SubBox(tuple(manifest["region"]["lo"]), tuple(manifest["region"]["hi"]))
        rec = cls(
            grid=grid,
            region=region,
            two_T=manifest["two_T"],
            dt=manifest["dt"],
            weight=np.load(os.path.join(directory, "weight.npy")),
            provenance=manifest["provenance"],
            coverage=tuple(manifest["coverage"]) if manifest["coverage"] else None,
        )
        for entry in manifest["entries"]:
            response = SpaceTimeField.from_binary(
                os.path.join(directory, entry["file"]), grid, region
            )
            rec.catalog[entry["id"]] = (_source_from_json(entry["source"]), response)
        return rec


def _source_to_json(source):
    if isinstance(source, SourceTerm):
        return {
            "kind": source.kind,
            "t_center": source.t_center,
            "x_center": list(source.x_center),
            "t_radius": source.t_radius,
            "x_radius": list(source.x_radius),
            "amplitude": source.amplitude,
        }
    return None


def _source_from_json(spec):
    if spec is None:
        return None
    return SourceTerm(
        kind=spec["kind"],
        t_center=spec["t_center"],
        x_center=tuple(spec["x_center"]),
        t_radius=spec["t_radius"],
        x_radius=tuple(spec["x_radius"]),
        amplitude=spec["amplitude"],
    )


# ---------------------------------------------------------------------------
# the map, its adjoint, and the record builder


def _check_support(source, region: SubBox, t_window):
    lo, hi = source.time_support
    if lo < t_window[0] - 1e-9 or hi > t_window[1] + 1e-9:
        raise ValueError(
            f"source time support {lo, hi} outside {t_window}"
        )
    s = source.space_support
    if np.any(np.asarray(s.lo) < np.asarray(region.lo) - 1e-9) or np.any(
        np.asarray(s.hi) > np.asarray(region.hi) + 1e-9
    ):
        raise ValueError("source spatial support outside the region")


def lambda_apply(
    metric: MetricField, f, region: SubBox, two_T: float, cfg: SolverConfig | None = None
) -> SpaceTimeField:
    """Response w^f restricted to (0, two_T) x region."""
    _check_support(f, region, (0.0, two_T))
    base = cfg or SolverConfig()
    run = SolverConfig(
        cfl_factor=base.cfl_factor,
        horizon=two_T,
        record_region=region,
        boundary=base.boundary,
        even_steps=True,
    )
    return solve_forward(metric, f, run)


def lambda_adjoint_apply(
    metric: MetricField, h, region: SubBox, T: float, cfg: SolverConfig | None = None
) -> SpaceTimeField:
    """Adjoint of Lambda_X on L^2((0,T) x X): time-reverse, apply, reverse."""
    flipped = FlippedSource(h, T)
    resp = lambda_apply(metric, flipped, region, T, cfg)
    return SpaceTimeField(
        grid=resp.grid,
        dt=resp.dt,
        samples=resp.samples[::-1].copy(),
        region=resp.region,
    )


def build_lambda_record(
    metric: MetricField,
    sources: dict,
    region: SubBox,
    two_T: float,
    cfg: SolverConfig | None = None,
) -> LambdaRecord:
    first = None
    rec = None
    for sid, src in sources.items():
        resp = lambda_apply(metric, src, region, two_T, cfg)
        if rec is None:
            rec = LambdaRecord(
                grid=metric.grid,
                region=region,
                two_T=two_T,
                dt=resp.dt,
                weight=metric.sqrt_det()[region.slices(metric.grid)],
                provenance="direct_solve",
            )
            first = resp.dt
        rec.add(sid, src, resp)
    if rec is None:
        raise ValueError("empty source catalog")
    assert first == rec.dt
    return rec


# ---------------------------------------------------------------------------
# the J operator and the Blagovestchenskii identity


def j_operator(samples: np.ndarray, dt: float) -> np.ndarray:
    """J phi(t) = 1/2 int_t^{2T-t} phi(s) ds on a uniform grid over (0, 2T).

    ``samples`` has time as its leading axis covering 0..2T inclusive; the
    result covers 0..T.  Trapezoid quadrature; exact on constants.
    """
    n_tot = samples.shape[0] - 1
    # cumulative trapezoid C[k] = int_0^{t_k}
    mid = 0.5 * (samples[1:] + samples[:-1]) * dt
    C = np.concatenate(
        [np.zeros((1,) + samples.shape[1:]), np.cumsum(mid, axis=0)], axis=0
    )
    n_half = n_tot // 2
    out = np.empty((n_half + 1,) + samples.shape[1:])
    for i in range(n_half + 1):
        out[i] = 0.5 * (C[n_tot - i] - C[i])
    return out


def _sample_on_region(source, grid: Grid, region: SubBox, dt: float, n_steps: int):
    sl = region.slices(grid)
    pts = grid.centers[sl]
    out = np.zeros((n_steps + 1,) + pts.shape[:-1])
    t_lo, t_hi = source.time_support
    for i in range(n_steps + 1):
        t = i * dt
        if t_lo - 1e-14 <= t <= t_hi + 1e-14:
            out[i] = source.evaluate(t, pts)
    return out


def blago_inner_product(
    record: LambdaRecord, f_id: str, h_id: str, T: float | None = None
) -> float:
    """<w^f(T), w^h(T)> evaluated from region-restricted data only.

    Implements <f, J Lambda h> - <Lambda f, J h> with J over (0, 2T) and the
    outer time pairing over (0, T).
    """
    if T is None:
        T = 0.5 * record.two_T
    missing = [sid for sid in (f_id, h_id) if sid not in record.catalog]
    if missing:
        raise CatalogMissError(missing)
    f_src, f_resp = record.catalog[f_id]
    h_src, h_resp = record.catalog[h_id]
    if f_src is None or h_src is None:
        raise ValueError("record entries lack evaluable sources")
    dt = record.dt
    n_tot = f_resp.samples.shape[0] - 1
    iT = min(int(round(T / dt)), n_tot // 2)

    f_rows = _sample_on_region(f_src, record.grid, record.region, dt, n_tot)
    h_rows = _sample_on_region(h_src, record.grid, record.region, dt, n_tot)
    J_lh = j_operator(h_resp.samples, dt)
    J_h = j_operator(h_rows, dt)

    tw = np.ones(iT + 1)
    tw[0] = tw[-1] = 0.5
    w = record.weight
    term1 = sum(
        tw[i] * np.sum(f_rows[i] * J_lh[i] * w) for i in range(iT + 1)
    )
    term2 = sum(
        tw[i] * np.sum(f_resp.samples[i] * J_h[i] * w) for i in range(iT + 1)
    )
    cell = record.grid.spacing ** record.grid.dim
    return float((term1 - term2) * dt * cell)


def final_state_inner(
    metric: MetricField, f, h, T: float, cfg: SolverConfig | None = None
) -> float:
    """Direct <w^f(T), w^h(T)>_{L^2} from global solves (oracle side)."""
    base = cfg or SolverConfig()
    run = SolverConfig(
        cfl_factor=base.cfl_factor,
        horizon=T,
        boundary=base.boundary,
        snapshot_times=(T,),
    )
    wf = solve_forward(metric, f, run)
    wh = solve_forward(metric, h, run)
    return weighted_inner(metric, wf.snapshots[T], wh.snapshots[T])


# ---------------------------------------------------------------------------
# non-radiating sources and the correlation data oracle


class NonRadiatingSource(GriddedSource):
    """Gridded source f = Box_g phi whose wave is exactly phi.

    The discrete leapfrog reproduces the primitive phi to round-off, so these
    sources radiate nothing outside supp(phi): the workhorse of every
    approximate-controllability construction here.  Both f and phi vanish
    outside a small spatial box, so only the cropped blocks are stored; a
    catalog of probes then costs kilobytes instead of full space-time arrays.
    """

    kind = "nonradiating"

    def __init__(self, grid, dt, steps, rows_block, block_slices, support,
                 time_support, primitive_block):
        super().__init__(grid, dt, steps, self._row, support, time_support)
        self._block = rows_block
        self._block_slices = block_slices
        self.primitive_block = primitive_block

    def _row(self, i: int) -> np.ndarray:
        out = np.zeros(self.grid.shape)
        out[self._block_slices] = self._block[i]
        return out

    def primitive_rows(self, slices) -> np.ndarray:
        """phi restricted to spatial ``slices`` of the full grid, all steps."""
        shape = tuple(s.stop - s.start for s in slices)
        out = np.zeros((self.steps + 1,) + shape)
        src, dst = [], []
        for s_out, s_in in zip(slices, self._block_slices):
            lo = max(s_out.start, s_in.start)
            hi = min(s_out.stop, s_in.stop)
            if hi <= lo:
                return out
            src.append(slice(lo - s_in.start, hi - s_in.start))
            dst.append(slice(lo - s_out.start, hi - s_out.start))
        out[(slice(None),) + tuple(dst)] = (
            self.primitive_block[(slice(None),) + tuple(src)]
        )
        return out


def nonradiating_source(metric: MetricField, phi: SpaceTimeField, support: SubBox) -> NonRadiatingSource:
    """Build f = Box_g phi from a primitive that vanishes at step 0."""
    if np.any(phi.samples[0]):
        raise ValueError("primitive must vanish at the first recorded step")
    f = apply_wave_operator(metric, phi)
    grown = SubBox(
        tuple(np.asarray(support.lo) - 2 * metric.grid.spacing),
        tuple(np.asarray(support.hi) + 2 * metric.grid.spacing),
    )
    sl = grown.slices(metric.grid)
    return NonRadiatingSource(
        grid=phi.grid,
        dt=phi.dt,
        steps=phi.steps,
        rows_block=np.ascontiguousarray(f.samples[(slice(None),) + sl]),
        block_slices=sl,
        support=grown,
        time_support=(phi.t0, phi.t0 + phi.dt * phi.steps),
        primitive_block=np.ascontiguousarray(phi.samples[(slice(None),) + sl]),
    )


class CorrelationData:
    """Measurement oracle for the inner products <kappa w^f, kappa w^h>.

    These are exactly the deterministic limits of empirical correlations, so
    any algorithm consuming only this interface runs unchanged on passively
    recorded data.  Responses are cached per source object; for
    non-radiating sources the known primitive replaces the solve, which is
    numerically identical because the discrete wave operator inverts the
    leapfrog exactly.
    """

    def __init__(
        self,
        metric: MetricField,
        profile: CutoffProfile,
        two_T: float,
        cfg: SolverConfig | None = None,
    ):
        self.metric = metric
        self.profile = profile
        self.two_T = two_T
        base = cfg or SolverConfig()
        self.cfg = SolverConfig(
            cfl_factor=base.cfl_factor,
            horizon=two_T,
            record_region=profile.support,
            boundary=base.boundary,
        )
        self.dt, self.steps = self.cfg.time_step(metric)
        sl = profile.support.slices(metric.grid)
        self._slices = sl
        self.kappa2 = profile.kappa(metric.grid.centers[sl]) ** 2
        self.weight = metric.sqrt_det()[sl]
        self._cache = collections.OrderedDict()
        self._cache_max = 128

    def _rows(self, source) -> np.ndarray:
        key = id(source)
        # the cache pins the source object: id() values are recycled once an
        # object is collected, so a key must never outlive its source.  It is
        # a bounded LRU so one-shot probes do not accumulate without limit.
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key][1]
        if isinstance(source, NonRadiatingSource):
            rows = source.primitive_rows(self._slices)
        else:
            rows = solve_forward(self.metric, source, self.cfg).samples
        self._cache[key] = (source, rows)
        while len(self._cache) > self._cache_max:
            self._cache.popitem(last=False)
        return rows

    def inner(self, f, h) -> float:
        """<kappa w^f, kappa w^h> over (0, two_T) x supp(kappa)."""
        a = self._rows(f)
        b = self._rows(h)
        n = min(a.shape[0], b.shape[0])
        tot = float(np.sum(a[:n] * b[:n] * self.kappa2 * self.weight))
        return tot * self.dt * self.metric.grid.spacing ** self.metric.grid.dim


# ---------------------------------------------------------------------------
# partition-of-unity windows for the bump-basis recovery


def _pou_axis(points: np.ndarray, lo: float, hi: float, half: float):
    """Overlapping smooth windows along one axis that sum to 1 on [lo, hi].

    Centers run from lo to hi with spacing close to ``half``; window j is
    supported on (c_j - h, c_j + h) and the collection sums to exactly 1
    between the first and last center.  Returns (centers, half-width used,
    window value arrays sampled on ``points``).
    """
    n = max(1, int(round((hi - lo) / half)))
    h_eff = (hi - lo) / n
    centers = lo + h_eff * np.arange(n + 1)
    windows = []
    for c in centers:
        up = chi0((points - (c - h_eff)) / h_eff)
        down = 1.0 - chi0((points - c) / h_eff)
        windows.append(np.asarray(up * down))
    return centers, h_eff, windows


def _poly_basis(scaled_axes, degree):
    """Tensor monomials of total degree <= degree on scaled coordinates.

    ``scaled_axes`` are broadcast-compatible arrays; returns the list of
    product arrays broadcast to the common shape.
    """
    shape = np.broadcast_shapes(*(a.shape for a in scaled_axes))
    dim = len(scaled_axes)
    out = []

    def rec(axis, remaining, current):
        if axis == dim:
            out.append(np.broadcast_to(current, shape).copy())
            return
        for d in range(remaining + 1):
            rec(axis + 1, remaining - d, current * scaled_axes[axis] ** d)

    rec(0, degree, np.ones((1,) * dim))
    return out


@dataclass
class Kappa2Estimate:
    """Pointwise kappa^2 recovered on the region cells."""

    grid: Grid
    slices: tuple
    values: np.ndarray
    mask: np.ndarray  # True where the ratio was directly measured

    def plateau_error(self, profile: CutoffProfile, radius_fraction=0.8) -> float:
        pts = self.grid.centers[self.slices]
        d = np.linalg.norm(pts - np.asarray(profile.kappa_center), axis=-1)
        rp = profile.plateau_radius or 0.5 * profile.kappa_radius
        on = d <= radius_fraction * rp
        truth = profile.kappa(pts[on]) ** 2
        return float(np.max(np.abs(self.values[on] - truth) / truth))


def _nearest_fill(values, mask):
    """Fill cells outside ``mask`` with the value of the nearest valid cell."""
    from scipy import ndimage

    if mask.all():
        return values
    idx = ndimage.distance_transform_edt(
        ~mask, return_distances=False, return_indices=True
    )
    return values[tuple(idx)]


def correlation_to_lambda(
    metric: MetricField,
    profile: CutoffProfile,
    targets: dict,
    region: SubBox,
    two_T: float,
    cfg: SolverConfig | None = None,
    degree: int = 2,
    time_half: float | None = None,
    space_half: float | None = None,
    tikhonov: float = 1e-8,
    data: CorrelationData | None = None,
) -> tuple[LambdaRecord, Kappa2Estimate]:
    """Recover Lambda_X responses and kappa^2 from correlation data alone.

    For windowed-polynomial primitives phi the sources f = Box(phi) are
    non-radiating with known wave phi, so the measurements
    <kappa w^f, kappa w^h> = <phi, kappa^2 w^h> are weighted moments of the
    unknown kappa^2 w^h.  A partition-of-unity least-squares fit turns the
    moments into kappa^2 w^h on the region; a non-radiating probe whose wave
    is known then yields kappa^2 as a ratio, and a second pass with
    kappa-corrected primitives returns the responses w^h themselves.
    """
    grid = metric.grid
    if data is None:
        data = CorrelationData(metric, profile, two_T, cfg)
    dt = data.dt
    cell = grid.spacing**grid.dim

    space_half = space_half or max(3.0 * grid.spacing, float(np.min(region.halfwidth)) / 2)
    time_half = time_half or max(3 * dt, space_half)

    # the windows overhang the region by one half-width; the enlarged work
    # box must still lie inside the kappa support for the data to see it
    work = SubBox(
        tuple(np.asarray(region.lo) - space_half),
        tuple(np.asarray(region.hi) + space_half),
    )
    ksl = data._slices
    wsl = work.slices(grid)
    if any(w.start < k.start or w.stop > k.stop for w, k in zip(wsl, ksl)):
        raise ValueError(
            "recovery region plus window margin must lie inside supp(kappa)"
        )
    sub_w = tuple(
        slice(w.start - k.start, w.stop - k.start) for w, k in zip(wsl, ksl)
    )
    w_cells = metric.sqrt_det()[wsl]
    work_shape = tuple(s.stop - s.start for s in wsl)

    t_pts = dt * np.arange(data.steps + 1)
    t_centers, t_half, t_windows = _pou_axis(
        t_pts, time_half, two_T - time_half, time_half
    )
    axes_cw = [
        _pou_axis(grid.axis[s], region.lo[a], region.hi[a], space_half)
        for a, s in enumerate(wsl)
    ]
    coverage = (float(t_centers[0]), float(t_centers[-1]))

    def recover(target_rows_weighted):
        """Partition-of-unity weighted least squares on the work box."""
        est = np.zeros((data.steps + 1,) + work_shape)
        for tc, twin in zip(t_centers, t_windows):
            t_idx = np.nonzero(twin > 0)[0]
            twin_loc = twin[t_idx]
            ts = ((t_pts[t_idx] - tc) / t_half).reshape((-1,) + (1,) * grid.dim)
            for combo in np.ndindex(*(len(cw[2]) for cw in axes_cw)):
                swin = np.asarray(1.0)
                scaled = [ts]
                for a, ci in enumerate(combo):
                    cen, s_half, wins = axes_cw[a]
                    shape = [1] * grid.dim
                    shape[a] = -1
                    swin = swin * wins[ci].reshape(shape)
                    scaled.append(
                        ((grid.axis[wsl[a]] - cen[ci]) / s_half).reshape(shape)
                    )
                window = twin_loc.reshape((-1,) + (1,) * grid.dim) * swin
                polys = _poly_basis(scaled, degree)
                Phi = np.stack(
                    [np.broadcast_to(p, window.shape) for p in polys]
                ).reshape(len(polys), -1)
                Wn = (window * w_cells).reshape(-1)
                # M_kl = <window q_k, q_l>, b_k = <window q_k, u>
                M = (Phi * Wn) @ Phi.T * (dt * cell)
                b = (Phi * Wn) @ target_rows_weighted[t_idx].reshape(-1) * (
                    dt * cell
                )
                lam = tikhonov * np.trace(M)
                c = np.linalg.solve(M + lam * np.eye(M.shape[0]), b)
                p = np.tensordot(
                    c,
                    np.stack([np.broadcast_to(q, window.shape) for q in polys]),
                    axes=(0, 0),
                )
                est[t_idx] += window * p
        return est

    kap2_work = data.kappa2[sub_w]

    def weighted_rows(source):
        return data._rows(source)[(slice(None),) + sub_w] * kap2_work

    # kappa^2 from a known-wave probe: the ratio estimate is only reliable
    # where the probe wave is of order one, so use a flat-top profile whose
    # plateau covers the whole work box (ramping to zero inside supp kappa)
    t_mid = 0.5 * (coverage[0] + coverage[1])
    t_span = 0.48 * (coverage[1] - coverage[0])
    r_in = float(np.linalg.norm(np.asarray(region.halfwidth))) + space_half
    off = np.asarray(region.center) - np.asarray(profile.kappa_center)
    r_out = profile.kappa_radius - float(np.linalg.norm(off)) - 2.0 * grid.spacing
    if r_out <= r_in + 2.0 * grid.spacing:
        raise ValueError(
            "kappa support too small for a probe wave covering the region"
        )
    temporal = smooth_bump((t_pts - t_mid) / t_span)
    radial = np.linalg.norm(
        grid.centers - np.asarray(region.center), axis=-1
    )
    flat_top = chi0((r_out - radial) / (r_out - r_in))
    phi_probe = SpaceTimeField(
        grid=grid,
        dt=dt,
        samples=temporal.reshape((-1,) + (1,) * grid.dim) * flat_top,
    )
    probe = nonradiating_source(
        metric, phi_probe, SubBox.centered(region.center, r_out)
    )
    u_probe = recover(weighted_rows(probe))
    psi = phi_probe.samples[(slice(None),) + wsl]
    num = np.sum(u_probe * psi, axis=0)
    den = np.sum(psi * psi, axis=0)
    good = den > 1e-6 * den.max()
    kappa2 = np.where(good, num / np.where(good, den, 1.0), 0.0)
    kappa2 = _nearest_fill(kappa2, good)
    kappa2 = np.maximum(kappa2, 1e-6)
    sub_r = region.slices(grid)
    rel = tuple(
        slice(r.start - w.start, r.stop - w.start) for r, w in zip(sub_r, wsl)
    )
    k2_est = Kappa2Estimate(
        grid=grid, slices=sub_r, values=kappa2[rel], mask=good[rel]
    )

    # responses w^h = (kappa^2 w^h) / kappa^2, restricted back to the region
    rec = LambdaRecord(
        grid=grid,
        region=region,
        two_T=two_T,
        dt=dt,
        weight=metric.sqrt_det()[sub_r],
        provenance="correlation_derived",
        coverage=coverage,
    )
    for sid, h in targets.items():
        u_h = recover(weighted_rows(h))
        resp = SpaceTimeField(
            grid=grid,
            dt=dt,
            samples=(u_h / kappa2)[(slice(None),) + rel],
            region=region,
        )
        rec.add(sid, h, resp)
    return rec, k2_est
