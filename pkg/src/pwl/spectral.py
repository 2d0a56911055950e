"""Flat-torus source-to-solution map assembled from eigen-data.

On the torus the wave equation diagonalizes in the real Fourier basis:
writing w(t) = sum_j I_j(t) phi_j, each coefficient solves a driven
oscillator whose Duhamel kernel is s_j(u) = sin(sqrt(lambda_j) u) /
sqrt(lambda_j), degenerating to s_j(u) = u on the constant mode.  Summing
the modes gives the response to any source without running a time stepper,
so eigenvalues and restricted eigenfunctions alone determine the local
source-to-solution map.  The records built here carry provenance
"spectral" and feed the same downstream machinery as direct solves.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .geometry import euclidean_field
from .grid import Grid
from .solver import LaplaceBeltrami  # noqa: F401  (re-export convenience)
from .solver import SolverConfig, SpaceTimeField, SubBox
from .source_to_solution import LambdaRecord

_COS, _SIN = 0, 1


@dataclass
class EigenData:
    """Real sin/cos eigenmodes of the flat torus Laplacian.

    ``wavevectors`` holds one integer row per mode; a wavevector k carries
    eigenvalue (2 pi |k| / L)^2.  Each nonzero canonical wavevector
    contributes a cos and a sin mode, the zero vector only the constant.
    ``samples`` are the eigenfunctions on the grid, orthonormal under cell
    quadrature.
    """

    grid: Grid
    k_max: int
    wavevectors: np.ndarray  # (n_modes, dim) int
    parities: np.ndarray  # (n_modes,) 0 = cos, 1 = sin
    eigenvalues: np.ndarray  # (n_modes,) nondecreasing
    norms: np.ndarray  # (n_modes,)
    samples: np.ndarray  # (n_modes, *grid.shape)

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.shape[0]

    def duhamel_kernel(self, j: int, u):
        """s_j(u), the mode-j response kernel; s_j(u) = u when lambda = 0."""
        u = np.asarray(u, dtype=float)
        lam = self.eigenvalues[j]
        if lam == 0.0:
            return u
        r = np.sqrt(lam)
        return np.sin(r * u) / r

    def gram(self) -> np.ndarray:
        """Quadrature Gram matrix of the eigenfunctions (identity if exact)."""
        flat = self.samples.reshape(self.n_modes, -1)
        cell = self.grid.spacing**self.grid.dim
        return flat @ flat.T * cell


def _canonical_wavevectors(dim: int, k_max: int) -> np.ndarray:
    """One representative per +/- pair of integer vectors, |k|_inf <= k_max."""
    axes = [np.arange(-k_max, k_max + 1)] * dim
    ks = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    # keep k whose first nonzero component is positive, plus k = 0
    keep = np.zeros(len(ks), dtype=bool)
    for i, k in enumerate(ks):
        nz = np.nonzero(k)[0]
        keep[i] = len(nz) == 0 or k[nz[0]] > 0
    return ks[keep]


def _mode_samples(grid: Grid, k: np.ndarray, parity: int, norm: float):
    phase = (2.0 * np.pi / grid.extent) * np.tensordot(
        grid.centers, np.asarray(k, dtype=float), axes=([-1], [0])
    )
    return norm * (np.cos(phase) if parity == _COS else np.sin(phase))


def torus_eigendata(grid: Grid, k_max: int) -> EigenData:
    """All torus eigenmodes with integer wavevectors |k|_inf <= k_max."""
    if not grid.periodic:
        raise ValueError("torus eigendata requires a periodic grid")
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    if grid.cells <= 2 * k_max:
        raise ValueError(
            f"{grid.cells} cells per axis alias modes up to k_max={k_max}; "
            "need cells > 2 k_max"
        )
    L = grid.extent
    vol = L**grid.dim
    rows = []  # (lam, k, parity, norm)
    for k in _canonical_wavevectors(grid.dim, k_max):
        lam = (2.0 * np.pi / L) ** 2 * float(k @ k)
        if lam == 0.0:
            rows.append((lam, k, _COS, 1.0 / np.sqrt(vol)))
        else:
            norm = np.sqrt(2.0 / vol)
            rows.append((lam, k, _COS, norm))
            rows.append((lam, k, _SIN, norm))
    rows.sort(key=lambda r: (r[0], tuple(r[1]), r[2]))
    return EigenData(
        grid=grid,
        k_max=k_max,
        wavevectors=np.array([r[1] for r in rows]),
        parities=np.array([r[2] for r in rows]),
        eigenvalues=np.array([r[0] for r in rows]),
        norms=np.array([r[3] for r in rows]),
        samples=np.array(
            [_mode_samples(grid, r[1], r[2], r[3]) for r in rows]
        ),
    )


# ---------------------------------------------------------------------------
# Duhamel coefficients


def _cumtrapz(y: np.ndarray, dt: float) -> np.ndarray:
    """Cumulative trapezoid along the last axis, starting at zero."""
    mid = 0.5 * (y[..., 1:] + y[..., :-1]) * dt
    out = np.zeros(y.shape)
    np.cumsum(mid, axis=-1, out=out[..., 1:])
    return out


def _duhamel_series(a: np.ndarray, lam: float, dt: float) -> np.ndarray:
    """I(t_i) = int_0^{t_i} s(t_i - s) a(s) ds for one mode.

    The kernel splits as sin(r(t-s)) = sin(rt)cos(rs) - cos(rt)sin(rs), so
    two running integrals give every t at once; the lambda = 0 kernel
    (t - s) splits the same way.
    """
    n = a.shape[-1]
    t = dt * np.arange(n)
    if lam == 0.0:
        return t * _cumtrapz(a, dt) - _cumtrapz(t * a, dt)
    r = np.sqrt(lam)
    C = _cumtrapz(a * np.cos(r * t), dt)
    S = _cumtrapz(a * np.sin(r * t), dt)
    return (np.sin(r * t) * C - np.cos(r * t) * S) / r


def _mode_projections(data: EigenData, f, dt: float, steps: int) -> np.ndarray:
    """a_j(s_i) = <f(s_i, .), phi_j>, shape (n_modes, steps + 1)."""
    cell = data.grid.spacing**data.grid.dim
    flat = data.samples.reshape(data.n_modes, -1)
    rows = np.stack(
        [f.evaluate(i * dt, data.grid.centers).reshape(-1) for i in range(steps + 1)]
    )
    return flat @ rows.T * cell


def ij_coefficient(data: EigenData, f, j: int, t: float, dt: float) -> float:
    """Mode-j Duhamel coefficient I_j(t) by trapezoid quadrature."""
    steps = max(1, int(round(t / dt)))
    a = _mode_projections(data, f, t / steps, steps)[j]
    return float(_duhamel_series(a, float(data.eigenvalues[j]), t / steps)[-1])


def spectral_source_to_solution(
    data: EigenData, f, two_T: float, cfg: SolverConfig | None = None
) -> SpaceTimeField:
    """Response w^f on (0, two_T) x torus as a truncated mode sum.

    Uses the same time grid a direct periodic solve of matching config
    would, so the two are directly comparable sample by sample.
    """
    base = cfg or SolverConfig()
    run = SolverConfig(
        cfl_factor=base.cfl_factor, horizon=two_T, even_steps=True
    )
    dt, steps = run.time_step(euclidean_field(data.grid))
    a = _mode_projections(data, f, dt, steps)
    coeff = np.stack(
        [
            _duhamel_series(a[j], float(data.eigenvalues[j]), dt)
            for j in range(data.n_modes)
        ]
    )
    flat = data.samples.reshape(data.n_modes, -1)
    u = (coeff.T @ flat).reshape((steps + 1,) + data.grid.shape)
    return SpaceTimeField(grid=data.grid, dt=dt, samples=u)


def build_spectral_record(
    data: EigenData,
    sources: dict,
    region: SubBox,
    two_T: float,
    cfg: SolverConfig | None = None,
) -> LambdaRecord:
    """LambdaRecord of mode-sum responses restricted to ``region``."""
    sl = region.slices(data.grid)
    rec = None
    for sid, src in sources.items():
        full = spectral_source_to_solution(data, src, two_T, cfg)
        resp = SpaceTimeField(
            grid=data.grid,
            dt=full.dt,
            samples=full.samples[(slice(None),) + sl].copy(),
            region=region,
        )
        if rec is None:
            rec = LambdaRecord(
                grid=data.grid,
                region=region,
                two_T=two_T,
                dt=resp.dt,
                weight=np.ones(resp.samples.shape[1:]),
                provenance="spectral",
            )
        rec.add(sid, src, resp)
    if rec is None:
        raise ValueError("empty source catalog")
    return rec


# ---------------------------------------------------------------------------
# CSV interchange: modes are fully described by (parity, k, lambda, norm)


def eigendata_to_csv(data: EigenData, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["parity"]
            + [f"k{a}" for a in range(data.grid.dim)]
            + ["eigenvalue", "norm"]
        )
        for j in range(data.n_modes):
            w.writerow(
                ["cos" if data.parities[j] == _COS else "sin"]
                + [int(c) for c in data.wavevectors[j]]
                + [repr(float(data.eigenvalues[j])), repr(float(data.norms[j]))]
            )


def eigendata_from_csv(path, grid: Grid) -> EigenData:
    """Rebuild eigenfunctions on ``grid`` from an exported mode table."""
    if not grid.periodic:
        raise ValueError("torus eigendata requires a periodic grid")
    ks, parities, lams, norms = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 3
        if dim != grid.dim:
            raise ValueError(f"mode table is {dim}D, grid is {grid.dim}D")
        for row in reader:
            parities.append(_COS if row[0] == "cos" else _SIN)
            ks.append([int(c) for c in row[1 : 1 + dim]])
            lams.append(float(row[1 + dim]))
            norms.append(float(row[2 + dim]))
    lams = np.array(lams)
    if np.any(np.diff(lams) < 0):
        raise ValueError("mode table eigenvalues must be nondecreasing")
    k_max = int(np.max(np.abs(ks))) if ks else 0
    if grid.cells <= 2 * k_max:
        raise ValueError(
            f"{grid.cells} cells per axis alias modes up to k_max={k_max}"
        )
    return EigenData(
        grid=grid,
        k_max=k_max,
        wavevectors=np.array(ks, dtype=int),
        parities=np.array(parities),
        eigenvalues=lams,
        norms=np.array(norms),
        samples=np.array(
            [
                _mode_samples(grid, k, p, n)
                for k, p, n in zip(ks, parities, norms)
            ]
        ),
    )
