"""Brute-force references for the string dynamics.

Nothing here reuses the dynamics code: each routine has its own resampling
and stepping so it can serve as an independent check.  Only field
evaluation (score, log-density) is shared.  Everything is restricted to
desk-scale problems (grids only in d <= 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree
from scipy.spatial.distance import directed_hausdorff

from .errors import BudgetExceededError, CapabilityError, ConfigurationError
from .fields import FieldOracle


@dataclass(frozen=True)
class GridSpec:
    bounds: tuple
    resolution: tuple

    def __post_init__(self):
        if len(self.bounds) != len(self.resolution) or len(self.bounds) > 2:
            raise ConfigurationError("grids are limited to d <= 2")
        for (lo, hi), n in zip(self.bounds, self.resolution):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ConfigurationError(f"bad grid bounds {(lo, hi)}")
            if n < 16:
                raise ConfigurationError("grid resolution must be at least 16 per axis")

    def axes(self):
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.bounds, self.resolution)]

    def cell_size(self) -> np.ndarray:
        return np.array([(hi - lo) / (n - 1) for (lo, hi), n in zip(self.bounds, self.resolution)])

    def refined(self, factor: int = 2) -> "GridSpec":
        return GridSpec(self.bounds, tuple((n - 1) * factor + 1 for n in self.resolution))


@dataclass
class SaddleResult:
    found: bool
    point: Optional[np.ndarray]
    log_density: Optional[float]
    basins: Optional[np.ndarray] = None


class _DisjointSet:
    def __init__(self, n):
        self.parent = np.arange(n)

    def find(self, i):
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[rj] = ri


def _local_maxima(z):
    ny, nx = z.shape
    pad = np.pad(z, 1, constant_values=-np.inf)
    is_max = np.ones_like(z, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            is_max &= z > pad[1 + dy:1 + dy + ny, 1 + dx:1 + dx + nx]
    return np.argwhere(is_max)


def locate_saddle_2d(oracle: FieldOracle, t: float, grid: GridSpec,
                     basins: Optional[Sequence] = None) -> SaddleResult:
    """Highest point on the lowest cross-section separating two basins.

    Grid nodes are added in order of decreasing density and merged with
    already-added 8-neighbours; the node whose addition first joins the two
    basins is the saddle.  ``basins`` are two points inside the basins; by
    default the two highest grid maxima are used.
    """
    if oracle.log_density is None:
        raise CapabilityError("locate_saddle_2d needs an exact log-density")
    if len(grid.bounds) != 2:
        raise ConfigurationError("locate_saddle_2d works in d = 2")
    xs, ys = grid.axes()
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    z = np.asarray(oracle.log_density(t, pts)).reshape(X.shape)
    ny, nx = z.shape
    if basins is None:
        maxima = _local_maxima(z)
        if len(maxima) < 2:
            return SaddleResult(False, None, None)
        order = np.argsort([-z[i, j] for i, j in maxima])
        cells = [tuple(maxima[order[0]]), tuple(maxima[order[1]])]
    else:
        cells = []
        for b in basins:
            j = int(np.argmin(np.abs(xs - b[0])))
            i = int(np.argmin(np.abs(ys - b[1])))
            cells.append((i, j))
    a_idx = cells[0][0] * nx + cells[0][1]
    b_idx = cells[1][0] * nx + cells[1][1]
    basin_pts = pts[[a_idx, b_idx]]
    if a_idx == b_idx:
        return SaddleResult(False, None, None, basin_pts)

    flat = z.ravel()
    order = np.argsort(-flat, kind="stable")
    added = np.zeros(flat.size, dtype=bool)
    ds = _DisjointSet(flat.size)
    for node in order:
        added[node] = True
        i, j = divmod(int(node), nx)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ii, jj = i + di, j + dj
                if (di or dj) and 0 <= ii < ny and 0 <= jj < nx and added[ii * nx + jj]:
                    ds.union(node, ii * nx + jj)
        if added[a_idx] and added[b_idx] and ds.find(a_idx) == ds.find(b_idx):
            if node in (a_idx, b_idx):
                # the lower basin joined the other without crossing a lower ridge
                return SaddleResult(False, None, None, basin_pts)
            return SaddleResult(True, pts[node].copy(), float(flat[node]), basin_pts)
    return SaddleResult(False, None, None, basin_pts)


# ---------------------------------------------------------------------------


def _equalize(images, passes=5000, tol=1e-9, spline="linear"):
    """Equal chord spacing by repeated resampling (piecewise linear or natural cubic)."""
    pts = np.array(images, dtype=float)
    n = len(pts) - 1
    if spline not in ("linear", "cubic"):
        raise ConfigurationError(f"unknown spline {spline!r}")
    for _ in range(passes):
        seg = np.sqrt(np.sum(np.diff(pts, axis=0) ** 2, axis=1))
        total = seg.sum()
        if total == 0.0 or (seg.min() > 0 and seg.max() - seg.min() <= tol * seg.min()):
            break
        cum = np.concatenate([[0.0], np.cumsum(seg)]) / total
        grid = np.linspace(0.0, 1.0, n + 1)
        if spline == "cubic" and np.all(np.diff(cum) > 0):
            new = CubicSpline(cum, pts, axis=0, bc_type="natural")(grid)
        else:
            new = np.empty_like(pts)
            for k in range(pts.shape[1]):
                new[:, k] = np.interp(grid, cum, pts[:, k])
        new[0], new[-1] = pts[0], pts[-1]
        pts = new
    return pts


def frozen_mep_string(oracle: FieldOracle, t: float, endpoints, N: int = 50,
                      iterations: int = 20000, step: float = 0.02, tol: float = 1e-8,
                      init=None) -> np.ndarray:
    """Classical string method on the frozen landscape -log rho_t.

    Interior images take gradient steps along the score, then the string is
    resampled; stops when the largest image displacement drops below ``tol``.
    """
    a, b = (np.asarray(e, dtype=float) for e in endpoints)
    if init is None:
        pts = a + np.linspace(0.0, 1.0, N + 1)[:, None] * (b - a)
    else:
        pts = np.array(init, dtype=float)
    pts = _equalize(pts)
    disp = np.inf
    for _ in range(iterations):
        new = pts.copy()
        new[1:-1] += step * oracle.score(t, pts[1:-1])
        new = _equalize(new)
        disp = np.max(np.abs(new - pts))
        pts = new
        if disp < tol:
            return pts
    raise BudgetExceededError(f"frozen MEP not converged after {iterations} iterations", disp)


@dataclass
class PrincipalCurveResult:
    images: np.ndarray
    iterations: int
    converged: bool
    empty_cells: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    degenerate: bool = False
    cycled: bool = False


def hastie_principal_curve(samples, init, iterations: int = 2000, tol: float = 1e-7,
                           spline: str = "linear") -> PrincipalCurveResult:
    """Expectation/projection iteration with both end points held fixed.

    Each round assigns samples to their nearest image, moves every interior
    image to the mean of its cell and resamples the curve to equal spacing.
    Empty interior cells keep their image for that round and are reported.
    With a finite sample the iteration can end in a 2-cycle (one sample
    flipping between neighbouring cells); that is detected, reported as
    ``cycled`` and the last iterate returned.  ``spline`` picks the
    resampling interpolant; cubic resampling stops at 1e-6 spacing.
    """
    X = np.asarray(samples, dtype=float)
    eq_tol = 1e-6 if spline == "cubic" else 1e-9
    pts = _equalize(np.array(init, dtype=float), tol=eq_tol, spline=spline)
    if len(pts) < 3:
        raise ConfigurationError("principal curve needs at least 3 images")
    m, d = pts.shape
    empty = np.zeros(0, dtype=int)
    before = None
    disp = np.inf
    cycled = False
    for it in range(1, iterations + 1):
        owner = cKDTree(pts).query(X)[1]
        counts = np.bincount(owner, minlength=m)
        new = pts.copy()
        inner = np.arange(1, m - 1)
        full = inner[counts[inner] > 0]
        for k in range(d):
            sums = np.bincount(owner, weights=X[:, k], minlength=m)
            new[full, k] = sums[full] / counts[full]
        empty = inner[counts[inner] == 0]
        new = _equalize(new, tol=eq_tol, spline=spline)
        disp = np.max(np.abs(new - pts))
        if before is not None and np.max(np.abs(new - before)) < tol:
            cycled = disp >= tol
            pts = new
            break
        before, pts = pts, new
        if disp < tol:
            break
    spread = np.max(np.ptp(X, axis=0)) if len(X) else 0.0
    degenerate = bool(spread == 0.0)
    return PrincipalCurveResult(pts, it, bool(disp < tol), empty, degenerate, cycled)


# ---------------------------------------------------------------------------


def densify(images, per_segment: int = 20) -> np.ndarray:
    pts = np.asarray(images, dtype=float)
    u = np.linspace(0.0, 1.0, per_segment, endpoint=False)
    dense = (pts[:-1, None, :] + u[None, :, None] * (pts[1:] - pts[:-1])[:, None, :]).reshape(-1, pts.shape[1])
    return np.vstack([dense, pts[-1:]])


def hausdorff(curve_a, curve_b, per_segment: int = 20) -> float:
    """Symmetric Hausdorff distance between two polylines."""
    a, b = densify(curve_a, per_segment), densify(curve_b, per_segment)
    return max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0])
