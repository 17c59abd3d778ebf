"""The evaluation map ``alpha = (F_1, ..., F_n)``, its image and its multiplicity.

The image ``K = alpha(M)`` is discretised as a set of closed axis-aligned
voxels ``origin + voxel_size * (idx + [0, 1]^n)``.  The multiplicity
function ``n_alpha(z) = #alpha^{-1}(z)`` is estimated through the
piecewise-linear interpolant of the sampled map on the Kuhn triangulation of
the grid: every simplex is refined and each piece spreads the volume of its
image over the voxels around its image centroid (cloud-in-cell), so summing
over all voxels gives ``sum_simplices |det|``, the exact integral of the
multiplicity of the piecewise-linear map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations, product
from typing import Sequence

import numpy as np
from scipy import ndimage

from .grid import BracketReport, DomainError, GridField, TorusDomain, bracket, l1_norm
from .grid import _require_shared_domain


class UndersamplingError(ValueError):
    """The voxel size is too fine for the spacing of the sampled map."""


@dataclass(frozen=True, eq=False)
class EvaluationSample:
    """Values of alpha on the (possibly supersampled) periodic grid.

    ``points`` has shape ``(m**n, n)`` with ``m = supersample_factor * resolution``,
    row-major over the grid with axis 0 slowest.
    """
    domain: TorusDomain
    points: np.ndarray
    supersample_factor: int = 1

    @property
    def side(self) -> int:
        return self.supersample_factor * self.domain.resolution

    @property
    def spacing(self) -> np.ndarray:
        return np.asarray(self.domain.period) / self.side

    def as_grid(self) -> np.ndarray:
        n = self.domain.n
        return self.points.reshape((self.side,) * n + (n,))


@dataclass(frozen=True, eq=False)
class VoxelSet:
    """A finite union of closed voxels; ``measure`` is exact by construction."""
    n: int
    voxel_size: float
    origin: np.ndarray
    occupied: np.ndarray  # (count, n) int64, sorted lexicographically, unique

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        origin = np.asarray(self.origin, dtype=np.float64).reshape(self.n)
        occ = np.asarray(self.occupied, dtype=np.int64).reshape(-1, self.n)
        if len(occ):
            occ = np.unique(occ, axis=0)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "occupied", occ)

    @property
    def count(self) -> int:
        return len(self.occupied)

    @property
    def measure(self) -> float:
        return self.count * self.voxel_size ** self.n

    def lower_corners(self) -> np.ndarray:
        return self.origin + self.voxel_size * self.occupied

    def boxes(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.lower_corners()
        return lo, lo + self.voxel_size

    def contains_voxels_of(self, other: "VoxelSet") -> bool:
        mine = {tuple(r) for r in self.occupied}
        return all(tuple(r) in mine for r in other.occupied)

    def dilate(self, radius: int) -> "VoxelSet":
        return VoxelSet(self.n, self.voxel_size, self.origin,
                        _dilate_indices(self.occupied, radius, self.n))


@dataclass(frozen=True, eq=False)
class MultiplicityGrid:
    """Voxel-averaged multiplicity estimate.

    ``mean`` is the average of ``n_alpha`` over each voxel, ``counts`` its
    nearest integer, ``hits`` the number of sample points landing in the voxel.
    ``non_integral`` marks voxels whose mean is more than 0.25 from an
    integer (folds, image boundary); ``degenerate`` marks voxels whose
    preimage has positive volume but on which the map is (nearly) flat.
    """
    voxel_size: float
    origin: np.ndarray
    indices: np.ndarray
    mean: np.ndarray
    counts: np.ndarray
    hits: np.ndarray
    non_integral: np.ndarray
    degenerate: np.ndarray

    @property
    def integral(self) -> float:
        n = self.indices.shape[1]
        return float(np.sum(self.mean) * self.voxel_size ** n)

    def lookup(self, points) -> np.ndarray:
        """Voxel-averaged multiplicity at arbitrary image points (0 off support)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        idx = np.floor((pts - self.origin) / self.voxel_size).astype(np.int64)
        table = {tuple(k): v for k, v in zip(self.indices, self.mean)}
        return np.array([table.get(tuple(k), 0.0) for k in idx])


@dataclass(frozen=True)
class DegreeCheck:
    ok: bool
    measure_K: float
    epsilon: float
    slack: float
    note: str = ""

    def __bool__(self) -> bool:
        return self.ok


# ---------------------------------------------------------------------------

def evaluate_map(fields: Sequence[GridField], supersample_factor: int = 1) -> EvaluationSample:
    """Sample alpha at every (super)grid node.

    Supersampled nodes are filled by periodic multilinear interpolation of the
    grid values, so file-loaded fields behave exactly like catalog fields.
    """
    domain = _require_shared_domain(fields)
    s = int(supersample_factor)
    if s < 1:
        raise ValueError("supersample_factor must be >= 1")
    if s == 1:
        pts = np.stack([f.values.ravel() for f in fields], axis=1)
    else:
        m = s * domain.resolution
        coords = np.meshgrid(*[np.arange(m) / s] * domain.n, indexing="ij")
        coords = np.stack([c.ravel() for c in coords])
        pts = np.stack([ndimage.map_coordinates(f.values, coords, order=1, mode="grid-wrap")
                        for f in fields], axis=1)
    return EvaluationSample(domain, np.ascontiguousarray(pts), s)


def _dilate_indices(idx: np.ndarray, radius: int, n: int) -> np.ndarray:
    if radius < 0:
        raise ValueError("dilation must be >= 0")
    if radius == 0 or len(idx) == 0:
        return idx
    lo = idx.min(axis=0) - radius
    shape = tuple(idx.max(axis=0) - lo + radius + 1)
    grid = np.zeros(shape, dtype=bool)
    grid[tuple((idx - lo).T)] = True
    # Chebyshev dilation = box structuring element
    grid = ndimage.binary_dilation(grid, structure=np.ones((2 * radius + 1,) * n, dtype=bool))
    return np.argwhere(grid) + lo


def _default_origin(n: int, origin) -> np.ndarray:
    return np.zeros(n) if origin is None else np.asarray(origin, dtype=np.float64).reshape(n)


def voxelize_image(sample: EvaluationSample, voxel_size: float, dilation: int = 1,
                   origin=None) -> VoxelSet:
    """Voxels containing a sample point, dilated by ``dilation`` voxels (Chebyshev)."""
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    if len(sample.points) == 0:
        raise ValueError("empty sample")
    n = sample.domain.n
    origin = _default_origin(n, origin)
    idx = np.floor((sample.points - origin) / voxel_size).astype(np.int64)
    idx = np.unique(idx, axis=0)
    return VoxelSet(n, voxel_size, origin, _dilate_indices(idx, dilation, n))


def _cell_corner_values(values: np.ndarray, n: int):
    """Periodic corner values of every grid cell, as a list of 2**n arrays."""
    corners = []
    for shift in product((0, 1), repeat=n):
        v = values
        for axis, sh in enumerate(shift):
            if sh:
                v = np.roll(v, -1, axis=axis)
        corners.append(v)
    return corners


def cover_image(fields: Sequence[GridField], voxel_size: float, dilation: int = 1,
                origin=None) -> VoxelSet:
    """Conservative voxel cover of the image of the multilinear interpolant.

    Every grid cell is mapped into the bounding box of its corner images, so
    marking all voxels meeting that box covers the interpolated image no matter
    how coarse the grid is compared with ``voxel_size``.
    """
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    domain = _require_shared_domain(fields)
    n = domain.n
    origin = _default_origin(n, origin)
    lo_idx, hi_idx = [], []
    for f, o in zip(fields, origin):
        corners = _cell_corner_values(f.values, n)
        cmin = np.minimum.reduce(corners).ravel()
        cmax = np.maximum.reduce(corners).ravel()
        lo_idx.append(np.floor((cmin - o) / voxel_size).astype(np.int64))
        hi_idx.append(np.floor((cmax - o) / voxel_size).astype(np.int64))
    lo_idx, hi_idx = np.stack(lo_idx, 1), np.stack(hi_idx, 1)
    base = lo_idx.min(axis=0)
    shape = tuple(hi_idx.max(axis=0) - base + 1)
    if math.prod(shape) > 400_000_000:
        raise UndersamplingError(f"image bounding box of {shape} voxels is too large")
    grid = np.zeros(shape, dtype=bool)
    extent = hi_idx - lo_idx
    for offset in product(*[range(e + 1) for e in extent.max(axis=0)]):
        off = np.asarray(offset)
        mask = np.all(extent >= off, axis=1)
        if mask.any():
            grid[tuple((lo_idx[mask] + off - base).T)] = True
    idx = np.argwhere(grid) + base
    return VoxelSet(n, voxel_size, origin, _dilate_indices(idx, dilation, n))


# ---------------------------------------------------------------------------
# multiplicity

def _kuhn_simplices(n: int) -> list[list[tuple[int, ...]]]:
    """Vertex offsets of the n! Kuhn simplices of the unit cube."""
    simplices = []
    for perm in permutations(range(n)):
        vertex = [0] * n
        verts = [tuple(vertex)]
        for axis in perm:
            vertex[axis] = 1
            verts.append(tuple(vertex))
        simplices.append(verts)
    return simplices


def max_edge_length(sample: EvaluationSample) -> float:
    """Largest Euclidean image length of a grid edge of the sample lattice."""
    grid = sample.as_grid()
    n = sample.domain.n
    best = 0.0
    for axis in range(n):
        d = np.roll(grid, -1, axis=axis) - grid
        best = max(best, float(np.sqrt(np.max(np.sum(d * d, axis=-1)))))
    return best


def _refinement_points(n: int, k: int) -> dict[tuple[int, ...], np.ndarray]:
    """Centroids of the Kuhn simplices of the k-refined unit cell, grouped by the
    coarse Kuhn simplex containing them (the refinement is compatible).

    Keyed by the permutation ``perm`` of the coarse simplex
    ``{1 >= x[perm[0]] >= ... >= x[perm[-1]] >= 0}``; each value has shape
    ``(k**n, n)`` in local cell coordinates.
    """
    groups: dict[tuple[int, ...], list] = {p: [] for p in permutations(range(n))}
    for sub in product(range(k), repeat=n):
        for perm in permutations(range(n)):
            vertex = np.zeros(n)
            acc = vertex.copy()
            for axis in perm:
                vertex[axis] += 1
                acc += vertex
            centroid = (np.asarray(sub) + acc / (n + 1)) / k
            coarse = tuple(int(i) for i in np.argsort(-centroid, kind="stable"))
            groups[coarse].append(centroid)
    return {p: np.asarray(v) for p, v in groups.items()}


def _deposit_simplices(grid: np.ndarray, n: int, rows: slice, k: int):
    """Yield (image points, mass per point) for the refined Kuhn simplices of a block of cells."""
    side = grid.shape[0]
    idx0 = np.arange(rows.start, rows.stop)
    corner = {}
    for shift in product((0, 1), repeat=n):
        block = grid[(idx0 + shift[0]) % side]
        for axis in range(1, n):
            if shift[axis]:
                block = np.roll(block, -1, axis=axis)
        corner[shift] = block.reshape(-1, n)
    fact = math.factorial(n)
    for perm, local in _refinement_points(n, k).items():
        verts, vertex = [tuple([0] * n)], [0] * n
        for axis in perm:
            vertex[axis] = 1
            verts.append(tuple(vertex))
        steps = [corner[verts[j + 1]] - corner[verts[j]] for j in range(n)]
        vol = np.abs(np.linalg.det(np.stack(steps, axis=1))) / fact
        image = np.repeat(corner[verts[0]][:, None, :], len(local), axis=1)
        for j, axis in enumerate(perm):
            image += local[None, :, axis, None] * steps[j][:, None, :]
        yield image.reshape(-1, n), np.repeat(vol / len(local), len(local))


def auto_subdivide(sample: EvaluationSample, voxel_size: float) -> int:
    """Smallest refinement passing the undersampling guard of :func:`multiplicity`."""
    return max(1, math.ceil(2 * max_edge_length(sample) / voxel_size * (1 + 1e-12)))


def multiplicity(sample: EvaluationSample, voxel_size: float, origin=None,
                 subdivide: int = 1) -> MultiplicityGrid:
    """Estimate the voxel-averaged multiplicity ``n_alpha``.

    Each Kuhn simplex of the sample lattice is split into ``subdivide**n``
    pieces; every piece spreads its image volume bilinearly over the ``2**n``
    voxel centres surrounding its image centroid.  Raises :class:`UndersamplingError` when
    ``voxel_size`` is below twice the largest image length of a refined
    lattice edge, where the per-voxel split stops being meaningful.
    """
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    k = int(subdivide)
    if k < 1:
        raise ValueError("subdivide must be >= 1")
    n = sample.domain.n
    origin = _default_origin(n, origin)
    edge = max_edge_length(sample) / k
    if voxel_size < 2 * edge:
        raise UndersamplingError(
            f"voxel_size {voxel_size:.3g} < 2 x max image edge {edge:.3g}; "
            "increase supersample_factor or subdivide")
    grid = sample.as_grid()
    cell_volume = float(np.prod(sample.spacing))
    lo = np.floor((sample.points.min(axis=0) - origin) / voxel_size).astype(np.int64) - 1
    hi = np.floor((sample.points.max(axis=0) - origin) / voxel_size).astype(np.int64) + 1
    shape = tuple(hi - lo + 1)
    mass = np.zeros(math.prod(shape))
    hits = np.zeros(math.prod(shape), dtype=np.int64)

    def flat(points):
        idx = np.floor((points - origin) / voxel_size).astype(np.int64) - lo
        return np.ravel_multi_index(tuple(idx.T), shape)

    side = grid.shape[0]
    chunk = max(1, 1_000_000 // (side ** (n - 1) * k ** n))
    for start in range(0, side, chunk):
        rows = slice(start, min(side, start + chunk))
        for image, weight in _deposit_simplices(grid, n, rows, k):
            # cloud-in-cell: split each piece among the 2**n nearest voxel centres
            u = (image - origin) / voxel_size - 0.5
            base = np.floor(u)
            frac = u - base
            base = base.astype(np.int64) - lo
            for corner in product((0, 1), repeat=n):
                w = weight.copy()
                for axis, c in enumerate(corner):
                    w *= frac[:, axis] if c else 1.0 - frac[:, axis]
                target = np.ravel_multi_index(tuple((base + np.asarray(corner)).T), shape)
                mass += np.bincount(target, weights=w, minlength=mass.size)
        hits += np.bincount(flat(grid[rows].reshape(-1, n)), minlength=hits.size)

    support = np.flatnonzero((mass > 0) | (hits > 0))
    mean = mass[support] / voxel_size ** n
    counts = np.rint(mean).astype(np.int64)
    preimage = hits[support] * cell_volume
    non_integral = np.abs(mean - counts) > 0.25
    degenerate = (preimage >= 0.01 * sample.domain.volume) & (mass[support] <= 1e-3 * preimage)
    indices = np.stack(np.unravel_index(support, shape), axis=1) + lo
    return MultiplicityGrid(voxel_size, origin, indices, mean, counts, hits[support],
                            non_integral, degenerate)


def area_formula_sides(fields: Sequence[GridField], sample: EvaluationSample,
                       voxel_size: float, subdivide: int = 1) -> tuple[float, float]:
    """(integral of the multiplicity over the image, L1 norm of the bracket)."""
    if sample.domain != _require_shared_domain(fields):
        raise DomainError("sample and fields live on different domains")
    mult = multiplicity(sample, voxel_size, subdivide=subdivide)
    return mult.integral, l1_norm(bracket(fields))


def area_formula_check(fields: Sequence[GridField], sample: EvaluationSample,
                       voxel_size: float, subdivide: int = 1) -> float:
    """``|integral n_alpha - ||bracket||_L1| / max(1, ||bracket||_L1)``."""
    lhs, rhs = area_formula_sides(fields, sample, voxel_size, subdivide)
    return abs(lhs - rhs) / max(1.0, rhs)


def degree_bound_check(voxels: VoxelSet, report: BracketReport, slack: float = 1.5) -> DegreeCheck:
    """Check ``|K| <= epsilon * slack``, the consequence of alpha having degree zero.

    With ``epsilon == 0`` and a non-empty voxel set the check cannot succeed:
    any voxelisation has positive measure.  That case is reported as the
    dilation floor rather than as a violation of the inequality.
    """
    measure = voxels.measure
    eps = report.epsilon
    if eps == 0 and measure > 0:
        return DegreeCheck(False, measure, eps, slack,
                           "dilation floor: a non-empty voxelisation has positive measure")
    return DegreeCheck(measure <= eps * slack, measure, eps, slack)
