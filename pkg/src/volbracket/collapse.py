"""The measure-collapsing map ``phi = m_gamma^-1 . psi . Phi . m_gamma``.

Work happens in the rescaled frame where the compact set has measure 1 and
integer cubes ``C_nu = nu + [0, 1]^n`` are the natural cells:

* ``Phi`` is the time-1 flow of a field that, inside every cube meeting the
  set, translates a ball free of the set onto the ball around the cube centre;
* ``psi`` retracts each cube minus a small central ball onto the cube
  boundary and is the identity near the centre.

After both, the set lies on the union of cube boundaries, a null set, and no
point moved out of its own closed unit cube; rescaling back, every coordinate
moved by at most ``|K|**(1/n)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .evalmap import VoxelSet
from .mollify import CUTOFF_LAMBDA, DEFAULT_LAMBDA, cutoff, sigma_profile, smooth_ramp, smoothstep_a

MAX_EPS = 1.0 / 6.0
# the capsule field is constant for D <= 2 eps and vanishes for D >= BUMP_END * eps
BUMP_END = 2.75
RAMP_FRACTION = 1.0 / 8.0
BOUNDARY_TOL = 1e-12


class CollapseError(RuntimeError):
    """Construction of the collapse map failed."""


@dataclass(frozen=True)
class CollapseParams:
    eps: float = MAX_EPS
    lambda_cap: float = DEFAULT_LAMBDA
    flow_steps: int = 64
    retry_shrink: float = 0.5
    max_retries: int = 8
    min_clearance: float = 1e-6
    # a tiny free ball forces a very stiff clearing field; give up beyond this
    max_flow_steps: int = 100_000

    def __post_init__(self):
        if not 0 < self.eps <= MAX_EPS:
            raise ValueError(f"eps must lie in (0, 1/6], got {self.eps}")
        if not self.lambda_cap > 0:
            raise ValueError("lambda_cap must be positive")
        if self.flow_steps < 16:
            raise ValueError("flow_steps must be >= 16")
        if not 0 < self.retry_shrink < 1:
            raise ValueError("retry_shrink must lie in (0, 1)")
        if self.max_retries < 0 or self.max_flow_steps < self.flow_steps:
            raise ValueError("max_retries must be >= 0 and max_flow_steps >= flow_steps")


@dataclass(frozen=True)
class IntegerCube:
    nu: tuple[int, ...]

    @property
    def corner(self) -> np.ndarray:
        return np.asarray(self.nu, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return self.corner + 0.5


@dataclass(frozen=True, eq=False)
class FreeBall:
    p: np.ndarray
    eps_c: float
    clearance: float


# ---------------------------------------------------------------------------
# the retraction psi

def face_map_c(x, lambda_cap: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Self-map of the boundary of ``[-1/2, 1/2]^n``.

    Every coordinate ``u`` becomes ``a(u + 1/2) - 1/2``.  Extremal coordinates
    are fixed because ``a(0) = 0`` and ``a(1) = 1``, so each face maps to itself
    and the formula is the same on every face, which keeps ``psi`` consistent
    across faces shared by neighbouring cubes.
    """
    x = np.asarray(x, dtype=np.float64)
    sup = np.max(np.abs(x), axis=-1)
    if np.any(np.abs(sup - 0.5) > BOUNDARY_TOL):
        raise ValueError("face_map_c expects points on the boundary of [-1/2, 1/2]^n")
    t = np.clip(x + 0.5, 0.0, 1.0)
    return smoothstep_a(t, lambda_cap) - 0.5


def radial_to_cube_f(u, lambda_cap: float = DEFAULT_LAMBDA) -> np.ndarray:
    """``f = c . (radial projection restricted to the cube boundary)^-1``."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(u, axis=-1) - 1.0) > BOUNDARY_TOL):
        raise ValueError("radial_to_cube_f expects unit vectors")
    scale = 0.5 / np.max(np.abs(u), axis=-1, keepdims=True)
    return face_map_c(u * scale, lambda_cap)


def cube_collapse_psi(x, eps: float, lambda_cap: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Apply ``psi`` to points of shape ``(..., n)``.

    Identity on ``B(m_nu, eps)``, sends ``C_nu - B(m_nu, 2 eps)`` onto the
    boundary of ``C_nu``, maps each cube into itself.  The cube of a point on
    a shared face is chosen by ``floor``.
    """
    if not 0 < eps <= MAX_EPS:
        raise ValueError("eps must lie in (0, 1/6]")
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    center = np.floor(flat) + 0.5
    d = flat - center
    r = np.linalg.norm(d, axis=1)
    lam = np.asarray(cutoff(r, eps, 2 * eps, CUTOFF_LAMBDA)).reshape(-1)
    out = flat.copy()
    moving = lam > 0
    if np.any(moving):
        dm = d[moving]
        u = dm / r[moving, None]
        # unit vectors from the division are within rounding of norm 1
        scale = 0.5 / np.max(np.abs(u), axis=1, keepdims=True)
        target = center[moving] + face_map_c(u * scale, lambda_cap)
        lm = lam[moving, None]
        out[moving] = (1.0 - lm) * flat[moving] + lm * target
    return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# free balls

_BRUTE_FORCE_PAIRS = 2_000_000


def _box_distance(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to the nearest box, shape (P,).

    A box whose centre lies farther than ``r + h`` (``r`` the nearest-centre
    distance, ``h`` the largest half-diagonal) cannot be nearest, so only the
    centres inside that radius are measured exactly.
    """
    if len(lo) == 0:
        return np.full(len(points), np.inf)
    if len(lo) * len(points) <= _BRUTE_FORCE_PAIRS:
        gap = np.maximum(np.maximum(lo[None] - points[:, None], points[:, None] - hi[None]), 0.0)
        return np.sqrt(np.min(np.sum(gap * gap, axis=2), axis=1))
    centers = (lo + hi) / 2
    half = float(np.max(np.linalg.norm(hi - lo, axis=1))) / 2
    tree = cKDTree(centers)
    r, _ = tree.query(points)
    cand = tree.query_ball_point(points, r + half * (1 + 1e-12) + 1e-15)
    sizes = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(cand))
    flat = np.fromiter((j for c in cand for j in c), dtype=np.int64, count=int(sizes.sum()))
    owner = np.repeat(points, sizes, axis=0)
    gap = np.maximum(np.maximum(lo[flat] - owner, owner - hi[flat]), 0.0)
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    return np.sqrt(np.minimum.reduceat(np.sum(gap * gap, axis=1), starts))


def _clearance(points, corner, lo, hi):
    to_boundary = np.min(np.minimum(points - corner, corner + 1.0 - points), axis=1)
    return np.minimum(to_boundary, _box_distance(points, lo, hi))


def _boxes_meeting_cube(lo, hi, corner):
    mask = np.all((hi >= corner) & (lo <= corner + 1.0), axis=1)
    return lo[mask], hi[mask]


def find_free_ball(k: VoxelSet, cube: IntegerCube, scale: float = 1.0,
                   min_clearance: float = 1e-6, lattice: Optional[int] = None) -> Optional[FreeBall]:
    """Largest ball inside ``cube`` avoiding ``scale * K``.

    Maximises the exact clearance ``d(p) = dist(p, scale*K union boundary)`` over a
    lattice in the cube, then refines around the best node three times.
    Returns ``None`` (the full-cube signal) when ``d < min_clearance``.
    Otherwise ``eps_c = d / 3``.
    """
    n = k.n
    corner = cube.corner
    lo, hi = k.boxes()
    lo, hi = _boxes_meeting_cube(lo * scale, hi * scale, corner)
    g = lattice or (41 if n == 2 else 17)
    offsets = (np.arange(g) + 0.5) / g
    cand = corner + np.stack(np.meshgrid(*[offsets] * n, indexing="ij"), -1).reshape(-1, n)
    d = _clearance(cand, corner, lo, hi)
    best = int(np.argmax(d))
    p, dbest = cand[best], d[best]
    width = 1.0 / g
    for _ in range(3):
        local = (np.arange(g) - (g - 1) / 2) * (2 * width / (g - 1))
        cand = p + np.stack(np.meshgrid(*[local] * n, indexing="ij"), -1).reshape(-1, n)
        cand = cand[np.all((cand > corner) & (cand < corner + 1.0), axis=1)]
        d = _clearance(cand, corner, lo, hi)
        i = int(np.argmax(d))
        if d[i] > dbest:
            p, dbest = cand[i], d[i]
        width = 2 * width / (g - 1)
    if dbest < min_clearance:
        return None
    return FreeBall(p=p, eps_c=float(dbest) / 3.0, clearance=float(dbest))


# ---------------------------------------------------------------------------
# the clearing flow Phi

@dataclass(frozen=True, eq=False)
class ClearingField:
    """Compactly supported field translating ``B(p, 2 eps)`` onto ``B(m, 2 eps)``.

    With ``e`` the unit vector from ``p`` to ``m``, ``s`` the coordinate along
    ``e`` and ``r`` the distance to the line, the smoothed capsule distance is
    ``D^2 = r^2 + R(-s)^2 + R(s - L)^2`` where ``R`` is a flat ramp of width
    ``eps / 8``.  ``D`` never exceeds the distance to the segment ``[p, m]``
    and undershoots it by at most ``eps / 8``.  The field is ``m - p`` where
    ``D <= 2 eps`` and vanishes where ``D >= 2.75 eps``, hence outside the
    ``2.76 eps`` tube around the segment, which lies in the open cube.
    """
    cube: IntegerCube
    p: np.ndarray
    eps_c: float
    eps: float

    def __post_init__(self):
        corner = self.cube.corner
        if not self.eps <= self.eps_c + 1e-15:
            raise CollapseError(f"cube {self.cube.nu}: eps {self.eps} exceeds eps_c {self.eps_c}")
        margin = float(np.min(np.minimum(self.p - corner, corner + 1.0 - self.p)))
        if margin < 3 * self.eps * (1 - 1e-12) or self.eps > MAX_EPS:
            raise CollapseError(f"cube {self.cube.nu}: capsule leaves the open cube")

    @property
    def segment(self) -> tuple[np.ndarray, np.ndarray]:
        return self.p, self.cube.center

    @property
    def bump_inner(self) -> float:
        return 2 * self.eps

    @property
    def bump_outer(self) -> float:
        return BUMP_END * self.eps

    @property
    def shift(self) -> np.ndarray:
        return self.cube.center - self.p

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.shift))

    def strength(self, x: np.ndarray) -> np.ndarray:
        """Scalar profile in [0, 1]; the field is ``strength * (m - p)``."""
        if self.length == 0.0:
            return np.zeros(len(x))
        return _capsule_strength(x, self.p, self.shift, self.length, self.eps)

    def velocity(self, x: np.ndarray) -> np.ndarray:
        return self.strength(x)[:, None] * self.shift

    def step_count(self, minimum: int) -> int:
        # |grad X| <= 8 L / eps for this profile; keep h |grad X| <= 0.2
        return max(minimum, int(math.ceil(40.0 * self.length / self.eps)))

    def to_dict(self) -> dict:
        return {"nu": list(self.cube.nu), "p": [float(v) for v in self.p],
                "eps_c": self.eps_c}


def _capsule_strength(x, p, shift, length, eps):
    # p, shift, length broadcast against x row-wise
    length = np.asarray(length, dtype=np.float64)
    e = shift / (length[..., None] if length.ndim else length)
    rel = x - p
    s = np.sum(rel * e, axis=-1)
    r2 = np.maximum(np.sum(rel * rel, axis=-1) - s * s, 0.0)
    width = RAMP_FRACTION * eps
    d2 = r2 + smooth_ramp(-s, width) ** 2 + smooth_ramp(s - length, width) ** 2
    return 1.0 - cutoff(np.sqrt(d2), 2 * eps, BUMP_END * eps, CUTOFF_LAMBDA)


def _rk4(velocity, x: np.ndarray, steps: int) -> np.ndarray:
    h = 1.0 / steps
    for _ in range(steps):
        k1 = velocity(x)
        k2 = velocity(x + 0.5 * h * k1)
        k3 = velocity(x + 0.5 * h * k2)
        k4 = velocity(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def special_velocity(x: np.ndarray, cube: IntegerCube) -> np.ndarray:
    """Radial field ``2 sqrt(n) sigma(|x - nu|) (nu - x) / |x - nu|`` towards the corner nu."""
    n = x.shape[1]
    rel = cube.corner - x
    r = np.linalg.norm(rel, axis=1)
    sig = np.asarray(sigma_profile(r, n)).reshape(-1)
    out = np.zeros_like(x)
    live = sig > 0
    out[live] = (2 * math.sqrt(n) * sig[live] / r[live])[:, None] * rel[live]
    return out


def special_step_count(n: int, minimum: int) -> int:
    # sigma rises over 1/90 with rho' <= 2, so |grad X| <~ 2 sqrt(n) * 190
    return max(minimum, int(math.ceil(5 * 2 * math.sqrt(n) * 190)))


def clearing_flow_phi(x, clearing: Sequence[ClearingField], special: Sequence[IntegerCube],
                      params: CollapseParams) -> np.ndarray:
    """Time-1 map of the clearing flow (rescaled frame), classical RK4."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    n = flat.shape[1]
    for cube in special:
        flat = _rk4(lambda y, c=cube: special_velocity(y, c), flat,
                    special_step_count(n, params.flow_steps))
    live = [f for f in clearing if f.length > 0]
    if live:
        by_cube = {f.cube.nu: i for i, f in enumerate(live)}
        owner = np.array([by_cube.get(tuple(nu), -1) for nu in np.floor(flat).astype(np.int64)],
                         dtype=np.int64)
        sel = np.flatnonzero(owner >= 0)
        P = np.stack([f.p for f in live])[owner[sel]]
        S = np.stack([f.shift for f in live])[owner[sel]]
        L = np.array([f.length for f in live])[owner[sel]]
        # the fields share one eps; points where the field vanishes are fixed
        eps = live[0].eps
        moving = _capsule_strength(flat[sel], P, S, L, eps) > 0
        sel, P, S, L = sel[moving], P[moving], S[moving], L[moving]
        if len(sel):
            steps = max(f.step_count(params.flow_steps) for f in live)
            flat[sel] = _rk4(lambda y: _capsule_strength(y, P, S, L, eps)[:, None] * S,
                             flat[sel], steps)
    return flat.reshape(x.shape)


# ---------------------------------------------------------------------------
# the composed map

@dataclass(frozen=True, eq=False)
class CollapseMap:
    mode: str  # "generic" | "identity" | "special"
    n: int
    gamma: float
    eps: float
    params: CollapseParams
    clearing: tuple[ClearingField, ...] = ()
    special_cubes: tuple[IntegerCube, ...] = ()
    cubes: tuple[IntegerCube, ...] = ()
    retries_used: int = 0
    measure: float = 0.0

    def __call__(self, x) -> np.ndarray:
        return evaluate_collapse(self, x)

    def to_dict(self) -> dict:
        entries = [f.to_dict() for f in self.clearing]
        entries += [{"nu": list(c.nu), "special": True} for c in self.special_cubes]
        entries.sort(key=lambda e: e["nu"])
        return {"mode": self.mode, "gamma": self.gamma, "eps": self.eps,
                "cubes": entries, "retries_used": self.retries_used}


@dataclass(frozen=True)
class DisplacementReport:
    per_coordinate_sup: tuple[float, ...]
    bound: float
    skeleton_max_distance: Optional[float]
    sample_count: int = 0

    @property
    def max_displacement(self) -> float:
        return max(self.per_coordinate_sup, default=0.0)

    def to_dict(self) -> dict:
        return {"per_coordinate_sup": list(self.per_coordinate_sup), "bound": self.bound,
                "skeleton_max_distance": ("not applicable" if self.skeleton_max_distance is None
                                          else self.skeleton_max_distance),
                "sample_count": self.sample_count}


def _cubes_meeting(lo: np.ndarray, hi: np.ndarray, tol: float = 1e-9) -> list[IntegerCube]:
    """Integer cubes whose interior meets one of the boxes."""
    found = set()
    first = np.floor(lo + tol).astype(np.int64)
    last = np.ceil(hi - tol).astype(np.int64) - 1
    for a, b in zip(first, last):
        for nu in product(*[range(int(s), int(e) + 1) for s, e in zip(a, b)]):
            found.add(nu)
    return [IntegerCube(nu) for nu in sorted(found)]


def _check_points(k: VoxelSet, gamma: float) -> np.ndarray:
    """Voxel corners and centres of gamma*K."""
    lo, _ = k.boxes()
    side = k.voxel_size
    offsets = [np.asarray(c, dtype=np.float64) for c in product((0.0, 1.0), repeat=k.n)]
    offsets.append(np.full(k.n, 0.5))
    pts = np.concatenate([lo + side * o for o in offsets])
    return np.unique(pts, axis=0) * gamma


def _ball_violations(y: np.ndarray, eps: float) -> np.ndarray:
    center = np.floor(y) + 0.5
    return np.linalg.norm(y - center, axis=1) < 2 * eps * (1 - 1e-6)


def build_collapse_map(k: VoxelSet, params: CollapseParams = CollapseParams()) -> CollapseMap:
    """Construct ``phi`` for the voxel set ``k``.

    Raises :class:`CollapseError` when a cube is saturated while the set is not
    contained in that single cube, or when the clearing postcondition still
    fails after ``params.max_retries`` shrinkings of ``eps``.
    """
    n = k.n
    measure = k.measure
    if measure == 0:
        return CollapseMap("identity", n, 1.0, params.eps, params, measure=0.0)
    gamma = measure ** (-1.0 / n)
    lo, hi = k.boxes()
    lo, hi = lo * gamma, hi * gamma
    cubes = _cubes_meeting(lo, hi)
    balls, saturated = {}, []
    for cube in cubes:
        ball = find_free_ball(k, cube, gamma, params.min_clearance)
        if ball is None:
            saturated.append(cube)
        else:
            balls[cube.nu] = ball
    if saturated:
        cube = saturated[0]
        inside = (np.all(lo >= cube.corner - 1e-9) and np.all(hi <= cube.corner + 1 + 1e-9))
        if len(saturated) > 1 or not inside:
            raise CollapseError(
                f"cube {cube.nu} has no free ball but the set is not contained in it")
        eps = min(MAX_EPS, params.eps)
        return CollapseMap("special", n, gamma, eps, params, special_cubes=(cube,),
                           cubes=tuple(cubes), measure=measure)

    eps = min(MAX_EPS, params.eps, min(b.eps_c for b in balls.values()))
    check = _check_points(k, gamma)
    retries = 0
    while True:
        clearing = tuple(ClearingField(c, balls[c.nu].p, balls[c.nu].eps_c, eps) for c in cubes)
        steps = max(f.step_count(params.flow_steps) for f in clearing)
        if steps > params.max_flow_steps:
            worst = min(cubes, key=lambda c: balls[c.nu].eps_c)
            raise CollapseError(f"cube {worst.nu}: free ball radius {balls[worst.nu].eps_c:.3g} "
                                f"needs {steps} flow steps (limit {params.max_flow_steps})")
        moved = clearing_flow_phi(check, clearing, (), params)
        bad = _ball_violations(moved, eps)
        if not np.any(bad):
            break
        if retries >= params.max_retries:
            nu = tuple(int(v) for v in np.floor(moved[np.argmax(bad)]))
            raise CollapseError(f"clearing postcondition fails in cube {nu} after {retries} retries")
        retries += 1
        eps *= params.retry_shrink
    return CollapseMap("generic", n, gamma, eps, params, clearing=clearing,
                       cubes=tuple(cubes), retries_used=retries, measure=measure)


def evaluate_collapse(cmap: CollapseMap, x) -> np.ndarray:
    """``phi(x) = psi(Phi(gamma x)) / gamma`` for points of shape ``(..., n)``."""
    x = np.asarray(x, dtype=np.float64)
    if cmap.mode == "identity":
        return x.copy()
    y = clearing_flow_phi(x * cmap.gamma, cmap.clearing, cmap.special_cubes, cmap.params)
    y = cube_collapse_psi(y, cmap.eps, cmap.params.lambda_cap)
    return y / cmap.gamma


def sample_voxels(k: VoxelSet, samples_per_voxel: int, seed: int = 0) -> np.ndarray:
    """Corners, centres and seeded uniform interior points of every voxel."""
    if samples_per_voxel < 8:
        raise ValueError("samples_per_voxel must be >= 8")
    if k.count == 0:
        return np.empty((0, k.n))
    lo, _ = k.boxes()
    side = k.voxel_size
    fixed = [np.asarray(c, dtype=np.float64) for c in product((0.0, 1.0), repeat=k.n)]
    fixed.append(np.full(k.n, 0.5))
    pts = [lo + side * o for o in fixed]
    rng = np.random.Generator(np.random.Philox(seed))
    u = rng.random((k.count, samples_per_voxel, k.n))
    pts.append((lo[:, None, :] + side * u).reshape(-1, k.n))
    return np.concatenate(pts)


def skeleton_distance(y: np.ndarray) -> np.ndarray:
    """Distance of each rescaled point to the union of integer-cube boundaries."""
    return np.min(np.abs(y - np.rint(y)), axis=-1)


def displacement_report(cmap: CollapseMap, k: VoxelSet, samples_per_voxel: int = 16,
                        seed: int = 0) -> DisplacementReport:
    """Measure ``sup |x_i - phi(x)_i|`` and the distance of ``gamma phi(K)`` to the skeleton."""
    pts = sample_voxels(k, samples_per_voxel, seed)
    bound = k.measure ** (1.0 / k.n)
    if cmap.mode == "identity" or len(pts) == 0:
        return DisplacementReport((0.0,) * k.n, bound, None, len(pts))
    image = evaluate_collapse(cmap, pts)
    sup = np.max(np.abs(pts - image), axis=0)
    skel = float(np.max(skeleton_distance(image * cmap.gamma)))
    return DisplacementReport(tuple(float(v) for v in sup), bound, skel, len(pts))
