"""Seeded random voxel sets used by the CLI self-checks and the test suite."""
from __future__ import annotations

import math

import numpy as np

from .evalmap import VoxelSet


def random_voxel_set(seed: int, n: int, measure: float, count: int,
                     spread: float = 3.0) -> VoxelSet:
    """``count`` distinct voxels of total ``measure`` scattered in a box.

    Voxel indices are drawn without replacement from ``[0, M)^n`` with
    ``M = ceil(spread * count**(1/n))``; the origin is a random offset so the
    voxel lattice is not aligned with the integer lattice.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    side = (measure / count) ** (1.0 / n)
    box = max(2, int(math.ceil(spread * count ** (1.0 / n))))
    flat = rng.choice(box ** n, size=count, replace=False)
    idx = np.stack(np.unravel_index(flat, (box,) * n), axis=1)
    origin = rng.uniform(-1.0, 1.0, n)
    return VoxelSet(n, side, origin, idx)


def random_voxel_family(seed: int, size: int, n: int, measure_range=(0.001, 0.5),
                        count_range=(5, 40)) -> list[VoxelSet]:
    rng = np.random.Generator(np.random.Philox(seed))
    out = []
    lo, hi = np.log(measure_range[0]), np.log(measure_range[1])
    for i in range(size):
        measure = float(np.exp(rng.uniform(lo, hi)))
        count = int(rng.integers(count_range[0], count_range[1] + 1))
        out.append(random_voxel_set(seed * 1000 + i, n, measure, count))
    return out
