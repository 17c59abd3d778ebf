"""End-to-end commuting approximation, thickness estimates and sequences."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .collapse import (CollapseError, CollapseMap, CollapseParams, DisplacementReport,
                       build_collapse_map, displacement_report, evaluate_collapse,
                       skeleton_distance)
from .evalmap import VoxelSet, cover_image, degree_bound_check
from .grid import BracketReport, DomainError, GridField, _require_shared_domain, bracket_report

DISPLACEMENT_SLACK = 1e-6
SKELETON_TOL = 1e-9


@dataclass
class ApproximationReport:
    bracket_before: BracketReport
    measure_K: float
    bound: float
    measure_bound: float
    per_coordinate_displacement: tuple[float, ...]
    bracket_after_l1: float
    bracket_after_c0: float
    skeleton_max_distance: Optional[float]
    degree_bound_ok: bool
    collapse: dict
    resolutions: dict
    notes: list[str] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    @property
    def certified(self) -> bool:
        return not self.violations

    @property
    def max_displacement(self) -> float:
        return max(self.per_coordinate_displacement)

    def to_dict(self) -> dict:
        return {
            "bracket_before": self.bracket_before.to_dict(),
            "measure_K": self.measure_K,
            "bound": self.bound,
            "measure_bound": self.measure_bound,
            "per_coordinate_displacement": list(self.per_coordinate_displacement),
            "bracket_after_l1": self.bracket_after_l1,
            "bracket_after_c0": self.bracket_after_c0,
            "skeleton_max_distance": ("not applicable" if self.skeleton_max_distance is None
                                      else self.skeleton_max_distance),
            "degree_bound_ok": self.degree_bound_ok,
            "collapse": self.collapse,
            "resolutions": self.resolutions,
            "notes": list(self.notes),
            "violations": list(self.violations),
            "certified": self.certified,
        }


def commuting_approximation(fields: Sequence[GridField], voxel_size: float, dilation: int = 1,
                            params: CollapseParams = CollapseParams(), origin=None
                            ) -> tuple[list[GridField], ApproximationReport]:
    """Perturb ``fields`` into functions with identically vanishing bracket.

    ``F'_i = p_i . phi . alpha`` where ``phi`` collapses a conservative voxel
    cover ``K`` of the image of ``alpha``.  Every coordinate moves by at most
    ``|K|**(1/n)``; when the bracket vanishes on the grid the identity is used.
    """
    domain = _require_shared_domain(fields)
    n = domain.n
    if len(fields) != n:
        raise DomainError(f"expected {n} fields, got {len(fields)}")
    before = bracket_report(fields)
    voxels = cover_image(fields, voxel_size, dilation, origin)
    degree = degree_bound_check(voxels, before)
    resolutions = {"resolution": domain.resolution, "period": list(domain.period),
                   "voxel_size": voxel_size, "dilation": dilation,
                   "flow_steps": params.flow_steps, "lambda_cap": params.lambda_cap,
                   "eps_cap": params.eps}
    notes = []
    alpha = np.stack([f.values.ravel() for f in fields], axis=1)
    if before.epsilon == 0:
        cmap = CollapseMap("identity", n, 1.0, params.eps, params)
        notes.append("bracket vanishes on the grid: identity map, certificate trivially inherited")
    else:
        cmap = build_collapse_map(voxels, params)
    image = evaluate_collapse(cmap, alpha)
    new_fields = [GridField(domain, image[:, i]) for i in range(n)]
    after = bracket_report(new_fields)

    displacement = tuple(float(v) for v in np.max(np.abs(alpha - image), axis=0))
    measure_bound = voxels.measure ** (1.0 / n) if cmap.mode != "identity" else 0.0
    skeleton = None
    if cmap.mode != "identity":
        skeleton = float(np.max(skeleton_distance(image * cmap.gamma)))
    bound = before.epsilon ** (1.0 / n)
    half_range = max((f.values.max() - f.values.min()) / 2 for f in fields)
    if bound >= half_range:
        notes.append("bound vacuous but construction still collapses image")
    if not degree.ok and degree.note:
        notes.append(degree.note)

    violations = []
    if max(displacement) > measure_bound * (1 + DISPLACEMENT_SLACK):
        violations.append(f"displacement {max(displacement):.6g} exceeds |K|^(1/n) = {measure_bound:.6g}")
    if skeleton is not None and skeleton > SKELETON_TOL:
        violations.append(f"image lies {skeleton:.3g} away from the cube skeleton")
    report = ApproximationReport(
        bracket_before=before, measure_K=voxels.measure, bound=bound, measure_bound=measure_bound,
        per_coordinate_displacement=displacement, bracket_after_l1=after.l1_norm,
        bracket_after_c0=after.c0_norm, skeleton_max_distance=skeleton,
        degree_bound_ok=degree.ok, collapse=cmap.to_dict(), resolutions=resolutions,
        notes=notes, violations=violations)
    return new_fields, report


@dataclass(frozen=True)
class ThicknessReport:
    measure: float
    thickness_upper: float
    certificate: DisplacementReport

    def to_dict(self) -> dict:
        return {"measure": self.measure, "thickness_upper": self.thickness_upper,
                "certificate": self.certificate.to_dict()}


def thickness_upper_bound(k: VoxelSet, params: CollapseParams = CollapseParams(),
                          samples_per_voxel: int = 16, seed: int = 0
                          ) -> tuple[ThicknessReport, CollapseMap]:
    """Upper bound on thickness(K) from the displacement of the collapse map."""
    if k.measure == 0:
        raise ValueError("set has measure zero: use the identity; thickness 0")
    cmap = build_collapse_map(k, params)
    cert = displacement_report(cmap, k, samples_per_voxel, seed)
    return ThicknessReport(k.measure, cert.max_displacement, cert), cmap


@dataclass
class SequenceEntry:
    index: int
    epsilon: Optional[float]
    sqrt_epsilon: Optional[float]
    displacement: Optional[float]
    measure_bound: Optional[float]
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {"index": self.index, "epsilon": self.epsilon, "sqrt_epsilon": self.sqrt_epsilon,
                "displacement": self.displacement, "measure_bound": self.measure_bound,
                "error": self.error}


@dataclass
class SequenceReport:
    entries: list[SequenceEntry]

    @property
    def tail_max_displacement(self) -> list[Optional[float]]:
        """``max_{j >= k}`` displacement, the quantity that must tend to zero."""
        out, running = [], None
        for e in reversed(self.entries):
            if e.displacement is not None:
                running = e.displacement if running is None else max(running, e.displacement)
            out.append(running)
        return out[::-1]

    def to_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries],
                "tail_max_displacement": self.tail_max_displacement}


def commuting_sequence(pairs: Sequence[tuple[GridField, GridField]], voxel_size: float,
                       params: CollapseParams = CollapseParams(), dilation: int = 1
                       ) -> tuple[list[Optional[tuple[GridField, GridField]]], SequenceReport]:
    """Apply the commuting approximation pair by pair on surfaces.

    Demonstrates ``||F - F'_k|| <= ||F - F_k|| + sqrt(eps_k)``: each entry
    records ``eps_k`` and the measured displacement.  A failing pair is
    recorded and the sequence continues.
    """
    outputs, entries = [], []
    domain = None
    for k, (f, g) in enumerate(pairs, start=1):
        domain = domain or f.domain
        try:
            if f.domain.n != 2:
                raise DomainError("commuting sequences are defined on surfaces (n = 2)")
            if f.domain != domain or g.domain != domain:
                raise DomainError("all pairs must share one domain")
            new, rep = commuting_approximation([f, g], voxel_size, dilation, params)
        except (CollapseError, DomainError, ValueError) as exc:
            outputs.append(None)
            entries.append(SequenceEntry(k, None, None, None, None, str(exc)))
            continue
        outputs.append((new[0], new[1]))
        eps = rep.bracket_before.epsilon
        entries.append(SequenceEntry(k, eps, math.sqrt(eps), rep.max_displacement,
                                     rep.measure_bound))
    return outputs, SequenceReport(entries)
