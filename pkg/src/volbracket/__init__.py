"""Volume brackets on flat tori and measure-collapsing commuting approximations."""
from .collapse import (CollapseError, CollapseMap, CollapseParams, DisplacementReport,
                       build_collapse_map, displacement_report, evaluate_collapse, find_free_ball)
from .evalmap import (UndersamplingError, VoxelSet, area_formula_check, cover_image,
                      degree_bound_check, evaluate_map, multiplicity, voxelize_image)
from .grid import (BracketReport, DomainError, ExpressionError, GridField, TorusDomain,
                   bracket, bracket_report, sample_field)
from .pipeline import (ApproximationReport, commuting_approximation, commuting_sequence,
                       thickness_upper_bound)

__version__ = "0.1.0"
