"""Periodic grid fields on the flat n-torus and the volume bracket.

The torus is ``R^n / (period * Z)^n`` with the standard volume form, sampled
on a uniform grid of ``resolution`` nodes per axis.  Node ``(i_0, ..., i_{n-1})``
sits at ``x_k = i_k * period_k / resolution_k``; axis 0 is the slowest axis in
row-major storage and corresponds to the coordinate ``x``.
"""
from __future__ import annotations

import ast
import math
import re
from dataclasses import dataclass
from itertools import permutations
from pathlib import Path
from typing import Sequence

import numpy as np

# 4th-order centered stencil: f' ~ (2/3 (f[+1] - f[-1]) - 1/12 (f[+2] - f[-2])) / h
FD4_NEAR = 2.0 / 3.0
FD4_FAR = -1.0 / 12.0

VARIABLES = ("x", "y", "z")


class DomainError(ValueError):
    """Fields do not share a domain, or the domain itself is invalid."""


class ExpressionError(ValueError):
    """An analytic field descriptor could not be parsed or is not periodic."""


@dataclass(frozen=True)
class TorusDomain:
    n: int
    resolution: int
    period: tuple[float, ...] = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.n not in (2, 3):
            raise DomainError(f"dimension must be 2 or 3, got {self.n}")
        res = int(self.resolution)
        if res < 16 or res & (res - 1):
            raise DomainError(f"resolution must be a power of two >= 16, got {self.resolution}")
        object.__setattr__(self, "resolution", res)
        period = self.period
        if period is None:
            period = (1.0,) * self.n
        elif np.isscalar(period):
            period = (float(period),) * self.n
        period = tuple(float(p) for p in period)
        if len(period) != self.n or not all(p > 0 and math.isfinite(p) for p in period):
            raise DomainError(f"period must hold {self.n} positive reals, got {period}")
        object.__setattr__(self, "period", period)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.resolution,) * self.n

    @property
    def spacing(self) -> np.ndarray:
        return np.asarray(self.period) / self.resolution

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.period))

    def coordinates(self) -> list[np.ndarray]:
        """Open meshgrid of node coordinates, one broadcastable array per axis."""
        axes = [np.arange(self.resolution) * h for h in self.spacing]
        return np.meshgrid(*axes, indexing="ij", sparse=True)


@dataclass(frozen=True, eq=False)
class GridField:
    domain: TorusDomain
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.size != self.domain.resolution ** self.domain.n:
            raise DomainError(
                f"expected {self.domain.resolution ** self.domain.n} values, got {values.size}")
        values = values.reshape(self.domain.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __mul__(self, scalar: float) -> "GridField":
        return GridField(self.domain, self.values * float(scalar))

    __rmul__ = __mul__


@dataclass(frozen=True)
class BracketReport:
    c0_norm: float
    l1_norm: float
    epsilon: float

    @classmethod
    def from_bracket(cls, field: GridField) -> "BracketReport":
        l1 = l1_norm(field)
        return cls(c0_norm=c0_norm(field), l1_norm=l1, epsilon=l1 / 2)

    def to_dict(self) -> dict:
        return {"c0_norm": self.c0_norm, "l1_norm": self.l1_norm, "epsilon": self.epsilon}


# ---------------------------------------------------------------------------
# expression catalog

_ALLOWED_FUNCS = {"sin": np.sin, "cos": np.cos}


_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+)|([A-Za-z_]\w*)|(\*\*|[-+*/()]))")


def _normalize(expr: str) -> str:
    """Rewrite unicode operators and insert implicit multiplications."""
    s = expr.strip().replace("π", " pi ").replace("·", "*").replace("−", "-")
    s = s.replace("^", "**")
    tokens, pos = [], 0
    while pos < len(s):
        m = _TOKEN.match(s, pos)
        if not m or m.end() == pos:
            if s[pos:].strip() == "":
                break
            raise ExpressionError(f"unexpected character {s[pos:].strip()[0]!r} in {expr!r}")
        pos = m.end()
        num, name, op = m.groups()
        tok = num or name or op
        kind = "num" if num else "name" if name else op
        if tokens:
            prev_tok, prev_kind = tokens[-1]
            left = prev_kind in ("num", ")") or (prev_kind == "name" and prev_tok not in _ALLOWED_FUNCS)
            right = kind in ("num", "name", "(")
            if left and right:
                tokens.append(("*", "*"))
        tokens.append((tok, kind))
    return " ".join(t for t, _ in tokens)


class _Evaluator:
    """Evaluates a restricted arithmetic AST over numpy arrays."""

    def __init__(self, env: dict):
        self.env = env

    def __call__(self, node):
        method = getattr(self, "_" + type(node).__name__, None)
        if method is None:
            raise ExpressionError(f"unsupported syntax: {type(node).__name__}")
        return method(node)

    def _Expression(self, node):
        return self(node.body)

    def _Constant(self, node):
        if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
            raise ExpressionError(f"unsupported constant {node.value!r}")
        return float(node.value)

    def _Name(self, node):
        if node.id not in self.env:
            raise ExpressionError(f"unknown name {node.id!r}")
        return self.env[node.id]

    def _UnaryOp(self, node):
        val = self(node.operand)
        if isinstance(node.op, ast.USub):
            return -val
        if isinstance(node.op, ast.UAdd):
            return val
        raise ExpressionError("unsupported unary operator")

    def _BinOp(self, node):
        left, right = self(node.left), self(node.right)
        op = node.op
        if isinstance(op, ast.Add):
            return left + right
        if isinstance(op, ast.Sub):
            return left - right
        if isinstance(op, ast.Mult):
            return left * right
        if isinstance(op, ast.Div):
            return left / right
        if isinstance(op, ast.Pow):
            if not isinstance(right, float) or right != int(right) or right < 0:
                raise ExpressionError("only non-negative integer powers are allowed")
            return left ** int(right)
        raise ExpressionError("unsupported binary operator")

    def _Call(self, node):
        if not isinstance(node.func, ast.Name) or node.func.id not in _ALLOWED_FUNCS:
            raise ExpressionError("only sin(...) and cos(...) calls are allowed")
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"{node.func.id} takes exactly one argument")
        return _ALLOWED_FUNCS[node.func.id](self(node.args[0]))


def _uses_variable(node, names) -> bool:
    return any(isinstance(sub, ast.Name) and sub.id in names for sub in ast.walk(node))


def _check_periodic(tree: ast.AST, domain: TorusDomain) -> None:
    names = VARIABLES[:domain.n]
    for node in ast.walk(tree):
        if isinstance(node, ast.Name) and node.id in VARIABLES[domain.n:]:
            raise ExpressionError(f"variable {node.id!r} does not exist in dimension {domain.n}")

    def visit(node, inside_trig):
        if isinstance(node, ast.Call):
            arg = node.args[0] if node.args else None
            if arg is not None and _uses_variable(arg, names):
                _check_trig_argument(arg, domain)
            return
        if isinstance(node, ast.Name) and node.id in names and not inside_trig:
            raise ExpressionError(
                f"non-periodic expression: {node.id!r} appears outside sin/cos")
        for child in ast.iter_child_nodes(node):
            visit(child, inside_trig)

    visit(tree, False)


def _check_trig_argument(arg: ast.AST, domain: TorusDomain) -> None:
    names = VARIABLES[:domain.n]
    if any(isinstance(sub, ast.Call) for sub in ast.walk(arg)):
        raise ExpressionError("nested sin/cos calls are not in the catalog")

    def at(point):
        env = {"pi": math.pi, **{v: float(c) for v, c in zip(names, point)}}
        return float(_Evaluator(env)(arg))

    zero = np.zeros(domain.n)
    base = at(zero)
    coeffs = np.array([at(e) - base for e in np.eye(domain.n)])
    rng = np.random.default_rng(0)
    for _ in range(3):
        probe = rng.uniform(-2, 2, domain.n)
        if not math.isclose(at(probe), base + coeffs @ probe, rel_tol=1e-9, abs_tol=1e-9):
            raise ExpressionError("sin/cos arguments must be affine in the coordinates")
    cycles = coeffs * np.asarray(domain.period) / (2 * math.pi)
    if not np.allclose(cycles, np.round(cycles), atol=1e-9):
        raise ExpressionError(
            "non-periodic expression: frequencies must be integer multiples of 2*pi/period")


def sample_field(domain: TorusDomain, expr: str) -> GridField:
    """Sample an analytic descriptor on the grid of ``domain``.

    Accepted descriptors are ``"const <number>"``, ``"file:<path>"`` (an FGRID
    file on the same domain) and trigonometric polynomials in ``x, y, z`` such
    as ``"0.5*sin(2πx)·cos(4πy) + 1"``.  Coordinates may only appear inside
    ``sin``/``cos`` with frequencies compatible with the period.
    """
    text = expr.strip()
    if text.startswith("file:"):
        from .io import read_fgrid

        field = read_fgrid(Path(text[5:]))
        if field.domain != domain:
            raise DomainError(f"{text[5:]} is on {field.domain}, expected {domain}")
        return field
    match = re.fullmatch(r"const\s+(\S+)", text)
    if match:
        try:
            value = float(match.group(1).replace("−", "-"))
        except ValueError:
            raise ExpressionError(f"bad constant in {expr!r}") from None
        return GridField(domain, np.full(domain.shape, value))
    try:
        tree = ast.parse(_normalize(text), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {expr!r}: {exc.msg}") from None
    _check_periodic(tree, domain)
    env = {"pi": math.pi, **dict(zip(VARIABLES, domain.coordinates()))}
    values = _Evaluator(env)(tree)
    return GridField(domain, np.broadcast_to(values, domain.shape).copy())


# ---------------------------------------------------------------------------
# bracket and norms

def _require_shared_domain(fields: Sequence[GridField]) -> TorusDomain:
    if not fields:
        raise DomainError("no fields given")
    domain = fields[0].domain
    for f in fields[1:]:
        if f.domain != domain:
            raise DomainError(f"domain mismatch: {f.domain} vs {domain}")
    return domain


def partial_derivative(field: GridField, axis: int) -> np.ndarray:
    """4th-order centered periodic finite difference along ``axis``."""
    v = field.values
    # paired differences vanish exactly on constant stretches
    near = np.roll(v, -1, axis=axis) - np.roll(v, 1, axis=axis)
    far = np.roll(v, -2, axis=axis) - np.roll(v, 2, axis=axis)
    return (FD4_NEAR * near + FD4_FAR * far) / field.domain.spacing[axis]


def jacobian(fields: Sequence[GridField]) -> np.ndarray:
    """Array of shape ``(n, n, *grid)`` with ``J[i, j] = dF_i/dx_j``."""
    domain = _require_shared_domain(fields)
    return np.stack([np.stack([partial_derivative(f, j) for j in range(domain.n)])
                     for f in fields])


def _permutation_sign(perm) -> int:
    sign, seen = 1, list(perm)
    for i in range(len(seen)):
        while seen[i] != i:
            j = seen[i]
            seen[i], seen[j] = seen[j], seen[i]
            sign = -sign
    return sign


def jacobian_determinant(jac: np.ndarray) -> np.ndarray:
    """Leibniz determinant arranged so that swapping rows negates it bit-exactly.

    Each product is formed in column order, so a row swap only relabels which
    products carry a plus sign.  Positive and negative terms are then summed
    separately in sorted order, making both sums independent of row labels.
    """
    n = jac.shape[0]
    pos, neg = [], []
    for perm in permutations(range(n)):
        # perm[i] is the column used by row i; multiply in column order
        rows = np.argsort(perm)
        term = jac[rows[0], 0]
        for col in range(1, n):
            term = term * jac[rows[col], col]
        (pos if _permutation_sign(perm) > 0 else neg).append(term)
    pos = np.sort(np.stack(pos), axis=0)
    neg = np.sort(np.stack(neg), axis=0)
    return _ordered_sum(pos) - _ordered_sum(neg)


def _ordered_sum(terms: np.ndarray) -> np.ndarray:
    total = terms[0].copy()
    for t in terms[1:]:
        total += t
    return total


def bracket(fields: Sequence[GridField]) -> GridField:
    """The volume bracket ``{F_1, ..., F_n}``: pointwise ``det(dF_i/dx_j)``."""
    domain = _require_shared_domain(fields)
    if len(fields) != domain.n:
        raise DomainError(f"bracket needs exactly {domain.n} fields, got {len(fields)}")
    return GridField(domain, jacobian_determinant(jacobian(fields)))


def c0_norm(field: GridField) -> float:
    """Grid sup of ``|F|``; a lower bound for the true uniform norm."""
    return float(np.max(np.abs(field.values)))


def l1_norm(field: GridField) -> float:
    """Riemann sum of ``|F|`` against the volume form."""
    # np.sum reduces pairwise in a fixed order, so the result is reproducible
    return float(np.sum(np.abs(field.values)) * field.domain.cell_volume)


def bracket_report(fields: Sequence[GridField]) -> BracketReport:
    return BracketReport.from_bracket(bracket(fields))
