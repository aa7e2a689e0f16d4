"""Graded Lie algebras: the text format, built-in groups and exact validation.

A group spec is a line-oriented UTF-8 text::

    # the first Heisenberg group
    group heis1
    step 2
    layer 1: X Y
    layer 2: T
    bracket [X,Y] = T

Coefficients are rationals (``1/2*T - 3*Z``).  Brackets that are not declared
are zero and ``[b,a] = -[a,b]`` is filled in automatically.
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path

import numpy as np
import sympy

from .errors import (
    BadParameter,
    DuplicateBracket,
    GradingViolation,
    JacobiViolation,
    SpecSyntaxError,
    UnknownBuiltin,
    UnknownSymbol,
)

__all__ = [
    "GroupSpecSource",
    "GradedAlgebra",
    "Violation",
    "ValidationReport",
    "parse_group_spec",
    "load_group_spec",
    "serialize",
    "builtin",
    "validate_algebra",
]


@dataclass(frozen=True)
class GroupSpecSource:
    text: str
    origin: str = "<inline>"

    def __post_init__(self):
        if not self.text.strip():
            raise SpecSyntaxError(0, f"empty group spec ({self.origin})")


@dataclass(frozen=True, eq=False)
class GradedAlgebra:
    """A graded nilpotent Lie algebra in a homogeneous basis.

    ``constants`` maps ``(i, j, k)`` to the exact coefficient of ``e_k`` in
    ``[e_i, e_j]``; absent keys are zero.  Indices are 0-based and the basis
    is ordered layer by layer.
    """

    name: str
    names: tuple
    layer_of: tuple
    constants: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def step(self) -> int:
        return max(self.layer_of) if self.layer_of else 0

    @cached_property
    def layer_dims(self) -> tuple:
        return tuple(self.layer_of.count(i) for i in range(1, self.step + 1))

    def layer_indices(self, layer: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.layer_of) == layer)

    @cached_property
    def weights(self) -> np.ndarray:
        """Dilation exponent of each coordinate."""
        return np.asarray(self.layer_of, dtype=float)

    @cached_property
    def tensor(self) -> np.ndarray:
        c = np.zeros((self.dim,) * 3)
        for (i, j, k), v in self.constants.items():
            c[i, j, k] = float(v)
        c.setflags(write=False)
        return c

    @cached_property
    def _pairs(self):
        # bracket as a sum over i<j pairs: [a,a] is then exactly zero in floats
        pairs = [(i, j) for i, j in itertools.combinations(range(self.dim), 2)
                 if np.any(self.tensor[i, j])]
        if not pairs:
            return np.zeros(0, int), np.zeros(0, int), np.zeros((0, self.dim))
        ii, jj = map(np.asarray, zip(*pairs))
        return ii, jj, self.tensor[ii, jj, :]

    def bracket(self, a, b) -> np.ndarray:
        """Lie bracket of coordinate vectors; broadcasts over leading axes."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        ii, jj, cp = self._pairs
        if len(ii) == 0:
            return np.zeros(np.broadcast_shapes(a.shape, b.shape))
        m = a[..., ii] * b[..., jj] - a[..., jj] * b[..., ii]
        return m @ cp

    @property
    def is_abelian(self) -> bool:
        return not any(v != 0 for v in self.constants.values())

    @cached_property
    def stratified(self) -> bool:
        """True when layer 1 bracket-generates every higher layer."""
        for j in range(1, self.step):
            if self.layer_dims[j] == 0:
                return False
            rows = []
            for a in self.layer_indices(1):
                for b in self.layer_indices(j):
                    rows.append([self.constants.get((a, b, k), Fraction(0))
                                 for k in self.layer_indices(j + 1)])
            if not rows or sympy.Matrix(rows).rank() < self.layer_dims[j]:
                return False
        return self.step >= 1

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownSymbol(name) from None

    def same_as(self, other: "GradedAlgebra") -> bool:
        """Structural equality of the algebra data (the name is ignored)."""
        strip = lambda d: {k: v for k, v in d.items() if v != 0}
        return (self.names == other.names and self.layer_of == other.layer_of
                and strip(self.constants) == strip(other.constants))

    def __repr__(self):
        return f"GradedAlgebra({self.name!r}, layers={self.layer_dims})"


@dataclass(frozen=True)
class Violation:
    kind: str  # antisymmetry | grading | jacobi | stratification
    witness: tuple
    message: str = ""


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def kinds(self) -> set:
        return {v.kind for v in self.violations}

    def __str__(self):
        if self.ok:
            return "ok"
        return "\n".join(f"{v.kind} {v.witness}: {v.message}" for v in self.violations)


# --------------------------------------------------------------------------
# parsing

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_RE_GROUP = re.compile(rf"^group\s+({_IDENT})$")
_RE_STEP = re.compile(r"^step\s+(\d+)$")
_RE_LAYER = re.compile(r"^layer\s+(\d+)\s*:\s*(.*)$")
_RE_BRACKET = re.compile(rf"^bracket\s*\[\s*({_IDENT})\s*,\s*({_IDENT})\s*\]\s*=\s*(.+)$")
_RE_TERM = re.compile(
    rf"\s*([+-])?\s*(?:(\d+(?:/\d+)?)\s*\*?\s*)?({_IDENT})?\s*")


def _parse_combination(expr: str, lineno: int) -> list:
    """Split ``1/2*T - Z`` into [(Fraction, name)]."""
    expr = expr.strip()
    if expr == "0":
        return []
    terms, pos = [], 0
    while pos < len(expr):
        m = _RE_TERM.match(expr, pos)
        sign, coef, name = m.groups()
        if m.end() == pos or name is None or (pos > 0 and sign is None):
            raise SpecSyntaxError(lineno, f"cannot parse linear combination {expr!r}")
        value = Fraction(coef) if coef else Fraction(1)
        if value.denominator == 0:
            raise SpecSyntaxError(lineno, "zero denominator")
        terms.append((-value if sign == "-" else value, name))
        pos = m.end()
    return terms


def parse_group_spec(src) -> GradedAlgebra:
    """Parse and validate a group spec (``GroupSpecSource`` or plain text)."""
    if isinstance(src, str):
        src = GroupSpecSource(src)
    name, step = None, None
    layers: dict = {}
    raw_brackets = []
    for lineno, line in enumerate(src.text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if m := _RE_GROUP.match(line):
            if name is not None:
                raise SpecSyntaxError(lineno, "group declared twice")
            name = m.group(1)
        elif m := _RE_STEP.match(line):
            if step is not None:
                raise SpecSyntaxError(lineno, "step declared twice")
            step = int(m.group(1))
            if step < 1:
                raise SpecSyntaxError(lineno, "step must be >= 1")
        elif m := _RE_LAYER.match(line):
            i = int(m.group(1))
            names = m.group(2).split()
            if i in layers:
                raise SpecSyntaxError(lineno, f"layer {i} declared twice")
            if not names or not all(re.fullmatch(_IDENT, n) for n in names):
                raise SpecSyntaxError(lineno, f"bad generator list for layer {i}")
            layers[i] = (names, lineno)
        elif m := _RE_BRACKET.match(line):
            a, b, expr = m.groups()
            raw_brackets.append((a, b, _parse_combination(expr, lineno), lineno))
        else:
            raise SpecSyntaxError(lineno, f"unrecognised declaration {line!r}")

    if step is None:
        step = max(layers, default=0)
    if step < 1 or sorted(layers) != list(range(1, step + 1)):
        raise SpecSyntaxError(0, f"layers must be exactly 1..{step}, got {sorted(layers)}")

    names, layer_of = [], []
    for i in range(1, step + 1):
        for n in layers[i][0]:
            if n in names:
                raise SpecSyntaxError(layers[i][1], f"generator {n!r} declared twice")
            names.append(n)
            layer_of.append(i)

    def idx(n, lineno):
        if n not in names:
            raise UnknownSymbol(n, lineno)
        return names.index(n)

    constants, seen = {}, {}
    for a, b, terms, lineno in raw_brackets:
        i, j = idx(a, lineno), idx(b, lineno)
        if i == j:
            if terms:
                raise SpecSyntaxError(lineno, f"[{a},{a}] must vanish")
            continue
        key = (min(i, j), max(i, j))
        if key in seen:
            raise DuplicateBracket(a, b, lineno)
        seen[key] = lineno
        for coef, n in terms:
            k = idx(n, lineno)
            if layer_of[k] != layer_of[i] + layer_of[j]:
                raise GradingViolation(i, j, k, lineno)
            constants[(i, j, k)] = constants.get((i, j, k), Fraction(0)) + coef
            constants[(j, i, k)] = -constants[(i, j, k)]
    constants = {k: v for k, v in constants.items() if v != 0}

    alg = GradedAlgebra(name or "anonymous", tuple(names), tuple(layer_of), constants)
    for v in _jacobi_defects(alg):
        raise JacobiViolation(*v)
    return alg


def load_group_spec(path) -> GradedAlgebra:
    path = Path(path)
    return parse_group_spec(GroupSpecSource(path.read_text(encoding="utf-8"), str(path)))


def _fmt(c: Fraction) -> str:
    return str(c.numerator) if c.denominator == 1 else f"{c.numerator}/{c.denominator}"


def serialize(alg: GradedAlgebra) -> str:
    lines = [f"group {alg.name}", f"step {alg.step}"]
    for i in range(1, alg.step + 1):
        lines.append(f"layer {i}: " + " ".join(alg.names[k] for k in alg.layer_indices(i)))
    for i, j in itertools.combinations(range(alg.dim), 2):
        terms = [(alg.constants[(i, j, k)], k) for k in range(alg.dim)
                 if alg.constants.get((i, j, k), 0) != 0]
        if not terms:
            continue
        rhs = " + ".join(f"{_fmt(c)}*{alg.names[k]}" for c, k in terms).replace("+ -", "- ")
        lines.append(f"bracket [{alg.names[i]},{alg.names[j]}] = {rhs}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# validation

def _bracket_exact(alg, a: dict, b: dict) -> dict:
    out: dict = {}
    for i, x in a.items():
        for j, y in b.items():
            for k in range(alg.dim):
                c = alg.constants.get((i, j, k))
                if c:
                    out[k] = out.get(k, Fraction(0)) + x * y * c
    return {k: v for k, v in out.items() if v != 0}


def _jacobi_defects(alg):
    n = alg.dim
    for i, j, k in itertools.combinations(range(n), 3):
        total: dict = {}
        for a, b, c in ((i, j, k), (j, k, i), (k, i, j)):
            inner = _bracket_exact(alg, {b: Fraction(1)}, {c: Fraction(1)})
            for key, v in _bracket_exact(alg, {a: Fraction(1)}, inner).items():
                total[key] = total.get(key, Fraction(0)) + v
        if any(v != 0 for v in total.values()):
            yield (i, j, k)


def validate_algebra(alg: GradedAlgebra) -> ValidationReport:
    """List every violated invariant with witness indices (exact arithmetic)."""
    report = ValidationReport()
    c = alg.constants
    for (i, j, k), v in sorted(c.items()):
        if i <= j and c.get((j, i, k), Fraction(0)) != -v:
            report.violations.append(Violation(
                "antisymmetry", (i, j, k), f"c[{i}][{j}][{k}] != -c[{j}][{i}][{k}]"))
        elif i > j and (j, i, k) not in c:
            report.violations.append(Violation(
                "antisymmetry", (j, i, k), f"c[{j}][{i}][{k}] missing for c[{i}][{j}][{k}]"))
    for (i, j, k), v in sorted(c.items()):
        if v != 0 and alg.layer_of[k] != alg.layer_of[i] + alg.layer_of[j]:
            report.violations.append(Violation(
                "grading", (i, j, k), "bracket leaves layer(i)+layer(j)"))
    for w in _jacobi_defects(alg):
        report.violations.append(Violation("jacobi", w, "cyclic sum is nonzero"))
    return report


# --------------------------------------------------------------------------
# built-in groups

def _heis_spec(n: int) -> str:
    # heis(1) uses the plain names X, Y, T
    xs = ["X"] if n == 1 else [f"X{i}" for i in range(1, n + 1)]
    ys = ["Y"] if n == 1 else [f"Y{i}" for i in range(1, n + 1)]
    lines = [f"group heis{n}", "step 2", "layer 1: " + " ".join(xs + ys), "layer 2: T"]
    lines += [f"bracket [{x},{y}] = T" for x, y in zip(xs, ys)]
    return "\n".join(lines)


_ENGEL = """\
group engel
step 3
layer 1: X1 X2
layer 2: X3
layer 3: X4
bracket [X1,X2] = X3
bracket [X1,X3] = X4
"""


def builtin(name: str, params=()) -> GradedAlgebra:
    """``heis`` [n], ``abelian`` [n] or ``engel`` []."""
    params = list(params)
    if name == "heis":
        if len(params) != 1 or int(params[0]) < 1:
            raise BadParameter("heis requires a single parameter n >= 1")
        return parse_group_spec(GroupSpecSource(_heis_spec(int(params[0])), f"builtin:heis:{params[0]}"))
    if name == "abelian":
        if len(params) != 1 or int(params[0]) < 1:
            raise BadParameter("abelian requires a single parameter n >= 1")
        n = int(params[0])
        names = tuple(f"e{i}" for i in range(1, n + 1))
        return GradedAlgebra(f"abelian{n}", names, (1,) * n, {})
    if name == "engel":
        if params:
            raise BadParameter("engel takes no parameters")
        return parse_group_spec(GroupSpecSource(_ENGEL, "builtin:engel"))
    raise UnknownBuiltin(name)


def builtin_from_tag(tag: str) -> GradedAlgebra:
    """Parse tags such as ``heis:2``, ``abelian:3`` or ``engel``."""
    name, _, rest = tag.partition(":")
    params = [int(p) for p in rest.split(",") if p] if rest else []
    return builtin(name, params)
