"""Group arithmetic in exponential coordinates.

All functions take the algebra first and broadcast over leading axes, so a
batch of points is an ``(N, n)`` array.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .dsl import GradedAlgebra
from .errors import AlgebraMismatch, UnsupportedStep

__all__ = [
    "Point",
    "Dilation",
    "coords",
    "multiply",
    "multiply_exact",
    "inverse",
    "dilate",
    "hom_dimension",
    "conjugate",
    "bch_majorant",
]

MAX_STEP = 4


def coords(alg: GradedAlgebra, p) -> np.ndarray:
    """Validate the trailing dimension and return a float array."""
    if isinstance(p, Point):
        if p.algebra is not alg and not p.algebra.same_as(alg):
            raise AlgebraMismatch("point belongs to a different algebra")
        p = p.coords
    p = np.asarray(p, dtype=float)
    if p.shape[-1:] != (alg.dim,):
        raise AlgebraMismatch(f"expected trailing dimension {alg.dim}, got shape {p.shape}")
    return p


def _check_step(alg):
    if alg.step > MAX_STEP:
        raise UnsupportedStep(f"BCH product is implemented up to step {MAX_STEP}, got {alg.step}")


def multiply(alg: GradedAlgebra, p, q) -> np.ndarray:
    """BCH product ``p*q``; exact for nilpotent algebras of step <= 4."""
    _check_step(alg)
    p, q = coords(alg, p), coords(alg, q)
    z = p + q
    if alg.step >= 2 and not alg.is_abelian:
        br = alg.bracket
        pq = br(p, q)
        z = z + 0.5 * pq
        if alg.step >= 3:
            # [q,[q,p]] = -[q,[p,q]]
            z = z + (br(p, pq) - br(q, pq)) / 12.0
        if alg.step >= 4:
            z = z - br(q, br(p, pq)) / 24.0
    return z


def _bracket_fr(alg, a, b):
    out = [Fraction(0)] * alg.dim
    for (i, j, k), c in alg.constants.items():
        if a[i] and b[j]:
            out[k] += c * a[i] * b[j]
    return out


def multiply_exact(alg: GradedAlgebra, p, q) -> list:
    """BCH product in rational arithmetic (for oracles in tests)."""
    _check_step(alg)
    p = [Fraction(x) for x in p]
    q = [Fraction(x) for x in q]
    add = lambda *vs: [sum(c) for c in zip(*vs)]
    scale = lambda s, v: [s * x for x in v]
    pq = _bracket_fr(alg, p, q)
    z = add(p, q, scale(Fraction(1, 2), pq))
    if alg.step >= 3:
        z = add(z, scale(Fraction(1, 12), add(_bracket_fr(alg, p, pq),
                                              scale(-1, _bracket_fr(alg, q, pq)))))
    if alg.step >= 4:
        z = add(z, scale(Fraction(-1, 24), _bracket_fr(alg, q, _bracket_fr(alg, p, pq))))
    return z


def inverse(alg: GradedAlgebra, p) -> np.ndarray:
    return -coords(alg, p)


def dilate(alg: GradedAlgebra, lam, p) -> np.ndarray:
    """``delta_lam(p)``; ``lam`` may be an array broadcasting against ``p[..., 0]``."""
    lam = lam.lam if isinstance(lam, Dilation) else np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("dilation factor must be positive")
    p = coords(alg, p)
    return p * np.power(np.expand_dims(lam, -1), alg.weights)


def hom_dimension(alg: GradedAlgebra) -> int:
    return int(sum(alg.layer_of))


def conjugate(alg: GradedAlgebra, q, p) -> np.ndarray:
    """``q^{-1} p q``."""
    return multiply(alg, inverse(alg, q), multiply(alg, p, q))


def bch_majorant(alg: GradedAlgebra, a, b) -> np.ndarray:
    """Coordinate-wise upper bound of ``|p*q|`` given ``|p| <= a`` and ``|q| <= b``.

    Each BCH term is replaced by the same polynomial with absolute-valued
    structure constants, which bounds it.
    """
    _check_step(alg)
    c = np.abs(alg.tensor)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    br = lambda x, y: np.einsum("...i,...j,ijk->...k", x, y, c)
    ab = br(a, b)
    z = a + b + 0.5 * ab
    if alg.step >= 3:
        z = z + (br(a, ab) + br(b, ab)) / 12.0
    if alg.step >= 4:
        z = z + br(b, br(a, ab)) / 24.0
    return z


@dataclass(frozen=True)
class Dilation:
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("dilation factor must be positive")

    def __call__(self, alg, p):
        return dilate(alg, self.lam, p)

    def __mul__(self, other: "Dilation") -> "Dilation":
        return Dilation(self.lam * other.lam)


@dataclass(frozen=True, eq=False)
class Point:
    """A group element bound to its algebra; supports ``p * q`` and ``~p``."""

    algebra: GradedAlgebra
    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.shape != (self.algebra.dim,):
            raise AlgebraMismatch(f"expected {self.algebra.dim} coordinates, got {c.shape}")
        object.__setattr__(self, "coords", c)

    def _other(self, q):
        if isinstance(q, Point) and q.algebra is not self.algebra and not q.algebra.same_as(self.algebra):
            raise AlgebraMismatch("points belong to different algebras")
        return q

    def __mul__(self, q):
        return Point(self.algebra, multiply(self.algebra, self.coords, self._other(q)))

    def __invert__(self):
        return Point(self.algebra, -self.coords)

    def __eq__(self, q):
        return isinstance(q, Point) and self.algebra.same_as(q.algebra) and np.array_equal(self.coords, q.coords)

    def __repr__(self):
        return f"Point({self.coords.tolist()})"
