"""Homogeneous subgroups, homogeneous morphisms and splittings ``G = W·V``."""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import null_space, orth
from scipy.optimize import least_squares

from .algebra import coords, dilate, multiply
from .dsl import GradedAlgebra
from .errors import (
    BracketViolation,
    LayerViolation,
    NotBracketClosed,
    NotComplementary,
    NotFound,
    NotNormal,
)

__all__ = [
    "HomSubgroup",
    "HomMorphism",
    "Splitting",
    "make_subgroup",
    "coordinate_subgroup",
    "whole_group",
    "trivial_subgroup",
    "is_normal",
    "hom_morphism",
    "kernel",
    "make_splitting",
    "find_horizontal_complement",
    "is_split_regular",
]

TOL = 1e-9


def _layer_block(alg, vecs, layer):
    """Check that ``vecs`` (rows) live in ``layer`` and return an orthonormal basis (columns)."""
    vecs = np.atleast_2d(np.asarray(vecs, dtype=float))
    if vecs.size == 0:
        return np.zeros((alg.dim, 0))
    if vecs.shape[1] != alg.dim:
        raise LayerViolation(f"basis vectors must have length {alg.dim}")
    off = np.ones(alg.dim, bool)
    off[alg.layer_indices(layer)] = False
    if np.any(np.abs(vecs[:, off]) > TOL * max(1.0, np.abs(vecs).max())):
        raise LayerViolation(f"a basis vector declared in layer {layer} leaves that layer")
    vecs = vecs.copy()
    vecs[:, off] = 0.0
    q = orth(vecs.T, rcond=1e-10)
    if q.shape[1] < len(vecs):
        raise ValueError(f"layer {layer} basis is linearly dependent")
    return q


@dataclass(frozen=True, eq=False)
class HomSubgroup:
    """A homogeneous subgroup stored by an orthonormal basis, grouped by layer.

    ``basis`` is ``n x dim`` with each column inside a single layer;
    ``col_layer`` records that layer.  Lebesgue measure on the subgroup is
    taken in these orthonormal coordinates.
    """

    algebra: GradedAlgebra
    basis: np.ndarray
    col_layer: tuple

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def d(self) -> int:
        """Homogeneous dimension."""
        return int(sum(self.col_layer))

    @cached_property
    def weights(self) -> np.ndarray:
        return np.asarray(self.col_layer, dtype=float)

    def layer_basis(self, layer: int) -> np.ndarray:
        return self.basis[:, np.asarray(self.col_layer, dtype=int) == layer]

    @cached_property
    def layer_dims(self) -> tuple:
        return tuple(self.col_layer.count(i) for i in range(1, self.algebra.step + 1))

    @cached_property
    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def to_coords(self, p) -> np.ndarray:
        """Orthonormal coordinates of points of the subgroup."""
        return coords(self.algebra, p) @ self.basis

    def from_coords(self, a) -> np.ndarray:
        return np.asarray(a, dtype=float) @ self.basis.T

    def residual(self, p) -> np.ndarray:
        """Euclidean distance of points to the subgroup's Lie algebra."""
        p = coords(self.algebra, p)
        return np.linalg.norm(p - p @ self.projector, axis=-1)

    def contains(self, p, tol=1e-9) -> np.ndarray:
        p = coords(self.algebra, p)
        return self.residual(p) <= tol * np.maximum(1.0, np.linalg.norm(p, axis=-1))

    def key(self, decimals: int = 6) -> str:
        """Canonical hash of the subgroup (independent of the chosen basis)."""
        proj = np.round(self.projector, decimals) + 0.0
        h = hashlib.sha256(proj.tobytes())
        h.update(repr((self.algebra.names, self.algebra.layer_of)).encode())
        return h.hexdigest()[:16]

    @cached_property
    def orth_complement(self) -> np.ndarray:
        """Orthonormal basis of the orthogonal complement of the Lie algebra."""
        return null_space(self.basis.T) if self.dim else np.eye(self.algebra.dim)

    def __repr__(self):
        return f"HomSubgroup(dim={self.dim}, d={self.d}, layers={self.layer_dims})"


def make_subgroup(alg: GradedAlgebra, layer_bases) -> HomSubgroup:
    """Build a subgroup from per-layer spanning vectors.

    ``layer_bases`` is either a sequence indexed by layer-1 or a mapping
    ``{layer: vectors}``; each vector is an ambient coordinate vector.
    """
    items = layer_bases.items() if isinstance(layer_bases, dict) else enumerate(layer_bases, start=1)
    blocks, layers = [], []
    for layer, vecs in sorted(items):
        if not 1 <= layer <= alg.step:
            raise LayerViolation(f"layer {layer} out of range")
        q = _layer_block(alg, vecs, layer)
        blocks.append(q)
        layers += [layer] * q.shape[1]
    basis = np.hstack(blocks) if blocks else np.zeros((alg.dim, 0))
    P = HomSubgroup(alg, basis, tuple(layers))
    _check_closed(P)
    return P


def _check_closed(P: HomSubgroup):
    B = P.basis
    for a, b in itertools.combinations(range(P.dim), 2):
        v = P.algebra.bracket(B[:, a], B[:, b])
        if np.linalg.norm(v - P.projector @ v) > TOL:
            raise NotBracketClosed((a, b))


def coordinate_subgroup(alg: GradedAlgebra, names) -> HomSubgroup:
    """Subgroup spanned by named basis vectors, e.g. ``["Y", "T"]``."""
    idx = [alg.index(n) for n in names]
    by_layer: dict = {}
    for i in idx:
        by_layer.setdefault(alg.layer_of[i], []).append(np.eye(alg.dim)[i])
    return make_subgroup(alg, by_layer)


def whole_group(alg: GradedAlgebra) -> HomSubgroup:
    return make_subgroup(alg, {i: np.eye(alg.dim)[alg.layer_indices(i)] for i in range(1, alg.step + 1)})


def trivial_subgroup(alg: GradedAlgebra) -> HomSubgroup:
    return make_subgroup(alg, {})


def subgroup_from_vectors(alg: GradedAlgebra, vectors) -> HomSubgroup:
    """Split homogeneous vectors by layer and build the subgroup they span."""
    by_layer: dict = {}
    for v in np.atleast_2d(vectors):
        layers = {alg.layer_of[i] for i in np.flatnonzero(np.abs(v) > TOL)}
        if len(layers) != 1:
            raise LayerViolation("vector is not homogeneous")
        by_layer.setdefault(layers.pop(), []).append(v)
    return make_subgroup(alg, by_layer)


def is_normal(P: HomSubgroup) -> bool:
    """``[g, P] ⊆ P`` checked on basis pairs."""
    alg = P.algebra
    E = np.eye(alg.dim)
    for i in range(alg.dim):
        v = alg.bracket(E[i][None, :], P.basis.T)
        if np.any(np.linalg.norm(v - v @ P.projector, axis=-1) > TOL):
            return False
    return True


# --------------------------------------------------------------------------
# morphisms

@dataclass(frozen=True, eq=False)
class HomMorphism:
    """A homogeneous group morphism, linear in exponential coordinates."""

    matrix: np.ndarray
    source: GradedAlgebra
    target: GradedAlgebra

    def __call__(self, p) -> np.ndarray:
        return coords(self.source, p) @ self.matrix.T

    def restrict(self, P: HomSubgroup) -> np.ndarray:
        """Matrix of the morphism in the orthonormal coordinates of ``P``."""
        return self.matrix @ P.basis

    def layer_matrix(self, layer: int = 1) -> np.ndarray:
        return self.matrix[np.ix_(self.target.layer_indices(layer), self.source.layer_indices(layer))]

    def rank_on(self, P: HomSubgroup | None = None) -> int:
        M = self.matrix if P is None else self.restrict(P)
        if M.size == 0:
            return 0
        return int(np.linalg.matrix_rank(M, tol=1e-10 * max(1.0, np.abs(M).max())))

    def is_surjective_on(self, P: HomSubgroup | None = None) -> bool:
        return self.rank_on(P) == self.target.dim

    def compose(self, other: "HomMorphism") -> "HomMorphism":
        """``self ∘ other``."""
        return HomMorphism(self.matrix @ other.matrix, other.source, self.target)


def hom_morphism(matrix, source: GradedAlgebra, target: GradedAlgebra, atol: float = 1e-9) -> HomMorphism:
    M = np.atleast_2d(np.asarray(matrix, dtype=float))
    if M.shape != (target.dim, source.dim):
        raise LayerViolation(f"matrix must be {target.dim}x{source.dim}, got {M.shape}")
    scale = max(1.0, np.abs(M).max())
    tl = np.asarray(target.layer_of)[:, None]
    sl = np.asarray(source.layer_of)[None, :]
    bad = np.argwhere((tl != sl) & (np.abs(M) > atol * scale))
    if len(bad):
        k, i = bad[0]
        raise LayerViolation(f"basis vector {i} (layer {source.layer_of[i]}) is sent to "
                             f"layer {target.layer_of[k]}")
    E = np.eye(source.dim)
    for i, j in itertools.combinations(range(source.dim), 2):
        lhs = M @ source.bracket(E[i], E[j])
        rhs = target.bracket(M[:, i], M[:, j])
        if np.linalg.norm(lhs - rhs) > atol * scale ** 2 * 10:
            raise BracketViolation(f"L[e{i},e{j}] != [L e{i}, L e{j}]")
    return HomMorphism(M, source, target)


def kernel(L: HomMorphism) -> HomSubgroup:
    alg = L.source
    by_layer = {}
    for layer in range(1, alg.step + 1):
        idx = alg.layer_indices(layer)
        block = L.matrix[:, idx]
        ns = null_space(block, rcond=1e-10) if block.size else np.eye(len(idx))
        vecs = np.zeros((ns.shape[1], alg.dim))
        vecs[:, idx] = ns.T
        by_layer[layer] = vecs
    return make_subgroup(alg, by_layer)


def restricted_kernel(P: HomSubgroup, L: HomMorphism) -> HomSubgroup:
    """``P ∩ ker L`` as a homogeneous subgroup."""
    alg = P.algebra
    by_layer = {}
    for layer in range(1, alg.step + 1):
        B = P.layer_basis(layer)
        if B.shape[1] == 0:
            continue
        ns = null_space(L.matrix @ B, rcond=1e-10)
        by_layer[layer] = (B @ ns).T
    return make_subgroup(alg, by_layer)


# --------------------------------------------------------------------------
# splittings

@dataclass(frozen=True, eq=False)
class Splitting:
    """``G = W·V`` with ``W`` normal; ``piV_matrix`` projects onto Lie(V) along Lie(W)."""

    W: HomSubgroup
    V: HomSubgroup
    piV_matrix: np.ndarray

    @property
    def algebra(self):
        return self.W.algebra

    def pi_V(self, p) -> np.ndarray:
        return coords(self.algebra, p) @ self.piV_matrix.T

    def pi_W(self, p) -> np.ndarray:
        p = coords(self.algebra, p)
        return multiply(self.algebra, p, -self.pi_V(p))

    @cached_property
    def piW_linear(self) -> np.ndarray:
        """Linear projection onto Lie(W) along Lie(V) (the differential of pi_W at 0)."""
        return np.eye(self.algebra.dim) - self.piV_matrix

    def graph_jacobian(self, P: HomSubgroup) -> float:
        """Jacobian of ``pi_W|_P`` from Lebesgue on ``P`` to Lebesgue on ``W``.

        It is constant because ``pi_W|_P`` pushes Haar measure to Haar measure;
        its value at the identity is a determinant of linear maps.
        """
        if P.dim != self.W.dim:
            return 0.0
        return float(abs(np.linalg.det(self.W.basis.T @ self.piW_linear @ P.basis)))


def make_splitting(W: HomSubgroup, V: HomSubgroup, checks: int = 256, seed: int = 0) -> Splitting:
    alg = W.algebra
    if not is_normal(W):
        raise NotNormal("W must be a normal subgroup")
    if W.dim + V.dim != alg.dim:
        raise NotComplementary(f"dimensions {W.dim} + {V.dim} != {alg.dim}")
    M = np.hstack([W.basis, V.basis])
    if np.linalg.matrix_rank(M, tol=1e-10) < alg.dim:
        raise NotComplementary("W and V intersect nontrivially")
    coef = np.linalg.inv(M)
    piV = V.basis @ coef[W.dim:, :]
    S = Splitting(W, V, piV)
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(checks, alg.dim))
    back = multiply(alg, S.pi_W(p), S.pi_V(p))
    if np.max(np.abs(back - p)) > 1e-8 * max(1.0, np.abs(p).max()) ** alg.step:
        raise NotComplementary("pi_W(p)·pi_V(p) != p on sampled points")
    if np.max(W.residual(S.pi_W(p))) > 1e-8 * max(1.0, np.abs(p).max()) ** alg.step:
        raise NotComplementary("pi_W does not land in W")
    return S


def _complement_ok(K: HomSubgroup, vecs) -> bool:
    alg = K.algebra
    M = np.hstack([K.basis, vecs.T])
    if np.linalg.matrix_rank(M, tol=1e-8) < alg.dim:
        return False
    for a, b in itertools.combinations(range(len(vecs)), 2):
        if np.linalg.norm(alg.bracket(vecs[a], vecs[b])) > 1e-9:
            return False
    return True


def find_horizontal_complement(K: HomSubgroup, m: int | None = None, seed: int = 0,
                               starts: int = 64) -> HomSubgroup:
    """Search for an abelian ``V ⊆ V_1`` complementary to the normal subgroup ``K``.

    Raises ``NotFound`` when the budget is exhausted; this never proves that
    no complement exists.
    """
    alg = K.algebra
    if m is None:
        m = alg.dim - K.dim
    if K.dim + m != alg.dim:
        raise NotFound(f"a complement of a {K.dim}-dim subgroup must have dimension {alg.dim - K.dim}")
    if any(K.layer_dims[j] != alg.layer_dims[j] for j in range(1, alg.step)):
        raise NotFound("K does not contain every layer above the first; no horizontal complement")
    if m == 0:
        return trivial_subgroup(alg)
    if alg.name.startswith("heis"):
        from .heisenberg import horizontal_complement_heis
        try:
            return horizontal_complement_heis(K)
        except Exception:
            pass
    h = alg.layer_indices(1)
    E = np.eye(alg.dim)
    for combo in itertools.islice(itertools.combinations(h, m), 5000):
        vecs = E[list(combo)]
        if _complement_ok(K, vecs):
            return make_subgroup(alg, {1: vecs})

    # randomized starts repaired by least squares on the bracket defect
    rng = np.random.default_rng(seed)
    n1 = len(h)
    pairs = list(itertools.combinations(range(m), 2))

    def frame(x):
        F = np.zeros((m, alg.dim))
        F[:, h] = x.reshape(m, n1)
        return F

    def defect(x):
        F = frame(x)
        out = [alg.bracket(F[a], F[b]) for a, b in pairs]
        gram = F[:, h] @ F[:, h].T - np.eye(m)
        return np.concatenate(out + [gram.ravel()]) if out else gram.ravel()

    for _ in range(starts):
        x0 = rng.normal(size=m * n1)
        res = least_squares(defect, x0, xtol=1e-14, ftol=1e-14, gtol=1e-14)
        vecs = frame(res.x)
        if _complement_ok(K, vecs):
            return make_subgroup(alg, {1: vecs})
    raise NotFound("no abelian horizontal complement found within budget (not a proof of nonexistence)")


def is_split_regular(f, p, budget=None, seed: int = 0):
    """Return ``(True, splitting)`` when the Pansu differential of ``f`` at ``p``
    is surjective and its kernel has a horizontal complement, else ``(False, None)``."""
    from .graphs import pansu_differential

    D = pansu_differential(f, p)
    if not D.is_surjective_on():
        return False, None
    K = kernel(D)
    try:
        V = find_horizontal_complement(K, seed=seed)
    except NotFound:
        return False, None
    return True, make_splitting(K, V)


def homogeneity_defect(S: Splitting, p, lam: float) -> float:
    """``max |pi_W(δ_λ p) - δ_λ pi_W(p)|`` (used in tests)."""
    alg = S.algebra
    return float(np.max(np.abs(S.pi_W(dilate(alg, lam, p)) - dilate(alg, lam, S.pi_W(p)))))
