"""Closed forms on the Heisenberg groups ``heis(n)``.

Coordinates are ``(x_1..x_n, y_1..y_n, t)`` with ``[X_j, Y_j] = T``.  A
vertical subgroup contains the centre, so it is ``P_1 × span{T}`` for a
subspace ``P_1`` of the first layer; its codimension is ``k``.

``c(n, k)`` is the largest Lebesgue measure (in orthonormal coordinates)
of ``E ∩ P`` over closed balls ``E`` of diameter one, for a vertical ``P``
of codimension ``k``; the spherical measure on ``P`` is ``Leb_P / c(n, k)``.
For rotationally invariant distances it does not depend on ``P``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.linalg import null_space, orth
from scipy.stats import norm as _normal, ortho_group, t as _student

from .dsl import GradedAlgebra
from .errors import (
    CodimTooLarge,
    HypothesisViolated,
    NotRotationallyInvariant,
    NotVertical,
    RepresentativeDisagreement,
    ShapeMismatch,
)
from .metric import Budget, HaarMeasure, HomDistance, SphericalNormalizer, euclidean_beta, heisenberg_rank, \
    spherical_normalization
from .qmc import MeasureEstimate, replicate_seeds
from .subgroups import HomMorphism, HomSubgroup, make_subgroup, trivial_subgroup

__all__ = [
    "HeisConstant",
    "VerticalNormalizer",
    "group_law",
    "vertical_subgroup",
    "is_vertical",
    "vertical_codim",
    "horizontal_complement_heis",
    "is_rotationally_invariant",
    "koranyi_theta_closed",
    "c_constant",
    "jru",
    "heis_coarea_factor",
]


def group_law(n: int, p, q) -> np.ndarray:
    """``(z, t)(z', t') = (z + z', t + t' + ½ Σ (x_j y'_j - x'_j y_j))``."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    x, y, t = p[..., :n], p[..., n:2 * n], p[..., 2 * n]
    x2, y2, t2 = q[..., :n], q[..., n:2 * n], q[..., 2 * n]
    out = p + q
    out[..., 2 * n] = t + t2 + 0.5 * np.sum(x * y2 - x2 * y, axis=-1)
    return out


def _omega(alg, a, b):
    return alg.bracket(a, b)[..., alg.layer_indices(2)[0]]


def vertical_subgroup(alg: GradedAlgebra, normals=None, k: int | None = None) -> HomSubgroup:
    """``P_1 × span{T}`` with ``P_1`` the orthogonal complement of ``normals`` in the first layer.

    With ``k`` instead of ``normals`` the first ``k`` coordinates ``x_1..x_k``
    are the normals.
    """
    n = heisenberg_rank(alg)
    h = alg.layer_indices(1)
    if normals is None:
        normals = np.eye(alg.dim)[h[: k or 0]]
    N = np.atleast_2d(np.asarray(normals, float))
    if N.size and N.shape[1] == 2 * n:
        full = np.zeros((len(N), alg.dim))
        full[:, h] = N
        N = full
    N1 = N[:, h] if N.size else np.zeros((0, 2 * n))
    P1 = null_space(N1) if len(N1) else np.eye(2 * n)
    vecs = np.zeros((P1.shape[1], alg.dim))
    vecs[:, h] = P1.T
    return make_subgroup(alg, {1: vecs, 2: np.eye(alg.dim)[alg.layer_indices(2)]})


def is_vertical(P: HomSubgroup) -> bool:
    return P.algebra.step == 2 and P.layer_dims[1] == P.algebra.layer_dims[1]


def vertical_codim(P: HomSubgroup) -> int:
    if not is_vertical(P):
        raise NotVertical("subgroup does not contain the centre")
    return P.algebra.layer_dims[0] - P.layer_dims[0]


def horizontal_complement_heis(P: HomSubgroup) -> HomSubgroup:
    """An isotropic ``V ⊆ V_1`` with ``V ⊕ P_1 = V_1``.

    Start from an orthonormal basis ``n_j`` of ``P_1^⊥`` and correct each
    vector inside ``P_1`` so that the symplectic form vanishes on the
    previously chosen ones; the correction keeps transversality.
    """
    alg = P.algebra
    n = heisenberg_rank(alg)
    k = vertical_codim(P)
    if k > n:
        raise CodimTooLarge(f"codimension {k} exceeds n = {n}")
    if k == 0:
        return trivial_subgroup(alg)
    B = P.layer_basis(1)
    N = null_space(np.vstack([B.T, np.eye(alg.dim)[alg.layer_indices(2)]]))
    rng = np.random.default_rng(0)
    for attempt in range(16):
        Nr = N if attempt == 0 else N @ ortho_group.rvs(k, random_state=rng) if k > 1 else N
        vs = [Nr[:, 0]]
        ok = True
        for j in range(1, k):
            A = np.array([_omega(alg, v, B.T) for v in vs])  # (j, dim P_1)
            rhs = -np.array([_omega(alg, v, Nr[:, j]) for v in vs])
            c, *_ = np.linalg.lstsq(A, rhs, rcond=None)
            if np.linalg.norm(A @ c - rhs) > 1e-10:
                ok = False
                break
            vs.append(Nr[:, j] + B @ c)
        if ok:
            return make_subgroup(alg, {1: orth(np.array(vs).T).T})
    raise CodimTooLarge("no isotropic complement found")


def is_rotationally_invariant(dist: HomDistance, samples: int = 2048, seed: int = 0, rtol: float = 1e-9) -> bool:
    """``rho(Rz, t) = rho(z, t)`` for random orthogonal ``R`` of the first layer."""
    alg = dist.algebra
    heisenberg_rank(alg)
    h = alg.layer_indices(1)
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(samples, alg.dim))
    for _ in range(4):
        R = ortho_group.rvs(len(h), random_state=rng) if len(h) > 1 else -np.eye(1)
        q = p.copy()
        q[:, h] = p[:, h] @ R.T
        a, b = dist.norm(p), dist.norm(q)
        if np.max(np.abs(a - b) / np.maximum(a, 1e-300)) > rtol:
            return False
    return True


def koranyi_theta_closed(n: int, k: int) -> float:
    """``c(n, k)`` for the Korányi norm, with the ball centred at the identity.

    ``{(z, t) : |z|^4 + 16 t^2 <= 1/16}`` meets a ``j``-dimensional vertical
    slice (``j = 2n - k``) in ``½ ∫ sqrt(1/16 - |z|^4)_+ dz``.
    """
    j = 2 * n - k
    if j == 0:
        return 0.125
    sphere = 2 * math.pi ** (j / 2) / math.gamma(j / 2)
    val, _ = quad(lambda r: r ** (j - 1) * math.sqrt(max(1 / 16 - r ** 4, 0.0)), 0, 0.5)
    return 0.5 * sphere * val


@dataclass(frozen=True)
class HeisConstant:
    n: int
    k: int
    value: MeasureEstimate
    representatives: tuple = ()

    def __post_init__(self):
        if not self.value.value > 0:
            raise ValueError("c(n, k) must be positive")


def _rotated_normals(n: int, k: int, seed: int) -> np.ndarray:
    R = ortho_group.rvs(2 * n, random_state=np.random.default_rng(seed)) if 2 * n > 1 else np.eye(1)
    return R[:k]


def c_constant(n: int, k: int, dist: HomDistance, budget: Budget | None = None, seed: int = 0,
               store=None, z_tol: float = 3.0) -> HeisConstant:
    """Compute ``c(n, k)`` on two vertical representatives and require agreement."""
    budget = budget or Budget()
    alg = dist.algebra
    if heisenberg_rank(alg) != n:
        raise ValueError(f"distance lives on heis({heisenberg_rank(alg)}), not heis({n})")
    if not 0 <= k <= n:
        raise CodimTooLarge(f"need 0 <= k <= n, got k={k}")
    if not is_rotationally_invariant(dist):
        raise NotRotationallyInvariant(f"{dist.kind} is not rotationally invariant")
    key = json.dumps({"op": "heis_c", "n": n, "k": k, "dist": dist.key(), "budget": budget.key(),
                      "seed": seed}, sort_keys=True)
    if store is not None:
        rec = store.get(key)
        if rec is not None:
            return HeisConstant(n, k, MeasureEstimate(**rec["value"]), tuple(rec["representatives"]))
    s1, s2 = (int(s.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for s in replicate_seeds(seed, 2))
    Pa = vertical_subgroup(alg, k=k)
    ests = [spherical_normalization(Pa, dist, budget, s1).theta]
    reps = [Pa.key()]
    if 0 < k < 2 * n:
        Pb = vertical_subgroup(alg, normals=_rotated_normals(n, k, s2))
        ests.append(spherical_normalization(Pb, dist, budget, s2).theta)
        reps.append(Pb.key())
        z = ests[0].z_score(ests[1])
        # standard errors come from few replicates: use the matching t quantile
        dof = 2 * (budget.replicates - 1)
        if abs(z) > _student.ppf(_normal.cdf(z_tol), dof):
            raise RepresentativeDisagreement(f"c({n},{k}) representatives differ: "
                                             f"{ests[0].value:.6g} vs {ests[1].value:.6g} (z={z:.2f})")
    vals = np.array([e.value for e in ests])
    ses = np.array([e.std_error for e in ests])
    value = MeasureEstimate(float(vals.mean()), float(np.sqrt(np.sum(ses ** 2)) / len(vals)),
                            int(sum(e.samples for e in ests)), int(seed))
    out = HeisConstant(n, k, value, tuple(reps))
    if store is not None:
        store.put(key, {"value": value.to_dict(), "representatives": list(reps)})
    return out


def jru(L, n: int | None = None, m: int | None = None) -> float:
    """``sqrt(det(L Lᵀ))`` for an ``l × (2n+1-m)`` matrix; 0 exactly when ``rank L < l``."""
    L = np.asarray(L, dtype=float)
    if L.ndim != 2:
        raise ShapeMismatch(f"expected a matrix, got shape {L.shape}")
    if n is not None and m is not None and L.shape[1] != 2 * n + 1 - m:
        raise ShapeMismatch(f"expected {2 * n + 1 - m} columns, got {L.shape[1]}")
    if L.shape[0] > L.shape[1] or np.linalg.matrix_rank(L) < L.shape[0]:
        return 0.0
    return float(math.sqrt(max(np.linalg.det(L @ L.T), 0.0)))


def heis_coarea_factor(n: int, m: int, ell: int, P: HomSubgroup, L: HomMorphism, dist: HomDistance,
                       budget: Budget | None = None, seed: int = 0, store=None, constants=None) -> MeasureEstimate:
    """``𝒞(P, L) = β_l c(n, m) / c(n, m+l) · sqrt(det(L_P L_Pᵀ))``.

    ``L_P`` is ``L`` in the orthonormal coordinates of ``P`` and ``β_l`` the
    Euclidean spherical density of the target.  ``constants`` may map ``k``
    to precomputed :class:`HeisConstant` values.
    """
    if not 1 <= m + ell <= n:
        raise HypothesisViolated(None, f"need 1 <= m + l <= n, got m={m}, l={ell}, n={n}")
    if vertical_codim(P) != m or L.target.dim != ell:
        raise ShapeMismatch("P or L does not match (m, l)")
    J = jru(L.restrict(P))
    if J == 0.0:
        return MeasureEstimate(0.0, 0.0, 0, int(seed))
    constants = constants or {}
    cm = constants.get(m) or c_constant(n, m, dist, budget, seed, store)
    cml = constants.get(m + ell) or c_constant(n, m + ell, dist, budget, seed, store)
    a, b = cm.value, cml.value
    val = euclidean_beta(ell) * a.value / b.value * J
    rel = math.hypot(a.std_error / a.value, b.std_error / b.value)
    return MeasureEstimate(val, val * rel, a.samples + b.samples, int(seed))


class VerticalNormalizer:
    """Spherical normalizations that reuse ``c(n, k)`` for every vertical subgroup.

    Non-vertical subgroups are passed to a :class:`SphericalNormalizer`.
    """

    def __init__(self, dist: HomDistance, budget: Budget | None = None, seed: int = 0, store=None):
        self.dist = dist
        self.n = heisenberg_rank(dist.algebra)
        self.budget = budget or Budget()
        self.seed = seed
        self.store = store
        self.constants: dict = {}
        self.fallback = SphericalNormalizer(dist, self.budget, seed, store)

    def constant(self, k: int) -> HeisConstant:
        if k not in self.constants:
            self.constants[k] = c_constant(self.n, k, self.dist, self.budget, self.seed, self.store)
        return self.constants[k]

    def measure(self, P: HomSubgroup) -> HaarMeasure:
        if not is_vertical(P) or vertical_codim(P) > self.n:
            return self.fallback.measure(P)
        th = self.constant(vertical_codim(P)).value
        return HaarMeasure(P, "spherical", 1 / th.value, P.d, th, th.std_error / th.value ** 2)

    def beta(self, P: HomSubgroup) -> float:
        return self.measure(P).beta

    def beta_field(self, alg, field_) -> np.ndarray:
        cols = np.asarray(field_.col_layer)
        n1 = int(np.sum(cols == 1))
        if np.any(cols == 2) and 2 * self.n - n1 <= self.n:
            return np.full(len(field_), 1 / self.constant(2 * self.n - n1).value.value)
        return None
