"""Homogeneous distances, ball volumes on subgroups and spherical normalizations.

Lebesgue measure on a subgroup ``P`` is taken in the orthonormal coordinates
of ``P.basis``.  The spherical measure restricted to ``P`` is ``beta * Leb_P``
with ``beta = 1/Theta`` and

    Theta = sup { Leb_P(B(c, 1/2) ∩ P) : c in G }.

Balls that miss ``P`` contribute nothing, and a ball meeting ``P`` can be
translated by an element of ``P`` so that it contains the identity, so the
supremum over balls of diameter one containing ``0`` is the same number.
Left translations by ``P`` do not change the measure either, so the centre is
searched in the orthogonal complement of Lie(P) only.
"""
from __future__ import annotations

import hashlib
import json
import math
import threading
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.optimize import minimize
from scipy.special import gamma
from scipy.stats import norm as _normal, ortho_group

from .algebra import coords, dilate, inverse, multiply
from .dsl import GradedAlgebra, Violation, builtin, serialize
from .errors import NonConvergent, NotHeisenberg, OptimizationBudgetExceeded
from .qmc import MeasureEstimate, qmc_mean, replicate_seeds, sobol
from .subgroups import HomMorphism, HomSubgroup

__all__ = [
    "HomDistance",
    "Budget",
    "HaarMeasure",
    "DistanceReport",
    "box_norm",
    "koranyi_norm",
    "euclidean",
    "custom_distance",
    "heisenberg_rank",
    "check_homogeneous_distance",
    "morphism_distance",
    "sphere_points",
    "ball_volume",
    "spherical_normalization",
    "SphericalNormalizer",
    "hausdorff_bracket",
    "SubgroupMeasure",
    "federer_density",
    "fit_conjugation_constant",
    "euclidean_beta",
]


class HomDistance:
    """A homogeneous norm; ``dist(p, q) = norm(p^{-1} q)``.

    ``layer_bounds[i]`` bounds the Euclidean norm of the layer ``i+1``
    component over the closed unit ball.
    """

    def __init__(self, algebra: GradedAlgebra, kind: str, params: dict, evaluator, layer_bounds):
        self.algebra = algebra
        self.kind = kind
        self.params = dict(params)
        self._eval = evaluator
        self.layer_bounds = np.asarray(layer_bounds, dtype=float)

    def norm(self, p) -> np.ndarray:
        return self._eval(coords(self.algebra, p))

    def dist(self, p, q) -> np.ndarray:
        return self.norm(multiply(self.algebra, inverse(self.algebra, p), q))

    __call__ = dist

    def coord_bounds(self) -> np.ndarray:
        """Bound on ``|p_k|`` for every coordinate over the unit ball."""
        return self.layer_bounds[np.asarray(self.algebra.layer_of) - 1]

    def key(self) -> dict:
        return {"kind": self.kind, "params": self.params,
                "algebra": hashlib.sha256(serialize(self.algebra).encode()).hexdigest()[:16]}

    def __repr__(self):
        return f"HomDistance({self.kind}, {self.params})"


def _layer_norms(alg, p):
    return np.stack([np.linalg.norm(p[..., alg.layer_indices(i)], axis=-1)
                     for i in range(1, alg.step + 1)], axis=-1)


def box_norm(alg: GradedAlgebra, eps=None) -> HomDistance:
    """``max_i eps_i |p^(i)|^(1/i)`` over the layers."""
    eps = np.ones(alg.step) if eps is None else np.broadcast_to(np.asarray(eps, float), (alg.step,)).copy()
    if np.any(eps <= 0):
        raise ValueError("box weights must be positive")
    expo = 1.0 / np.arange(1, alg.step + 1)

    def ev(p):
        return np.max(eps * _layer_norms(alg, p) ** expo, axis=-1)

    return HomDistance(alg, "box", {"eps": eps.tolist()}, ev, eps ** -np.arange(1, alg.step + 1))


def euclidean(alg: GradedAlgebra) -> HomDistance:
    if alg.step != 1:
        raise ValueError("the Euclidean norm is homogeneous only on step-1 groups")
    d = box_norm(alg)
    d.kind, d.params = "euclidean", {}
    return d


def heisenberg_rank(alg: GradedAlgebra) -> int:
    """Return ``n`` when ``alg`` is the standard ``heis(n)`` presentation."""
    if alg.step != 2 or alg.layer_dims[1] != 1 or alg.layer_dims[0] % 2:
        raise NotHeisenberg("expected layers (2n, 1)")
    n = alg.layer_dims[0] // 2
    ref = builtin("heis", [n])
    if dict(ref.constants) != {k: v for k, v in alg.constants.items() if v != 0}:
        raise NotHeisenberg("brackets differ from [X_i, Y_i] = T")
    return n


def koranyi_norm(alg: GradedAlgebra) -> HomDistance:
    """``(|z|^4 + 16 t^2)^(1/4)`` on ``heis(n)``."""
    heisenberg_rank(alg)
    h = alg.layer_indices(1)
    t = alg.layer_indices(2)[0]

    def ev(p):
        z2 = np.sum(p[..., h] ** 2, axis=-1)
        return (z2 ** 2 + 16.0 * p[..., t] ** 2) ** 0.25

    return HomDistance(alg, "koranyi", {}, ev, [1.0, 0.25])


def custom_distance(alg: GradedAlgebra, evaluator, name: str = "custom",
                    samples: int = 20000, seed: int = 0) -> HomDistance:
    """Wrap a user norm; layer bounds are estimated by sampling the unit sphere."""
    probe = HomDistance(alg, name, {}, evaluator, np.ones(alg.step))
    pts = sphere_points(probe, samples, seed)
    bounds = 1.1 * np.max(_layer_norms(alg, pts), axis=0)
    return HomDistance(alg, name, {"estimated_bounds": True}, evaluator, bounds)


def sphere_points(dist: HomDistance, count: int, seed: int = 0) -> np.ndarray:
    """Quasi-uniform points of the unit sphere: dilated Gaussian Sobol directions.

    A larger ``count`` extends the same sequence, so sampled maxima are
    monotone in ``count``.
    """
    alg = dist.algebra
    eng_pts = sobol(alg.dim, max(count, 2), seed)[:count]
    g = _normal.ppf(np.clip(eng_pts, 1e-12, 1 - 1e-12))
    r = dist.norm(g)
    return dilate(alg, 1.0 / r, g)


# --------------------------------------------------------------------------
# validation of distances

@dataclass
class DistanceReport:
    violations: list = field(default_factory=list)
    worst_triangle_excess: float = 0.0
    homogeneity_defect: float = 0.0
    diameter: float = float("nan")

    @property
    def ok(self) -> bool:
        return not self.violations


def check_homogeneous_distance(dist: HomDistance, samples: int = 100_000, seed: int = 0,
                               diameter_points: int = 2048, tol: float = 1e-12) -> DistanceReport:
    """Sample the triangle inequality, homogeneity and ``diam B(0,1) = 2``."""
    alg = dist.algebra
    rng = np.random.default_rng(seed)
    rep = DistanceReport()
    scale = np.exp(rng.uniform(-2, 2, size=(samples, 3)))
    p, q, r = (dilate(alg, scale[:, i], rng.normal(size=(samples, alg.dim))) for i in range(3))
    excess = dist.dist(p, r) - dist.dist(p, q) - dist.dist(q, r)
    rel = excess / np.maximum(dist.dist(p, r), 1e-300)
    rep.worst_triangle_excess = float(rel.max())
    if rel.max() > tol:
        i = int(np.argmax(rel))
        rep.violations.append(Violation("triangle", (p[i].tolist(), q[i].tolist(), r[i].tolist()),
                                        f"relative excess {rel[i]:.3e}"))
    lam = np.exp(rng.uniform(-3, 3, size=samples))
    hom = np.abs(dist.norm(dilate(alg, lam, p)) / (lam * dist.norm(p)) - 1)
    rep.homogeneity_defect = float(hom.max())
    if hom.max() > 1e-12:
        rep.violations.append(Violation("homogeneity", (int(np.argmax(hom)),), f"defect {hom.max():.3e}"))
    s = sphere_points(dist, diameter_points, seed)
    s = np.vstack([s, -s])
    best = 0.0
    for chunk in np.array_split(s, max(1, len(s) // 256)):
        d = dist.dist(chunk[:, None, :], s[None, :, :])
        best = max(best, float(d.max()))
    # drop last-ulp noise from the pairwise maximum
    rep.diameter = best = round(best, 12)
    if not 2 * 0.99 <= best <= 2.0:
        rep.violations.append(Violation("diameter", (best,), "sampled diam B(0,1) outside [1.98, 2]"))
    return rep


def morphism_distance(L: HomMorphism, M: HomMorphism, rho: HomDistance, rho_t: HomDistance,
                      samples: int = 4096, seed: int = 0) -> float:
    """``max`` over sampled unit-sphere points of ``rho_t(L p, M p)``."""
    if L.source is not M.source and not L.source.same_as(M.source):
        raise ValueError("morphisms have different sources")
    p = sphere_points(rho, samples, seed)
    return float(np.max(rho_t.dist(L(p), M(p))))


def fit_conjugation_constant(dist: HomDistance, samples: int = 10_000, seed: int = 0,
                             q_radius: float = 1.0):
    """Fit ``C`` in ``|q^{-1} p q| <= |p| + C`` for ``|q| <= q_radius``.

    Returns ``(C, worst_excess_on_fresh_sample)``.
    """
    alg = dist.algebra
    rng = np.random.default_rng(seed)

    def draw(k):
        p = dilate(alg, np.exp(rng.uniform(-2, 3, k)), rng.normal(size=(k, alg.dim)))
        q = sphere_points(dist, k, int(rng.integers(2 ** 31)))
        q = dilate(alg, q_radius * rng.uniform(0, 1, k), q)
        conj = multiply(alg, inverse(alg, q), multiply(alg, p, q))
        return dist.norm(conj) - dist.norm(p)

    C = float(draw(samples).max())
    fresh = float(draw(samples).max())
    return C, fresh


# --------------------------------------------------------------------------
# Haar measures

@dataclass(frozen=True)
class Budget:
    points: int = 4096
    starts: int = 32
    maxfev: int = 200
    final_points: int = 16384
    replicates: int = 16
    candidates: int = 4
    workers: int = 1

    def key(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "workers"}


@dataclass(frozen=True)
class HaarMeasure:
    """``psi^d`` restricted to ``subgroup`` equals ``beta * Leb``."""

    subgroup: HomSubgroup
    psi_kind: str
    beta: float
    d: int
    theta: MeasureEstimate
    beta_std_error: float
    center: tuple = ()
    flags: tuple = ()


def euclidean_beta(dim: int) -> float:
    """Spherical normalization on ``R^dim``: the inverse volume of a ball of diameter one."""
    return 2.0 ** dim * gamma(dim / 2 + 1) / math.pi ** (dim / 2)


def ball_volume(P: HomSubgroup, dist: HomDistance, center, r: float, points: int = 4096,
                seed=0, replicates: int = 1, u=None, workers: int = 1) -> MeasureEstimate:
    """``Leb_P(B(center, r) ∩ P)`` by randomized QMC.

    Points of the ball lie in ``p0 · (P ∩ B(0, R))`` with ``p0`` the
    orthogonal projection of the centre on Lie(P) and ``R = rho(p0, c) + r``,
    a box in the coordinates of ``P``.  Passing fixed uniform points ``u``
    evaluates with common random numbers (used during optimization).
    """
    alg = P.algebra
    c = coords(alg, center)
    if P.dim == 0:
        inside = float(dist.norm(c) <= r)
        return MeasureEstimate(inside, 0.0, 1, int(seed) if np.isscalar(seed) else 0)
    p0 = c @ P.projector
    R = float(dist.dist(p0, c)) + r
    half = R ** P.weights * dist.layer_bounds[np.asarray(P.col_layer) - 1]
    vol = float(np.prod(2 * half))
    ci = -c

    def f(uu):
        q = multiply(alg, p0, P.from_coords((2 * uu - 1) * half))
        return vol * (dist.norm(multiply(alg, ci, q)) <= r)

    if u is not None:
        return MeasureEstimate(float(np.mean(f(u))), 0.0, len(u), 0)
    return qmc_mean(f, P.dim, points, replicates, seed, workers)


def _seed_int(ss) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def spherical_normalization(P: HomSubgroup, dist: HomDistance, budget: Budget | None = None,
                            seed: int = 0, strict: bool = False) -> HaarMeasure:
    """Multi-start Nelder–Mead over ball centres for ``Theta``; ``beta = 1/Theta``."""
    budget = budget or Budget()
    flags = []
    s_coarse, s_select, s_final = (_seed_int(s) for s in replicate_seeds(seed, 3))
    comp = P.orth_complement
    k = comp.shape[1]
    u = sobol(P.dim, budget.points, s_coarse)

    def value(y):
        return ball_volume(P, dist, comp @ y, 0.5, u=u).value

    if k == 0 or P.dim == 0:
        cands = [np.zeros(k)]
        exhausted = False
    else:
        bounds = dist.coord_bounds() @ np.abs(comp)
        starts = [np.zeros(k)]
        if budget.starts > 1:
            su = sobol(k, budget.starts - 1, s_coarse + 1)[: budget.starts - 1]
            starts += list((su - 0.5) * bounds)
        results = []
        for y0 in starts:
            simplex = np.vstack([y0, y0 + 0.15 * np.diag(np.maximum(bounds, 1e-3))])
            res = minimize(lambda y: -value(y), y0, method="Nelder-Mead",
                           options={"maxfev": budget.maxfev, "initial_simplex": simplex,
                                    "xatol": 1e-4, "fatol": 1e-12})
            results.append((-res.fun, res.x, res.nfev >= budget.maxfev))
        results.sort(key=lambda t: -t[0])
        cands = [r[1] for r in results[: budget.candidates]]
        # the ball centred at the identity always competes
        if not any(np.all(c == 0) for c in cands):
            cands.append(np.zeros(k))
        exhausted = results[0][2]
    if exhausted:
        flags.append("budget_exhausted")

    # pick the best candidate on fresh points, then measure it on independent ones
    if len(cands) > 1:
        sel = [ball_volume(P, dist, comp @ y, 0.5, budget.final_points, s_select,
                           max(2, budget.replicates // 2), workers=budget.workers).value
               for y in cands]
        best = cands[int(np.argmax(sel))]
    else:
        best = cands[0]
    if k and P.dim:
        # polish on a finer fixed set: coarse noise otherwise misplaces the centre
        u_fine = sobol(P.dim, 2 * budget.final_points, s_select + 1)
        fine = lambda y: -ball_volume(P, dist, comp @ y, 0.5, u=u_fine).value
        step = 0.05 * np.maximum(dist.coord_bounds() @ np.abs(comp), 1e-3)
        res = minimize(fine, best, method="Nelder-Mead",
                       options={"maxfev": budget.maxfev, "initial_simplex": np.vstack([best, best + np.diag(step)]),
                                "xatol": 1e-5, "fatol": 1e-12})
        # keep the move only if it is a real gain on common independent points
        a, b = (ball_volume(P, dist, comp @ y, 0.5, budget.final_points, s_select + 2,
                            budget.replicates, workers=budget.workers) for y in (best, res.x))
        if b.value - a.value > 2.0 * math.hypot(a.std_error, b.std_error):
            best = res.x
    theta = ball_volume(P, dist, comp @ best, 0.5, budget.final_points, s_final,
                        budget.replicates, workers=budget.workers)
    theta = replace(theta, seed=int(seed))
    if theta.value <= 0:
        raise OptimizationBudgetExceeded("no ball of diameter one met the subgroup", best=None)
    beta = 1.0 / theta.value
    haar = HaarMeasure(P, "spherical", beta, P.d, theta, theta.std_error / theta.value ** 2,
                       tuple((comp @ best).tolist()), tuple(flags))
    if strict and exhausted:
        raise OptimizationBudgetExceeded("Nelder–Mead budget exhausted", best=haar)
    return haar


class SphericalNormalizer:
    """Cache of spherical normalizations keyed by the subgroup's projector."""

    def __init__(self, dist: HomDistance, budget: Budget | None = None, seed: int = 0, store=None):
        self.dist = dist
        self.budget = budget or Budget()
        self.seed = seed
        self.store = store
        self._cache: dict = {}
        self._lock = threading.Lock()

    def _store_key(self, P):
        return json.dumps({"op": "spherical_normalization", "dist": self.dist.key(),
                           "subgroup": P.key(), "budget": self.budget.key(), "seed": self.seed},
                          sort_keys=True)

    def measure(self, P: HomSubgroup) -> HaarMeasure:
        key = P.key()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        haar = None
        if self.store is not None:
            rec = self.store.get(self._store_key(P))
            if rec is not None:
                th = MeasureEstimate(**rec["theta"])
                haar = HaarMeasure(P, "spherical", 1 / th.value, P.d, th, th.std_error / th.value ** 2,
                                   tuple(rec["center"]), tuple(rec["flags"]))
        if haar is None:
            haar = spherical_normalization(P, self.dist, self.budget, self.seed)
            if self.store is not None:
                self.store.put(self._store_key(P), {"theta": haar.theta.to_dict(),
                                                    "center": list(haar.center), "flags": list(haar.flags)})
        with self._lock:
            self._cache.setdefault(key, haar)
        return self._cache[key]

    def beta(self, P: HomSubgroup) -> float:
        return self.measure(P).beta

    @cached_property
    def rotation_invariant(self) -> bool:
        """Abelian group and a distance invariant under sampled orthogonal maps."""
        alg = self.dist.algebra
        if alg.step != 1 or alg.dim < 2:
            return False
        rng = np.random.default_rng(0)
        p = rng.normal(size=(512, alg.dim))
        a = self.dist.norm(p)
        for R in ortho_group.rvs(alg.dim, size=4, random_state=rng):
            if np.max(np.abs(self.dist.norm(p @ R.T) - a) / a) > 1e-9:
                return False
        return True

    def beta_field(self, alg, field_):
        """One ``beta`` for the whole field when the orthogonal group acts transitively
        on its tangents; ``None`` otherwise."""
        if not self.rotation_invariant:
            return None
        return np.full(len(field_), self.beta(field_.subgroup(alg, 0)))


def hausdorff_bracket(P: HomSubgroup, dist: HomDistance, normalizer=None):
    """Admissible range ``(lower, upper)`` of the Hausdorff density on ``P``.

    From ``H^d <= S^d <= 2^d H^d`` the Hausdorff density lies in
    ``[beta_S / 2^d, beta_S]``; it is never computed exactly.
    """
    normalizer = normalizer or SphericalNormalizer(dist)
    b = normalizer.beta(P)
    return (b / 2.0 ** P.d, b)


# --------------------------------------------------------------------------
# Federer density

class SubgroupMeasure:
    """``scale * beta * Leb_P`` evaluated on balls."""

    def __init__(self, P: HomSubgroup, dist: HomDistance, beta: float, scale: float = 1.0):
        self.P, self.dist, self.beta, self.scale = P, dist, beta, scale

    def ball(self, center, r, points=4096, seed=0, replicates=1, u=None) -> MeasureEstimate:
        est = ball_volume(self.P, self.dist, center, r, points, seed, replicates, u=u)
        return est.scale(self.scale * self.beta)

    @property
    def sample_dim(self) -> int:
        return self.P.dim

    def __mul__(self, c: float) -> "SubgroupMeasure":
        return SubgroupMeasure(self.P, self.dist, self.beta, self.scale * c)

    __rmul__ = __mul__


def federer_density(mu, x, dist: HomDistance, d: int, scales=(0.5, 0.25, 0.125),
                    budget: Budget | None = None, seed: int = 0, rtol: float = 0.02) -> MeasureEstimate:
    """Spherical Federer density of ``mu`` at ``x`` over a decreasing ladder of diameters.

    At each diameter ``eps`` the ratio ``mu(B(c, eps/2)) / eps^d`` is maximised
    over centres with ``x`` in the ball.  The ladder must settle (consecutive
    values within ``rtol`` plus three standard errors) or ``NonConvergent``
    is raised.
    """
    budget = budget or Budget()
    alg = dist.algebra
    x = coords(alg, x)
    n = alg.dim
    out = []
    seeds = [_seed_int(s) for s in replicate_seeds(seed, 3 * len(scales))]
    for i, eps in enumerate(scales):
        s_coarse, s_select, s_final = seeds[3 * i: 3 * i + 3]
        u = sobol(mu.sample_dim, budget.points, s_coarse)

        def centre(y):
            ny = float(dist.norm(y))
            if ny > 0.5:
                y = dilate(alg, 0.5 / ny, y)
            return multiply(alg, x, dilate(alg, eps, y))

        def ratio(y, **kw):
            return mu.ball(centre(y), eps / 2, **kw)

        bounds = 0.5 * dist.coord_bounds()
        starts = [np.zeros(n)] + list((sobol(n, budget.starts, s_coarse + 1)[: budget.starts - 1] - 0.5) * 2 * bounds)
        results = []
        for y0 in starts:
            simplex = np.vstack([y0, y0 + 0.15 * np.diag(np.maximum(bounds, 1e-3))])
            res = minimize(lambda y: -ratio(y, u=u).value, y0, method="Nelder-Mead",
                           options={"maxfev": budget.maxfev, "initial_simplex": simplex,
                                    "xatol": 1e-4, "fatol": 1e-12})
            results.append((-res.fun, res.x))
        results.sort(key=lambda t: -t[0])
        cands = [r[1] for r in results[: budget.candidates]]
        sel = [ratio(y, points=budget.final_points, seed=s_select, replicates=2).value for y in cands]
        best = cands[int(np.argmax(sel))]
        est = ratio(best, points=budget.final_points, seed=s_final, replicates=budget.replicates)
        out.append(est.scale(1.0 / eps ** d))
    last, prev = out[-1], out[-2] if len(out) > 1 else out[-1]
    gap = abs(last.value - prev.value)
    if gap > rtol * max(abs(last.value), 1e-300) + 3 * np.hypot(last.std_error, prev.std_error) and gap > 1e-12:
        raise NonConvergent(f"density ladder not settled: {[o.value for o in out]}")
    return MeasureEstimate(last.value, last.std_error, sum(o.samples for o in out), int(seed))
