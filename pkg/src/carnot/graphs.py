"""Calculus for C^1_H maps: Pansu differentials, implicit solving, intrinsic graphs."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .algebra import bch_majorant, coords, dilate, multiply
from .dsl import GradedAlgebra, builtin
from .errors import (
    DegenerateCoercivity,
    ExtrapolationDiverged,
    NoConvergence,
    NotAGraph,
    SingularRestriction,
)
from .metric import HomDistance, box_norm, sphere_points
from .subgroups import (
    HomMorphism,
    HomSubgroup,
    Splitting,
    hom_morphism,
    make_splitting,
    trivial_subgroup,
    whole_group,
)

__all__ = [
    "C1HFunction",
    "TangentField",
    "IntrinsicGraph",
    "DEFAULT_LADDER",
    "pansu_matrix",
    "pansu_differential",
    "extend_horizontal",
    "coercivity_constant",
    "implicit_solve",
    "implicit_solve_batch",
    "level_set_as_graph",
    "subgroup_graph",
    "full_window",
    "check_intrinsic_cone",
    "estimate_lipschitz",
    "combine_maps",
    "blow_up_deviation",
    "w_box_bounds",
    "ConeReport",
]

DEFAULT_LADDER = 2.0 ** -np.arange(3, 11)


@dataclass(eq=False)
class C1HFunction:
    """A map between graded groups evaluated on batches of points.

    ``analytic_differential``, when given, maps an ``(N, n)`` batch to the
    ``(N, n'_1, n_1)`` horizontal blocks of the Pansu differential.
    """

    func: object
    source: GradedAlgebra
    target: GradedAlgebra
    analytic_differential: object = None
    domain: tuple | None = None

    def __call__(self, p) -> np.ndarray:
        p = coords(self.source, p)
        flat = p.reshape(-1, self.source.dim)
        out = np.asarray(self.func(flat), dtype=float).reshape(len(flat), self.target.dim)
        return out.reshape(p.shape[:-1] + (self.target.dim,))

    @classmethod
    def from_morphism(cls, L: HomMorphism, domain=None) -> "C1HFunction":
        A = L.layer_matrix(1)
        return cls(lambda p: p @ L.matrix.T, L.source, L.target,
                   lambda p: np.broadcast_to(A, (len(p),) + A.shape), domain)

    @classmethod
    def scalar(cls, source: GradedAlgebra, fn, gradient=None, domain=None) -> "C1HFunction":
        """Real-valued map; ``gradient`` returns the ``(N, n_1)`` horizontal gradient."""
        diff = None if gradient is None else (lambda p: gradient(p)[:, None, :])
        return cls(lambda p: np.asarray(fn(p)).reshape(-1, 1), source, builtin("abelian", [1]), diff, domain)

    def horizontal_differential(self, p, ladder=DEFAULT_LADDER) -> np.ndarray:
        p = np.atleast_2d(coords(self.source, p))
        if self.analytic_differential is not None:
            return np.asarray(self.analytic_differential(p), dtype=float)
        D, ok = pansu_matrix(self, p, ladder)
        if not np.all(ok):
            i = int(np.flatnonzero(~ok)[0])
            raise ExtrapolationDiverged(f"Pansu ladder diverges at {p[i].tolist()}")
        return D

    def verify_differential(self, points, tol: float = 1e-6) -> float:
        """Max deviation between the analytic and numeric differentials."""
        if self.analytic_differential is None:
            return 0.0
        p = np.atleast_2d(points)
        D, _ = pansu_matrix(self, p)
        dev = float(np.max(np.abs(D - self.analytic_differential(p))))
        if dev > tol:
            raise AssertionError(f"analytic differential deviates by {dev:.3e}")
        return dev


def combine_maps(u: C1HFunction, f: C1HFunction | None) -> C1HFunction:
    """The product map ``(u, f)`` into ``R^(l+m)``; both targets must be abelian."""
    if f is None:
        return u
    if not (u.target.is_abelian and f.target.is_abelian):
        raise ValueError("combined maps need abelian targets; supply the product map directly")
    tgt = builtin("abelian", [u.target.dim + f.target.dim])
    diff = None
    if u.analytic_differential is not None and f.analytic_differential is not None:
        diff = lambda p: np.concatenate([u.analytic_differential(p), f.analytic_differential(p)], axis=1)
    return C1HFunction(lambda p: np.hstack([u.func(p), f.func(p)]), u.source, tgt, diff, u.domain)


def _target_op(tgt: GradedAlgebra, a, b):
    """``a^{-1} b`` in the target group."""
    if tgt.is_abelian:
        return b - a
    return multiply(tgt, -a, b)


def pansu_matrix(f: C1HFunction, p, ladder=DEFAULT_LADDER, div_tol: float = 1e-4):
    """Batched horizontal Pansu differential with two-point Richardson extrapolation.

    For each horizontal basis vector ``e`` and each ``lam`` in the ladder,
    ``δ'_{1/lam}(f(p)^{-1} f(p δ_lam e))`` is formed; consecutive Richardson
    values ``2 D(lam/2) - D(lam)`` are compared and the estimate where the tail
    is most Cauchy is returned.  The second output flags points where even the
    best tail difference exceeds ``div_tol``.
    """
    src, tgt = f.source, f.target
    p = np.atleast_2d(coords(src, p))
    N = len(p)
    h = src.layer_indices(1)
    h_t = tgt.layer_indices(1)
    ladder = np.asarray(ladder, dtype=float)
    K = len(ladder)
    E = np.eye(src.dim)[h]  # (n1, n)
    steps = ladder[:, None, None] * E[None, :, :]  # (K, n1, n)
    q = multiply(src, p[None, None, :, :], steps[:, :, None, :])  # (K, n1, N, n)
    fq = f(q.reshape(-1, src.dim)).reshape(K, len(h), N, tgt.dim)
    fp = f(p)
    incr = _target_op(tgt, fp[None, None], fq)
    scaled = incr / ladder[:, None, None, None] ** np.asarray(tgt.weights)
    D = np.moveaxis(scaled[..., h_t], 1, -1)  # (K, N, n'1, n1)
    R = 2 * D[1:] - D[:-1]
    tail = np.max(np.abs(R[1:] - R[:-1]), axis=(-2, -1))  # (K-2, N)
    k = np.argmin(tail, axis=0)
    est = R[k + 1, np.arange(N)]
    scale = 1.0 + np.max(np.abs(est), axis=(-2, -1))
    ok = tail[k, np.arange(N)] <= div_tol * scale
    return est, ok


def extend_horizontal(A: np.ndarray, source: GradedAlgebra, target: GradedAlgebra,
                      atol: float = 1e-6) -> HomMorphism:
    """Extend a horizontal block to the unique homogeneous morphism (stratified source)."""
    M = np.zeros((target.dim, source.dim))
    M[np.ix_(target.layer_indices(1), source.layer_indices(1))] = A
    E = np.eye(source.dim)
    h = source.layer_indices(1)
    for j in range(1, source.step):
        nxt = source.layer_indices(j + 1)
        if len(nxt) == 0:
            continue
        rows, rhs = [], []
        for a in h:
            for b in source.layer_indices(j):
                c = source.bracket(E[a], E[b])[nxt]
                if np.any(c):
                    rows.append(c)
                    rhs.append(target.bracket(M[:, a], M[:, b]))
        sol, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
        M[:, nxt] = sol.T
    return hom_morphism(M, source, target, atol=atol)


def pansu_differential(f: C1HFunction, p, ladder=DEFAULT_LADDER) -> HomMorphism:
    """Pansu differential of ``f`` at one point as a validated morphism."""
    p = coords(f.source, p)
    if f.analytic_differential is not None:
        A = np.asarray(f.analytic_differential(p[None]))[0]
    else:
        D, ok = pansu_matrix(f, p[None], ladder)
        if not ok[0]:
            raise ExtrapolationDiverged(f"Pansu ladder is not Cauchy at {p.tolist()}")
        A = D[0]
    return extend_horizontal(A, f.source, f.target)


def _ball_points(dist: HomDistance, count: int, rng) -> np.ndarray:
    """Points of the unit ball (rejection from the coordinate box)."""
    b = dist.coord_bounds()
    out = []
    while sum(len(o) for o in out) < count:
        y = rng.uniform(-1, 1, size=(4 * count, len(b))) * b
        out.append(y[dist.norm(y) <= 1])
    return np.vstack(out)[:count]


def coercivity_constant(f: C1HFunction, p, V: HomSubgroup, radius: float = 0.1, samples: int = 4096,
                        seed: int = 0, dist: HomDistance | None = None,
                        target_dist: HomDistance | None = None, threshold: float = 1e-8) -> float:
    """Sampled ``min rho'(f(q), f(qv)) / |v|`` over ``q, qv`` in ``B(p, radius)``, ``v`` in ``V``."""
    src = f.source
    dist = dist or box_norm(src)
    target_dist = target_dist or box_norm(f.target)
    rng = np.random.default_rng(seed)
    p = coords(src, p)
    y = _ball_points(dist, samples, rng)
    q = multiply(src, p, dilate(src, radius * rng.uniform(0, 1, samples) ** 0.5, y))
    room = radius - dist.dist(p, q)
    g = rng.normal(size=(samples, V.dim)) @ V.basis.T
    g = dilate(src, 1.0 / dist.norm(g), g)
    t = room * rng.uniform(0.05, 1, samples)
    v = dilate(src, np.maximum(t, 1e-12), g)
    ratio = target_dist.dist(f(q), f(multiply(src, q, v))) / dist.norm(v)
    c = float(ratio.min())
    if c < threshold:
        raise DegenerateCoercivity(f"coercivity {c:.3e} below {threshold:.1e}; shrink the radius or change V")
    return c


# --------------------------------------------------------------------------
# implicit function solver

def implicit_solve_batch(f: C1HFunction, a, b, splitting: Splitting, tol: float = 1e-10,
                         max_iter: int = 50, x0=None, target_dist: HomDistance | None = None):
    """Solve ``f(a · v) = b`` for ``v`` in ``V`` at every row of ``a``.

    Damped Newton in the orthonormal coordinates of ``V``.  The Jacobian is
    the differential of ``x -> f(a · B_V x)``, i.e. the Pansu differential of
    ``f`` restricted to ``V`` for horizontal abelian ``V``, taken by central
    differences along the fibre.  A step of length ``t`` is accepted once the
    residual drops by at least half of the linear model's prediction,
    ``|r_new| <= (1 - t/2)|r|``.

    Returns ``(v, status, residual)`` with status 0 converged, 1 no
    convergence, 2 singular restriction.
    """
    src, tgt = f.source, f.target
    V = splitting.V
    a = np.atleast_2d(coords(src, a))
    N = len(a)
    b = np.broadcast_to(np.asarray(b, dtype=float), (N, tgt.dim))
    target_dist = target_dist or box_norm(tgt)
    x = np.zeros((N, V.dim)) if x0 is None else np.array(x0, dtype=float).reshape(N, V.dim)
    status = np.ones(N, dtype=int)

    def resid(x, rows):
        return _target_op(tgt, b[rows], f(multiply(src, a[rows], x @ V.basis.T)))

    if V.dim == 0:
        r = resid(x, np.arange(N))
        res = target_dist.norm(r)
        status = np.where(res < tol, 0, 1)
        return np.zeros((N, src.dim)), status, res

    active = np.arange(N)
    for _ in range(max_iter):
        r = resid(x[active], active)
        conv = target_dist.norm(r) < tol
        status[active[conv]] = 0
        active, r = active[~conv], r[~conv]
        if len(active) == 0:
            break
        xa = x[active]
        hstep = 1e-6 * (1.0 + np.abs(xa))
        J = np.empty((len(active), tgt.dim, V.dim))
        for k in range(V.dim):
            e = np.zeros(V.dim)
            e[k] = 1.0
            J[:, :, k] = (resid(xa + hstep[:, k:k + 1] * e, active) -
                          resid(xa - hstep[:, k:k + 1] * e, active)) / (2 * hstep[:, k:k + 1])
        sv = np.linalg.svd(J, compute_uv=False)
        sing = sv[:, -1] <= 1e-12 * np.maximum(sv[:, 0], 1e-300)
        status[active[sing]] = 2
        active, r, xa, J = active[~sing], r[~sing], xa[~sing], J[~sing]
        if len(active) == 0:
            break
        step = -np.einsum("nij,nj->ni", np.linalg.pinv(J), r)
        rn = np.linalg.norm(r, axis=-1)
        t = np.ones(len(active))
        accepted = np.zeros(len(active), bool)
        for _ in range(40):
            idx = np.flatnonzero(~accepted)
            if len(idx) == 0:
                break
            cand = xa[idx] + t[idx, None] * step[idx]
            ok = np.linalg.norm(resid(cand, active[idx]), axis=-1) <= (1 - t[idx] / 2) * rn[idx]
            x[active[idx[ok]]] = cand[ok]
            accepted[idx[ok]] = True
            t[idx[~ok]] /= 2
        # no admissible step: leave the point at its last iterate
        active = active[accepted]
    res_all = target_dist.norm(resid(x, np.arange(N)))
    status[(status == 1) & (res_all < tol)] = 0
    return x @ V.basis.T, status, res_all


def implicit_solve(f: C1HFunction, a, b, splitting: Splitting, tol: float = 1e-10,
                   max_iter: int = 50, target_dist: HomDistance | None = None) -> np.ndarray:
    """``phi(a, b)`` in ``V`` with ``rho'(f(a·phi), b) < tol``; raises on failure."""
    a = coords(f.source, a)
    single = a.ndim == 1
    v, status, res = implicit_solve_batch(f, a, b, splitting, tol, max_iter, target_dist=target_dist)
    if np.any(status == 2):
        raise SingularRestriction("the differential restricted to V is not invertible")
    if np.any(status != 0):
        raise NoConvergence(max_iter, float(np.max(res)))
    return v[0] if single else v


# --------------------------------------------------------------------------
# intrinsic graphs

@dataclass
class TangentField:
    """Tangent subgroups at a batch of points: orthonormal bases ``(N, n, d)``."""

    bases: np.ndarray
    col_layer: tuple

    def __len__(self):
        return len(self.bases)

    def subgroup(self, alg: GradedAlgebra, i: int) -> HomSubgroup:
        return HomSubgroup(alg, self.bases[i], self.col_layer)

    @classmethod
    def constant(cls, P: HomSubgroup, N: int) -> "TangentField":
        return cls(np.broadcast_to(P.basis, (N,) + P.basis.shape), P.col_layer)


def _kernel_field(alg: GradedAlgebra, A: np.ndarray) -> TangentField:
    """Kernels of horizontal blocks ``A`` (N, k, n1) extended by all higher layers."""
    N, k, n1 = A.shape
    h = alg.layer_indices(1)
    _, s, vt = np.linalg.svd(A)
    null = np.swapaxes(vt[:, k:, :], 1, 2)  # (N, n1, n1-k)
    B1 = np.zeros((N, alg.dim, n1 - k))
    B1[:, h, :] = null
    upper = [i for i in range(alg.dim) if alg.layer_of[i] > 1]
    Bu = np.broadcast_to(np.eye(alg.dim)[:, upper], (N, alg.dim, len(upper)))
    layers = (1,) * (n1 - k) + tuple(alg.layer_of[i] for i in upper)
    return TangentField(np.concatenate([B1, Bu], axis=2), layers)


class IntrinsicGraph:
    """The set ``{w · phi(w) : w in A}`` for a box ``A`` in the coordinates of ``W``.

    ``phi_batch`` maps ``(N, n)`` points of ``W`` to ``(V-points, ok-mask)``;
    ``tangent`` maps graph points to a :class:`TangentField`.  Values of
    ``phi`` are memoised per node (writes are idempotent, so concurrent use
    is safe).
    """

    def __init__(self, splitting: Splitting, lo, hi, phi_batch, tangent, description: str = ""):
        self.splitting = splitting
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if self.lo.shape != (splitting.W.dim,) or np.any(self.hi <= self.lo):
            raise ValueError("domain box must be a nondegenerate box in W coordinates")
        self._phi = phi_batch
        self.tangent = tangent
        self.description = description
        self._memo: dict = {}
        self._lock = threading.Lock()
        self.memo_enabled = True

    @property
    def algebra(self):
        return self.splitting.algebra

    @property
    def W(self):
        return self.splitting.W

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def w_points(self, u) -> np.ndarray:
        """Map unit-cube samples to points of the domain box."""
        return self.W.from_coords(self.lo + np.asarray(u) * (self.hi - self.lo))

    def phi(self, w):
        w = np.atleast_2d(w)
        if not self.memo_enabled:
            return self._phi(w)
        keys = [row.tobytes() for row in w]
        out = np.empty_like(w)
        ok = np.ones(len(w), bool)
        miss = [i for i, k in enumerate(keys) if k not in self._memo]
        if miss:
            v, good = self._phi(w[miss])
            with self._lock:
                for j, i in enumerate(miss):
                    self._memo.setdefault(keys[i], (v[j], bool(good[j])))
        for i, k in enumerate(keys):
            out[i], ok[i] = self._memo[k]
        return out, ok

    def points(self, w):
        """Graph points ``w · phi(w)`` and the solver mask."""
        v, ok = self.phi(w)
        return multiply(self.algebra, np.atleast_2d(w), v), ok

    def clear_memo(self):
        with self._lock:
            self._memo.clear()


def _constant_tangent(P):
    return lambda q: TangentField.constant(P, len(np.atleast_2d(q)))


def subgroup_graph(P: HomSubgroup, splitting: Splitting, lo, hi, tol: float = 1e-12) -> IntrinsicGraph:
    """A homogeneous subgroup seen as an intrinsic graph over ``W``."""
    if P.dim != splitting.W.dim or splitting.graph_jacobian(P) < 1e-12:
        raise NotAGraph("pi_W restricted to P is not injective")
    alg = P.algebra
    comp = P.orth_complement
    off = C1HFunction(lambda p: p @ comp, alg, builtin("abelian", [max(comp.shape[1], 1)])
                      if comp.shape[1] else alg)
    if comp.shape[1] == 0:
        phi = lambda w: (np.zeros_like(w), np.ones(len(w), bool))
    else:
        def phi(w):
            v, status, _ = implicit_solve_batch(off, w, np.zeros(comp.shape[1]), splitting, tol)
            return v, status == 0
    return IntrinsicGraph(splitting, lo, hi, phi, _constant_tangent(P), "subgroup")


def full_window(alg: GradedAlgebra, lo, hi) -> IntrinsicGraph:
    """An open box of ``G`` itself: the graph over ``W = G`` with ``V = {0}``."""
    S = make_splitting(whole_group(alg), trivial_subgroup(alg))
    G = S.W
    phi = lambda w: (np.zeros_like(w), np.ones(len(w), bool))
    return IntrinsicGraph(S, lo, hi, phi, _constant_tangent(G), "window")


def level_set_as_graph(f: C1HFunction, b, splitting: Splitting, lo, hi, tol: float = 1e-10,
                       ladder=DEFAULT_LADDER) -> IntrinsicGraph:
    """The level set ``{f = b}`` near ``W`` as the graph of the implicit function."""
    b = np.asarray(b, dtype=float).reshape(-1)

    def phi(w):
        v, status, _ = implicit_solve_batch(f, w, b, splitting, tol)
        return v, status == 0

    if f.target.is_abelian:
        def tangent(q):
            return _kernel_field(f.source, f.horizontal_differential(q, ladder))
    else:
        def tangent(q):
            from .subgroups import kernel
            Ks = [kernel(pansu_differential(f, qi, ladder)) for qi in np.atleast_2d(q)]
            return TangentField(np.stack([K.basis for K in Ks]), Ks[0].col_layer)

    return IntrinsicGraph(splitting, lo, hi, phi, tangent, "level_set")


def w_box_bounds(splitting: Splitting, lo, hi) -> np.ndarray:
    """Half-widths of a box in ``W`` coordinates containing ``pi_W`` of an ambient box."""
    alg = splitting.algebra
    a = np.maximum(np.abs(lo), np.abs(hi))
    pv = np.abs(splitting.piV_matrix) @ a
    bound = bch_majorant(alg, a, pv)
    return np.abs(splitting.W.basis).T @ bound


# --------------------------------------------------------------------------
# cone test, Lipschitz constants, blow-ups

@dataclass
class ConeReport:
    pairs: int
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations


def check_intrinsic_cone(graph: IntrinsicGraph, C: float, L: float, samples: int = 512, seed: int = 0,
                         dist: HomDistance | None = None, directions: int = 16, radii: int = 200) -> ConeReport:
    """Check ``Σ ∩ p·cone = {p}`` on sampled pairs, where the cone is
    ``{0} ∪ ⋃_{v in V} B(v, (C/L)|v|)``.

    Membership of ``x = p^{-1} q`` is decided by scanning ``v = t·d`` along
    sampled unit directions ``d`` of ``V``.
    """
    alg = graph.algebra
    dist = dist or box_norm(alg)
    V = graph.splitting.V
    rng = np.random.default_rng(seed)
    w = graph.w_points(rng.uniform(size=(2 * samples, graph.W.dim)))
    pts, ok = graph.points(w)
    pts = pts[ok]
    half = len(pts) // 2
    p, q = pts[:half], pts[half:2 * half]
    x = multiply(alg, -p, q)
    nx = dist.norm(x)
    k = C / L
    if V.dim == 1:
        d = np.vstack([V.basis[:, 0], -V.basis[:, 0]])
    else:
        g = rng.normal(size=(directions, V.dim)) @ V.basis.T
        d = np.vstack([g, -g])
    d = d / dist.norm(d)[:, None]
    ts = np.linspace(0, 1, radii + 1)[1:]
    T = 4 * nx / max(1 - k, 0.25)
    rep = ConeReport(len(x))
    for i in range(len(x)):
        if nx[i] < 1e-12:
            continue
        v = (T[i] * ts)[:, None, None] * d[None, :, :]  # horizontal V: linear scaling is dilation
        v = v.reshape(-1, alg.dim)
        gap = dist.dist(v, x[i]) - k * dist.norm(v)
        if gap.min() < -1e-9 * nx[i]:
            rep.violations.append((p[i].tolist(), q[i].tolist(), float(gap.min())))
    return rep


def estimate_lipschitz(u: C1HFunction, lo, hi, samples: int = 100_000, seed: int = 0,
                       dist: HomDistance | None = None, target_dist: HomDistance | None = None) -> float:
    """Sampled ``sup rho'(u(x), u(y)) / rho(x, y)`` over pairs in the box; a lower bound."""
    src = u.source
    dist = dist or box_norm(src)
    target_dist = target_dist or box_norm(u.target)
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    x = lo + rng.uniform(size=(samples, src.dim)) * (hi - lo)
    y = lo + rng.uniform(size=(samples, src.dim)) * (hi - lo)
    # local pairs probe the differential; far pairs probe the global constant
    local = samples // 2
    dirs = sphere_points(dist, local, int(rng.integers(2 ** 31)))
    scale = np.exp(rng.uniform(np.log(1e-4), 0, local)) * np.min(hi - lo)
    y[:local] = multiply(src, x[:local], dilate(src, scale, dirs))
    inside = np.all((y >= lo) & (y <= hi), axis=1)
    x, y = x[inside], y[inside]
    d = dist.dist(x, y)
    good = d > 1e-14
    if not np.any(good):
        return 0.0
    return float(np.max(target_dist.dist(u(x[good]), u(y[good])) / d[good]))


def blow_up_deviation(graph: IntrinsicGraph, phi0, w_grid, lambdas) -> np.ndarray:
    """``max_grid |δ_{1/λ} phi(δ_λ w) - phi0(w)|`` for each ``λ``."""
    alg = graph.algebra
    out = []
    for lam in lambdas:
        v, ok = graph.phi(dilate(alg, lam, w_grid))
        dev = np.abs(dilate(alg, 1.0 / lam, v) - phi0(w_grid))
        out.append(float(np.max(dev[ok])))
    return np.asarray(out)
