"""Area and coarea factors, surface integrals over intrinsic graphs and slicing.

Surface measure on an intrinsic graph ``Σ = {w·phi(w) : w in A}`` is defined
through the area formula

    ∫_Σ h dψ = ∫_A h(Φ(w)) 𝒜(T_w) β_W dLeb_W(w),   𝒜(T) = β_T / (β_W J_T),

where ``J_T`` is the constant Jacobian of ``pi_W`` restricted to the tangent
subgroup ``T``.  Slices ``Σ ∩ u^{-1}(s)`` are level sets of the combined map
``(u, f)`` and are integrated the same way.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import minimize

from .algebra import bch_majorant, dilate, multiply
from .errors import HypothesisViolated, NotAGraph, NotFound, RoutesDisagree
from .graphs import (
    C1HFunction,
    IntrinsicGraph,
    TangentField,
    combine_maps,
    estimate_lipschitz,
    extend_horizontal,
    implicit_solve_batch,
    level_set_as_graph,
    subgroup_graph,
    w_box_bounds,
)
from .metric import (
    Budget,
    HomDistance,
    SphericalNormalizer,
    ball_volume,
    euclidean_beta,
    hausdorff_bracket,
)
from .qmc import MeasureEstimate, combine, qmc_mean, replicate_seeds, sobol
from .subgroups import (
    HomMorphism,
    HomSubgroup,
    Splitting,
    find_horizontal_complement,
    kernel,
    make_splitting,
    restricted_kernel,
)

__all__ = [
    "ConstantRecord",
    "SGrid",
    "SliceMeasure",
    "CoareaReport",
    "area_factor",
    "area_factor_secondary",
    "area_integrate",
    "graph_window_haar",
    "window_indicator",
    "tangent_betas",
    "coarea_factor",
    "coarea_factor_closed",
    "slice_measure",
    "coarea_check",
    "coarea_inequality_check",
    "calibrate_coarea_constant",
    "density_constant",
    "sh_ratio",
]


def _seeds(seed, k):
    return [int(s.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for s in replicate_seeds(seed, k)]


@dataclass
class ConstantRecord:
    kind: str
    inputs: dict
    estimate: MeasureEstimate | None = None
    interval: tuple | None = None
    flags: list = field(default_factory=list)

    def to_json(self) -> dict:
        e = self.estimate
        out = {"kind": self.kind, "inputs": self.inputs,
               "value": None if e is None else e.value,
               "std_error": None if e is None else e.std_error,
               "samples": None if e is None else e.samples,
               "seed": None if e is None else e.seed,
               "flags": list(self.flags)}
        if self.interval is not None:
            out["interval"] = [float(x) for x in self.interval]
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def window_indicator(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return lambda p: np.all((p >= lo) & (p <= hi), axis=-1).astype(float)


def _constant_field(field_: TangentField) -> bool:
    b = field_.bases
    return b.strides[0] == 0 or np.all(b == b[:1])


def tangent_betas(normalizer, alg, field_: TangentField, max_unique: int = 32) -> np.ndarray:
    """Spherical densities of the tangent subgroups of a field."""
    N = len(field_)
    if hasattr(normalizer, "beta_field"):
        vals = normalizer.beta_field(alg, field_)
        if vals is not None:
            return np.asarray(vals, dtype=float)
    if _constant_field(field_):
        return np.full(N, normalizer.beta(field_.subgroup(alg, 0)))
    proj = np.einsum("nik,njk->nij", field_.bases, field_.bases)
    keys = np.round(proj.reshape(N, -1), 6)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    if len(uniq) > max_unique:
        raise ValueError(f"{len(uniq)} distinct tangents; use a normalizer that is constant on this family")
    first = [int(np.flatnonzero(inv.ravel() == j)[0]) for j in range(len(uniq))]
    vals = np.array([normalizer.beta(field_.subgroup(alg, i)) for i in first])
    return vals[inv.ravel()]


def _jacobians(splitting: Splitting, field_: TangentField) -> np.ndarray:
    M = splitting.W.basis.T @ splitting.piW_linear
    if field_.bases.shape[2] != splitting.W.dim:
        raise NotAGraph("tangent dimension differs from dim W")
    return np.abs(np.linalg.det(np.einsum("ij,njk->nik", M, field_.bases)))


# --------------------------------------------------------------------------
# area

def area_factor(P: HomSubgroup, splitting: Splitting, dist: HomDistance, normalizer=None,
                budget: Budget | None = None, seed: int = 0, validate: bool = False,
                rtol: float = 0.02) -> MeasureEstimate:
    """``𝒜(P) = β_P / (β_W J)``; with ``validate`` the image-measure route must agree."""
    normalizer = normalizer or SphericalNormalizer(dist, budget, seed)
    J = splitting.graph_jacobian(P)
    if P.dim != splitting.W.dim or J < 1e-12:
        raise NotAGraph("pi_W restricted to P is not injective")
    mP, mW = normalizer.measure(P), normalizer.measure(splitting.W)
    val = mP.beta / (mW.beta * J)
    # P = W shares one normalization, so the ratio carries no error
    rel = 0.0 if mP is mW else np.hypot(mP.beta_std_error / mP.beta, mW.beta_std_error / mW.beta)
    est = MeasureEstimate(val, val * rel, mP.theta.samples + mW.theta.samples, seed)
    if validate:
        alt = area_factor_secondary(P, splitting, dist, normalizer, budget, seed)
        gap = abs(alt.value - est.value)
        if gap > 3 * np.hypot(alt.std_error, est.std_error) + rtol * est.value:
            raise RoutesDisagree(f"area factor routes disagree: {est.value:.6g} vs {alt.value:.6g}")
    return est


def _image_volume(P, S, dist, c, u=None, points=4096, seed=0, replicates=1):
    """``Leb_W(pi_W(B(c, 1/2) ∩ P))`` by testing graph points of ``P`` over a ``W`` box."""
    alg = P.algebra
    p0 = c @ P.projector
    R = float(dist.dist(p0, c)) + 0.5
    half = R ** P.weights * dist.layer_bounds[np.asarray(P.col_layer) - 1]
    amb = bch_majorant(alg, np.abs(p0), np.abs(P.basis) @ half)
    wb = np.abs(S.W.basis).T @ bch_majorant(alg, amb, np.abs(S.piV_matrix) @ amb)
    wb = np.maximum(wb, 1e-9)
    graph = subgroup_graph(P, S, -wb, wb)
    graph.memo_enabled = False
    vol = float(np.prod(2 * wb))

    def f(uu):
        pts, ok = graph.points(graph.w_points(uu))
        return vol * (ok & (dist.dist(c, pts) <= 0.5))

    if u is not None:
        return float(np.mean(f(u)))
    return qmc_mean(f, S.W.dim, points, replicates, seed)


def area_factor_secondary(P: HomSubgroup, splitting: Splitting, dist: HomDistance, normalizer=None,
                          budget: Budget | None = None, seed: int = 0, starts: int = 8) -> MeasureEstimate:
    """``𝒜(P) = 1 / sup_E ψ_W(pi_W(E ∩ P))`` over balls ``E`` of diameter one.

    The image of ``E ∩ P`` is measured directly through membership tests of
    graph points, so the constant Jacobian is not used.
    """
    budget = budget or Budget()
    normalizer = normalizer or SphericalNormalizer(dist, budget, seed)
    comp = P.orth_complement
    k = comp.shape[1]
    s_coarse, s_final = _seeds(seed, 2)
    u = sobol(splitting.W.dim, budget.points, s_coarse)
    obj = lambda y: -_image_volume(P, splitting, dist, comp @ y, u=u)
    if k == 0:
        best = np.zeros(0)
    else:
        bounds = dist.coord_bounds() @ np.abs(comp)
        y0s = [np.zeros(k)] + list((sobol(k, starts, s_coarse + 1)[: starts - 1] - 0.5) * bounds)
        runs = []
        for y0 in y0s:
            simplex = np.vstack([y0, y0 + 0.15 * np.diag(np.maximum(bounds, 1e-3))])
            r = minimize(obj, y0, method="Nelder-Mead",
                         options={"maxfev": budget.maxfev, "initial_simplex": simplex, "xatol": 1e-4})
            runs.append((r.fun, r.x))
        best = min(runs, key=lambda t: t[0])[1]
    sup = _image_volume(P, splitting, dist, comp @ best, points=budget.final_points,
                        seed=s_final, replicates=budget.replicates)
    bW = normalizer.measure(splitting.W)
    val = 1.0 / (bW.beta * sup.value)
    rel = np.hypot(sup.std_error / sup.value, bW.beta_std_error / bW.beta)
    return MeasureEstimate(val, val * rel, sup.samples, seed)


def area_integrate(graph: IntrinsicGraph, h, normalizer, budget: Budget | None = None, seed: int = 0,
                   density=None, report: dict | None = None) -> MeasureEstimate:
    """``∫_A h(Φ(w)) 𝒜(T_{Φ(w)}) dψ_W(w)`` by randomized QMC over the domain box.

    ``density(points, tangents)`` optionally multiplies the integrand.  Points
    where the implicit solver fails contribute zero and are counted in
    ``report["failures"]``.
    """
    budget = budget or Budget()
    alg = graph.algebra
    S = graph.splitting
    vol = graph.volume
    fails = [0]

    def f(u):
        pts, ok = graph.points(graph.w_points(u))
        out = np.zeros(len(u))
        fails[0] += int((~ok).sum())
        if not np.any(ok):
            return out
        q = pts[ok]
        hv = np.asarray(h(q), dtype=float)
        nz = hv != 0
        if not np.any(nz):
            return out
        q = q[nz]
        tf = graph.tangent(q)
        val = hv[nz] * tangent_betas(graph_normalizer, alg, tf) / _jacobians(S, tf)
        if density is not None:
            val = val * density(q, tf)
        idx = np.flatnonzero(ok)[nz]
        out[idx] = val
        return vol * out

    graph_normalizer = normalizer
    est = qmc_mean(f, S.W.dim, budget.final_points, budget.replicates, seed, budget.workers)
    if report is not None:
        report["failures"] = report.get("failures", 0) + fails[0]
    return est


def graph_window_haar(P: HomSubgroup, splitting: Splitting, box, normalizer, budget: Budget | None = None,
                      seed: int = 0) -> MeasureEstimate:
    """``β_P Leb_P`` of the part of ``P`` whose ``W``-projection lies in ``[-box, box]``.

    Counts points of ``P`` by projecting them, so it shares nothing with the
    area formula except ``β_P``.
    """
    budget = budget or Budget()
    alg = P.algebra
    S = splitting
    box = np.asarray(box, float)
    wb_amb = np.abs(S.W.basis) @ box
    amb = bch_majorant(alg, wb_amb, np.abs(S.piV_matrix) @ bch_majorant(alg, wb_amb, wb_amb))
    amb = bch_majorant(alg, wb_amb, amb)
    pb = np.abs(P.basis).T @ amb
    vol = float(np.prod(2 * pb))

    def f(u):
        x = P.from_coords((2 * u - 1) * pb)
        w = S.W.to_coords(S.pi_W(x))
        return vol * np.all(np.abs(w) <= box, axis=1)

    est = qmc_mean(f, P.dim, budget.final_points, budget.replicates, seed, budget.workers)
    return est.scale(normalizer.beta(P))


# --------------------------------------------------------------------------
# coarea factor

def _section(P: HomSubgroup, L: HomMorphism, K: HomSubgroup):
    """Orthonormal ``B_H`` spanning the complement of ``K_1`` in ``P_1`` and ``L B_H``."""
    Q = P.layer_basis(1)
    K1 = K.layer_basis(1)
    Hc = null_space((Q.T @ K1).T) if K1.shape[1] else np.eye(Q.shape[1])
    BH = Q @ Hc
    return BH, L.matrix @ BH


def coarea_factor_closed(P: HomSubgroup, L: HomMorphism, normalizer) -> MeasureEstimate:
    """``𝒞 = β_L β_K |det L_H| / β_P`` from Fubini on the coset decomposition."""
    ell = L.target.dim
    if L.rank_on(P) < ell:
        return MeasureEstimate(0.0, 0.0, 0, 0)
    K = restricted_kernel(P, L)
    _, LH = _section(P, L, K)
    mK, mP = normalizer.measure(K), normalizer.measure(P)
    val = euclidean_beta(ell) * mK.beta * abs(np.linalg.det(LH)) / mP.beta
    rel = np.hypot(mK.beta_std_error / mK.beta, mP.beta_std_error / mP.beta)
    return MeasureEstimate(val, val * rel, mK.theta.samples + mP.theta.samples, int(mP.theta.seed))


def coarea_factor(P: HomSubgroup, L: HomMorphism, dist: HomDistance, normalizer=None,
                  budget: Budget | None = None, seed: int = 0, cells: int | None = None,
                  richardson: bool = True) -> MeasureEstimate:
    """Coarea factor by slicing a window of ``P`` into cosets of ``K = P ∩ ker L``.

    The window is the unit box of ``P``'s coordinates.  Each slice
    ``L^{-1}(s)`` is the coset ``h(s)·K`` for a linear section ``h`` and its
    measure ``β_K Leb_K`` is estimated by QMC; the ``s``-integral uses
    midpoint cells (Richardson-combined with the doubled grid) and the total
    is divided by ``ψ(window) = β_P``.  Returns exactly zero when ``L`` does
    not map ``P`` onto the target.
    """
    budget = budget or Budget()
    normalizer = normalizer or SphericalNormalizer(dist, budget, seed)
    alg = P.algebra
    ell = L.target.dim
    if L.rank_on(P) < ell:
        return MeasureEstimate(0.0, 0.0, 0, int(seed))
    K = restricted_kernel(P, L)
    BH, LH = _section(P, L, K)
    sec = BH @ np.linalg.inv(LH)  # h(s) = sec @ s
    Lm = L.restrict(P)
    s_half = 0.5 * np.sum(np.abs(Lm), axis=1)
    cells = cells or (24 if ell == 1 else 10)
    x_amb = np.abs(P.basis) @ np.full(P.dim, 0.5)

    def slices(nc):
        g = [np.linspace(-s_half[i], s_half[i], nc + 1) for i in range(ell)]
        mids = [0.5 * (a[1:] + a[:-1]) for a in g]
        S = np.stack(np.meshgrid(*mids, indexing="ij"), -1).reshape(-1, ell)
        cell = float(np.prod([a[1] - a[0] for a in g]))
        return S, cell

    def total(nc, u):
        S, cell = slices(nc)
        hs = S @ sec.T  # (C, n)
        hb = np.max(np.abs(hs), axis=0)
        kb = np.abs(K.basis).T @ bch_majorant(alg, hb, x_amb)
        kb = np.maximum(kb, 1e-12)
        vol = float(np.prod(2 * kb))
        k = K.from_coords((2 * u - 1) * kb)
        acc = 0.0
        for c in range(len(S)):
            x = multiply(alg, hs[c], k)
            a = P.to_coords(x)
            acc += vol * np.mean(np.all(np.abs(a) <= 0.5, axis=1))
        return acc * cell

    def f(u):
        m1 = total(cells, u)
        if not richardson:
            return np.array([m1])
        m2 = total(2 * cells, u)
        return np.array([(4 * m2 - m1) / 3])

    raw = qmc_mean(f, K.dim, budget.points, budget.replicates, seed, budget.workers)
    mK, mP = normalizer.measure(K), normalizer.measure(P)
    scale = euclidean_beta(ell) * mK.beta / mP.beta
    val = raw.value * scale
    rel = np.hypot(mK.beta_std_error / mK.beta, mP.beta_std_error / mP.beta)
    se = float(np.hypot(raw.std_error * scale, val * rel))
    return MeasureEstimate(val, se, raw.samples, int(seed))


# --------------------------------------------------------------------------
# slicing

@dataclass
class SGrid:
    """Midpoint cells of a box in the slicing target ``R^l``."""

    lo: np.ndarray
    hi: np.ndarray
    cells: tuple

    def __post_init__(self):
        self.lo = np.atleast_1d(np.asarray(self.lo, float))
        self.hi = np.atleast_1d(np.asarray(self.hi, float))
        self.cells = tuple(np.broadcast_to(self.cells, self.lo.shape).tolist())

    @property
    def dim(self):
        return len(self.lo)

    @property
    def cell_volume(self) -> float:
        return float(np.prod((self.hi - self.lo) / np.asarray(self.cells)))

    def midpoints(self) -> np.ndarray:
        axes = [self.lo[i] + (np.arange(c) + 0.5) * (self.hi[i] - self.lo[i]) / c
                for i, c in enumerate(self.cells)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, self.dim)

    def refined(self) -> "SGrid":
        return SGrid(self.lo, self.hi, tuple(2 * c for c in self.cells))


@dataclass
class SliceMeasure:
    grid: SGrid
    midpoints: np.ndarray
    per_slice: list
    psi_l: float
    bad_cells: list
    uncertainty: float
    failures: int = 0
    refined_total: MeasureEstimate | None = None

    @property
    def total(self) -> MeasureEstimate:
        if self.refined_total is not None:
            return self.refined_total
        good = [e for e in self.per_slice if e is not None]
        if not good:
            return MeasureEstimate(0.0, 0.0, 0, 0)
        return combine(good, [self.psi_l * self.grid.cell_volume] * len(good))

    def csv_rows(self):
        yield ["s" + str(i) for i in range(self.grid.dim)] + ["value", "std_error", "samples", "status"]
        for s, e in zip(self.midpoints, self.per_slice):
            if e is None:
                yield list(map(float, s)) + ["", "", 0, "bad"]
            else:
                yield list(map(float, s)) + [e.value, e.std_error, e.samples, "ok"]


def _slice_splitting(g: C1HFunction, q, seed):
    """Split-regularity witness for ``g`` at ``q`` or ``None``."""
    A = g.horizontal_differential(q)[0]
    D = extend_horizontal(A, g.source, g.target)
    if not D.is_surjective_on():
        return None
    K = kernel(D)
    try:
        V = find_horizontal_complement(K, seed=seed)
    except NotFound:
        return None
    return make_splitting(K, V)


def slice_measure(sigma: IntrinsicGraph | None, f: C1HFunction | None, u: C1HFunction, window,
                  s_grid: SGrid, normalizer, budget: Budget | None = None, seed: int = 0,
                  h=None, f_value=None, richardson: bool = False) -> SliceMeasure:
    """``∫_L ∫_{Σ ∩ u^{-1}(s)} h dψ dψ_L(s)`` on midpoint cells of ``s_grid``.

    Each slice is the level set of the combined map ``(u, f)`` at ``(s, b)``,
    turned into an intrinsic graph and integrated with the area formula.
    Cells whose reference point is not split-regular are excluded from the
    total; their cell weight times the largest good slice value is reported
    as ``uncertainty``.  ``sigma`` is only used for its splitting reference
    and may be ``None``.
    """
    budget = budget or Budget()
    lo, hi = (np.asarray(a, float) for a in window)
    alg = u.source
    g = combine_maps(u, f)
    b_f = np.zeros(0 if f is None else f.target.dim) if f_value is None else np.atleast_1d(f_value)
    ind = window_indicator(lo, hi)
    hh = ind if h is None else (lambda p: h(p) * ind(p))
    psi_l = euclidean_beta(u.target.dim)

    def run(grid, seed_):
        mids = grid.midpoints()
        seeds = _seeds(seed_, len(mids) + 1)
        centre = 0.5 * (lo + hi)
        S0 = _slice_splitting(g, centre[None], seeds[-1])
        per, bad, fails = [], [], 0
        for c, s in enumerate(mids):
            target = np.concatenate([s, b_f])
            est = None
            if S0 is not None:
                v, status, _ = implicit_solve_batch(g, centre[None], target, S0)
                if status[0] == 0:
                    q = multiply(alg, centre, v[0])[None]
                    Sc = _slice_splitting(g, q, seeds[c])
                    if Sc is not None:
                        wb = w_box_bounds(Sc, lo, hi)
                        graph = level_set_as_graph(g, target, Sc, -wb, wb)
                        rep = {}
                        est = area_integrate(graph, hh, normalizer, budget, seeds[c], report=rep)
                        fails += rep["failures"]
            per.append(est)
            if est is None:
                bad.append(c)
        return mids, per, bad, fails

    mids, per, bad, fails = run(s_grid, seed)
    good_vals = [e.value for e in per if e is not None]
    upper = max(good_vals) if good_vals else float("inf")
    unc = len(bad) * s_grid.cell_volume * psi_l * upper if bad else 0.0
    sm = SliceMeasure(s_grid, mids, per, psi_l, bad, unc, fails)
    if richardson:
        fine = s_grid.refined()
        m2, p2, b2, f2 = run(fine, seed + 1)
        t2 = SliceMeasure(fine, m2, p2, psi_l, b2, 0.0, f2).total
        t1 = sm.total
        sm.refined_total = MeasureEstimate((4 * t2.value - t1.value) / 3,
                                           float(np.hypot(4 * t2.std_error, t1.std_error) / 3),
                                           t1.samples + t2.samples, int(seed))
    return sm



@dataclass
class CoareaReport:
    lhs: MeasureEstimate
    rhs: MeasureEstimate
    z: float
    ratio: float
    bad_contribution: float
    passed: bool
    flags: list = field(default_factory=list)
    slices: SliceMeasure | None = None

    def to_json(self) -> dict:
        return {"lhs": self.lhs.to_dict(), "rhs": self.rhs.to_dict(), "z": self.z, "ratio": self.ratio,
                "bad_contribution": self.bad_contribution, "passed": self.passed, "flags": self.flags}


def check_coarea_hypothesis(sigma: IntrinsicGraph, f, u: C1HFunction, samples: int = 16, seed: int = 0):
    """At sampled graph points either ``D_H u`` is not onto on the tangent, or
    ``(u, f)`` is split-regular.  Raises ``HypothesisViolated`` with the point."""
    g = combine_maps(u, f)
    rng = np.random.default_rng(seed)
    pts, ok = sigma.points(sigma.w_points(rng.uniform(size=(samples, sigma.W.dim))))
    pts = pts[ok]
    tf = sigma.tangent(pts)
    Du = u.horizontal_differential(pts)
    h = u.source.layer_indices(1)
    for i, q in enumerate(pts):
        T1 = tf.bases[i][h][:, np.asarray(tf.col_layer) == 1]
        if np.linalg.matrix_rank(Du[i] @ T1, tol=1e-10) < u.target.dim:
            continue
        if _slice_splitting(g, q[None], seed + i) is None:
            raise HypothesisViolated(q.tolist(), "D_H u is onto on the tangent but (u, f) is not split-regular")


def coarea_check(sigma: IntrinsicGraph, f: C1HFunction | None, u: C1HFunction, h, window, s_grid: SGrid,
                 normalizer, dist: HomDistance, budget: Budget | None = None, seed: int = 0,
                 z_tol: float = 3.0, ratio_tol: float = 0.05, enforce_hypothesis: bool = True,
                 hypothesis_samples: int = 16, max_factor_keys: int = 8) -> CoareaReport:
    """Compare ``∫_Σ h 𝒞(T_pΣ, D_H u_p) dψ`` with the slice integral.

    The left side uses :func:`coarea_factor` for each distinct
    (tangent, differential) pair, falling back to the closed form when more
    than ``max_factor_keys`` distinct pairs occur.
    """
    budget = budget or Budget()
    lo, hi = (np.asarray(a, float) for a in window)
    s_lhs, s_rhs, s_hyp = _seeds(seed, 3)
    if enforce_hypothesis:
        check_coarea_hypothesis(sigma, f, u, hypothesis_samples, s_hyp)
    flags = []
    alg = u.source
    ind = window_indicator(lo, hi)
    hh = (lambda p: h(p) * ind(p))
    cache: dict = {}
    rel_err = [0.0]
    hidx = alg.layer_indices(1)

    def factor(points, tf):
        Du = u.horizontal_differential(points)
        B = np.broadcast_to(tf.bases, (len(points),) + tf.bases.shape[1:])
        proj = np.einsum("nik,njk->nij", B, B).reshape(len(points), -1)
        keys = np.hstack([np.round(proj, 6), np.round(Du.reshape(len(points), -1), 9)]) + 0.0
        uniq, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        vals = np.empty(len(uniq))
        for j, i in enumerate(first):
            kb = uniq[j].tobytes()
            if kb not in cache:
                P = HomSubgroup(alg, np.array(B[i]), tf.col_layer)
                M = np.zeros((u.target.dim, alg.dim))
                M[:, hidx] = Du[i]
                L = HomMorphism(M, alg, u.target)
                if len(cache) < max_factor_keys:
                    e = coarea_factor(P, L, dist, normalizer, budget, seed)
                else:
                    if "closed_form_factor" not in flags:
                        flags.append("closed_form_factor")
                    e = coarea_factor_closed(P, L, normalizer)
                cache[kb] = e
                if e.value > 0:
                    rel_err[0] = max(rel_err[0], e.std_error / e.value)
            vals[j] = cache[kb].value
        return vals[inv.ravel()]

    lhs = area_integrate(sigma, hh, normalizer, budget, s_lhs, density=factor)
    # the factor's own error is common to every point
    lhs = MeasureEstimate(lhs.value, float(np.hypot(lhs.std_error, lhs.value * rel_err[0])), lhs.samples, lhs.seed)
    sm = slice_measure(sigma, f, u, (lo, hi), s_grid, normalizer, budget, s_rhs, h=h)
    rhs = sm.total
    z = lhs.z_score(rhs)
    if lhs.value == 0 and rhs.value == 0:
        ratio, z = 1.0, 0.0
    else:
        ratio = lhs.value / rhs.value if rhs.value else float("inf")
    if sm.bad_cells:
        flags.append(f"bad_cells={len(sm.bad_cells)}")
    passed = abs(z) <= z_tol and abs(ratio - 1) <= ratio_tol
    if lhs.value == 0 and rhs.value == 0:
        passed = True
    if z_tol == 0 and not (lhs.value == rhs.value):
        passed = False
    return CoareaReport(lhs, rhs, float(z), float(ratio), sm.uncertainty, passed, flags, sm)



def calibrate_coarea_constant(instances, dist: HomDistance, normalizer, samples: int = 4096) -> float:
    """Empirical ``C(L) = max 𝒞(P, L) / Lip(L|_P)^l`` over subgroup instances."""
    best = 0.0
    for P, L in instances:
        c = coarea_factor_closed(P, L, normalizer).value
        lip = restricted_norm(L, P, dist, samples)
        if lip > 0:
            best = max(best, c / lip ** L.target.dim)
    return best


def restricted_norm(L: HomMorphism, P: HomSubgroup, dist: HomDistance, samples: int = 4096) -> float:
    """``sup |L p|`` over sampled points of the unit sphere of ``P``."""
    rng = np.random.default_rng(0)
    g = P.from_coords(rng.normal(size=(samples, P.dim)))
    p = dilate(P.algebra, 1.0 / dist.norm(g), g)
    return float(np.max(np.linalg.norm(L(p), axis=1)))


@dataclass
class InequalityReport:
    lhs: MeasureEstimate
    rhs: float
    constant: float
    lipschitz: float
    surface: MeasureEstimate
    rhs_std_error: float = 0.0

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs.value

    @property
    def holds(self) -> bool:
        return self.lhs.value <= self.rhs + 3 * float(np.hypot(self.lhs.std_error, self.rhs_std_error))


def coarea_inequality_check(sigma: IntrinsicGraph, f, u: C1HFunction, window, s_grid: SGrid, normalizer,
                            constant: float, budget: Budget | None = None, seed: int = 0,
                            lipschitz: float | None = None) -> InequalityReport:
    """``μ_{Σ,u}(K) <= C Lip(u|_K)^l ψ(Σ ∩ K)`` on a box ``K``."""
    lo, hi = (np.asarray(a, float) for a in window)
    s1, s2 = _seeds(seed, 2)
    lhs = slice_measure(sigma, f, u, (lo, hi), s_grid, normalizer, budget, s1).total
    surf = area_integrate(sigma, window_indicator(lo, hi), normalizer, budget, s2)
    lip = lipschitz if lipschitz is not None else estimate_lipschitz(u, lo, hi, seed=seed)
    scale = constant * lip ** u.target.dim
    return InequalityReport(lhs, scale * surf.value, constant, lip, surf, scale * surf.std_error)


# --------------------------------------------------------------------------
# density and ratio

def density_constant(P: HomSubgroup, dist: HomDistance, normalizer=None, budget: Budget | None = None,
                     seed: int = 0) -> MeasureEstimate:
    """``𝔡(P) = ψ(P ∩ B(0, 1)) = β_P Leb_P(P ∩ B(0, 1))``."""
    budget = budget or Budget()
    normalizer = normalizer or SphericalNormalizer(dist, budget, seed)
    m = normalizer.measure(P)
    vol = ball_volume(P, dist, np.zeros(P.algebra.dim), 1.0, budget.final_points, seed, budget.replicates)
    val = m.beta * vol.value
    se = float(np.hypot(m.beta * vol.std_error, vol.value * m.beta_std_error))
    return MeasureEstimate(val, se, vol.samples, int(seed))


def sh_ratio(P: HomSubgroup, dist: HomDistance, normalizer=None) -> ConstantRecord:
    """Interval for ``𝔞(P) = β_S / β_H`` from the Hausdorff bracket, clipped to ``[1, 2^d]``."""
    normalizer = normalizer or SphericalNormalizer(dist)
    lower_h, upper_h = hausdorff_bracket(P, dist, normalizer)
    b = normalizer.beta(P)
    lo, hi = b / upper_h, b / lower_h
    cap = 2.0 ** P.d
    flags = ["hausdorff_bracket_only"]
    clo, chi = max(lo, 1.0), min(hi, cap)
    if (clo, chi) != (lo, hi):
        flags.append("clipped")
    return ConstantRecord("ratio", {"subgroup": P.key(), "d": P.d, "distance": dist.key()},
                          None, (clo, chi), flags)
