"""Command line front end.

Exit codes: 0 success, 1 syntax error, 2 algebra violation, 3 estimator
failure, 4 disagreement, 5 hypothesis violation, 64 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from .cache import JsonStore
from .dsl import builtin_from_tag, load_group_spec, parse_group_spec, validate_algebra
from .errors import (
    CarnotError,
    GradingViolation,
    GroupSpecError,
    HypothesisViolated,
    JacobiViolation,
    RepresentativeDisagreement,
    RoutesDisagree,
)
from .metric import Budget, SphericalNormalizer, SubgroupMeasure, box_norm, euclidean, federer_density, koranyi_norm

EXIT_OK, EXIT_SYNTAX, EXIT_ALGEBRA, EXIT_ESTIMATOR, EXIT_DISAGREE, EXIT_HYPOTHESIS = 0, 1, 2, 3, 4, 5
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(s):
    v = int(s)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _nonneg_float(s):
    v = float(s)
    if v < 0:
        raise argparse.ArgumentTypeError("must be nonnegative")
    return v


def load_group(tag: str):
    path = Path(tag)
    if path.suffix or path.exists():
        if not path.exists():
            raise UsageError(f"no such file: {tag}")
        return load_group_spec(path)
    return builtin_from_tag(tag)


def make_distance(alg, tag: str):
    kind, _, rest = tag.partition(":")
    if kind == "koranyi":
        return koranyi_norm(alg)
    if kind == "box":
        eps = [float(x) for x in rest.split(",")] if rest else None
        return box_norm(alg, eps)
    if kind == "euclidean":
        return euclidean(alg)
    raise UsageError(f"unknown distance {tag!r}")


def _subgroup(alg, names):
    from .heisenberg import vertical_subgroup
    from .subgroups import coordinate_subgroup, whole_group

    if names:
        return coordinate_subgroup(alg, names.split(","))
    if alg.name.startswith("heis"):
        return vertical_subgroup(alg, k=1)
    return whole_group(alg)


def _emit(args, payload: dict, rows=None):
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if rows is None:
            keys = sorted(payload)
            w.writerow(keys)
            w.writerow([json.dumps(payload[k], sort_keys=True) if isinstance(payload[k], (dict, list))
                        else payload[k] for k in keys])
        else:
            w.writerows(rows)
        text = buf.getvalue()
    else:
        text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


def _budget(args) -> Budget:
    return Budget(points=args.points, starts=args.starts, final_points=args.final_points,
                  replicates=args.replicates)


def _store(args):
    return None if args.no_cache else JsonStore()


# --------------------------------------------------------------------------
# commands

def cmd_validate(args) -> int:
    path = Path(args.spec)
    if not path.exists():
        print(f"no such file: {path}", file=sys.stderr)
        return EXIT_USAGE
    try:
        alg = parse_group_spec(path.read_text())
    except (GradingViolation, JacobiViolation) as e:
        print(f"algebra violation: {e}")
        return EXIT_ALGEBRA
    except GroupSpecError as e:
        print(f"syntax error: {e}")
        return EXIT_SYNTAX
    report = validate_algebra(alg)
    if not report.ok:
        for v in report.violations:
            print(f"{v.kind}: {v.message} (witness {v.witness})")
        return EXIT_ALGEBRA
    print(f"{alg.name}: valid, dim {alg.dim}, step {alg.step}, layers {alg.layer_dims}, "
          f"{'stratified' if alg.stratified else 'graded only'}")
    return EXIT_OK


def cmd_constants(args) -> int:
    from .heisenberg import c_constant
    from .measures import ConstantRecord, area_factor, density_constant, sh_ratio
    from .metric import heisenberg_rank
    from .subgroups import coordinate_subgroup, make_splitting

    alg = load_group(args.group)
    dist = make_distance(alg, args.dist)
    budget = _budget(args)
    store = _store(args)
    inputs = {"group": args.group, "distance": dist.key(), "budget": budget.key(), "seed": args.seed}
    if args.kind == "heis_c":
        n = heisenberg_rank(alg)
        c = c_constant(n, args.k, dist, budget, args.seed, store)
        rec = ConstantRecord("heis_c", dict(inputs, n=n, k=args.k), c.value,
                             flags=["representatives=" + ",".join(c.representatives)])
    else:
        P = _subgroup(alg, args.subgroup)
        inputs["subgroup"] = args.subgroup or "default"
        norm = SphericalNormalizer(dist, budget, args.seed, store)
        if args.kind == "area":
            if not (args.W and args.V):
                raise UsageError("--kind area needs --W and --V")
            S = make_splitting(coordinate_subgroup(alg, args.W.split(",")),
                               coordinate_subgroup(alg, args.V.split(",")))
            inputs.update(W=args.W, V=args.V)
            rec = ConstantRecord("area_factor", inputs, area_factor(P, S, dist, norm, budget, args.seed))
        elif args.kind == "density":
            rec = ConstantRecord("density", inputs, density_constant(P, dist, norm, budget, args.seed))
        else:
            rec = sh_ratio(P, dist, norm)
            rec.inputs.update(inputs)
            rec.inputs["Q_minus_m"] = P.d
    _emit(args, rec.to_json())
    if rec.estimate is not None:
        print(f"{rec.kind} = {rec.estimate.value:.6g} ± {rec.estimate.std_error:.2g} "
              f"({rec.estimate.samples} samples)", file=sys.stderr)
    return EXIT_OK


# bundled scenarios ---------------------------------------------------------

def _scenario(name: str, dist_tag: str | None, budget, seed):
    from .dsl import builtin
    from .graphs import C1HFunction, full_window, level_set_as_graph, w_box_bounds
    from .heisenberg import VerticalNormalizer, vertical_subgroup
    from .measures import SGrid
    from .subgroups import coordinate_subgroup, hom_morphism, make_splitting

    one = lambda p: np.ones(len(p))
    if name in ("heis1-plane-slice", "heis1-xy"):
        alg = builtin("heis", [1])
        dist = make_distance(alg, dist_tag or "koranyi")
        lo, hi = -0.5 * np.ones(3), 0.5 * np.ones(3)
        sigma = full_window(alg, lo, hi)
        if name == "heis1-plane-slice":
            u = C1HFunction.from_morphism(hom_morphism([[1, 0, 0]], alg, builtin("abelian", [1])))
            grid = SGrid([-0.5], [0.5], 8)
        else:
            u = C1HFunction.from_morphism(hom_morphism([[1, 0, 0], [0, 1, 0]], alg, builtin("abelian", [2])))
            grid = SGrid([-0.5, -0.5], [0.5, 0.5], 4)
        return dict(sigma=sigma, f=None, u=u, h=one, window=(lo, hi), s_grid=grid, dist=dist,
                    normalizer=VerticalNormalizer(dist, budget, seed))
    if name == "heis2-vertical-slice":
        alg = builtin("heis", [2])
        dist = make_distance(alg, dist_tag or "koranyi")
        A1 = builtin("abelian", [1])
        lo, hi = -0.5 * np.ones(5), 0.5 * np.ones(5)
        S = make_splitting(vertical_subgroup(alg, k=1), coordinate_subgroup(alg, ["X1"]))
        f = C1HFunction.from_morphism(hom_morphism([[1, 0, 0, 0, 0]], alg, A1))
        wb = w_box_bounds(S, lo, hi)
        sigma = level_set_as_graph(f, [0.0], S, -wb, wb)
        u = C1HFunction.from_morphism(hom_morphism([[0, 1, 0, 0, 0]], alg, A1))
        return dict(sigma=sigma, f=f, u=u, h=one, window=(lo, hi), s_grid=SGrid([-0.5], [0.5], 8),
                    dist=dist, normalizer=VerticalNormalizer(dist, budget, seed))
    raise UsageError(f"unknown scenario {name!r}")


AREA_SCENARIOS = ("heis1-vertical-plane", "heis1-level-set")


def cmd_area_check(args) -> int:
    from .dsl import builtin
    from .graphs import C1HFunction, level_set_as_graph, subgroup_graph
    from .heisenberg import VerticalNormalizer, vertical_subgroup
    from .measures import area_integrate, graph_window_haar
    from .subgroups import coordinate_subgroup, make_splitting, subgroup_from_vectors

    budget = _budget(args)
    alg = builtin("heis", [1])
    dist = make_distance(alg, args.dist or "koranyi")
    norm = VerticalNormalizer(dist, budget, args.seed, _store(args))
    one = lambda p: np.ones(len(p))
    W = vertical_subgroup(alg, k=1)
    S1 = make_splitting(W, coordinate_subgroup(alg, ["X"]))
    if args.scenario == "heis1-vertical-plane":
        # a tilted vertical plane over a W-box against its own Haar measure
        P = vertical_subgroup(alg, normals=[[1.0, -0.5]])
        box = np.array([0.4, 0.4])
        graph = subgroup_graph(P, S1, -box, box)
        lhs = area_integrate(graph, one, norm, budget, args.seed)
        rhs = graph_window_haar(P, S1, box, norm, budget, args.seed + 1)
    elif args.scenario == "heis1-level-set":
        f = C1HFunction.scalar(alg, lambda p: p[..., 0] + p[..., 2],
                               gradient=lambda p: np.stack([1 - p[..., 1] / 2, p[..., 0] / 2], -1))
        hb = lambda p: np.maximum(0.0, 1 - np.sum(p ** 2, axis=-1) / 0.25) ** 2
        box = np.array([1.0, 1.0])
        W2 = subgroup_from_vectors(alg, [[1, 1, 0], [0, 0, 1]])
        S2 = make_splitting(W2, subgroup_from_vectors(alg, [[1, -1, 0]]))
        g1 = level_set_as_graph(f, [0.0], S1, -box, box)
        g2 = level_set_as_graph(f, [0.0], S2, -box, box)
        lhs = area_integrate(g1, hb, norm, budget, args.seed)
        rhs = area_integrate(g2, hb, norm, budget, args.seed + 1)
    else:
        raise UsageError(f"unknown scenario {args.scenario!r}")
    z = lhs.z_score(rhs)
    payload = {"kind": "area_check", "inputs": {"scenario": args.scenario, "seed": args.seed,
                                                "budget": budget.key(), "distance": dist.key()},
               "lhs": lhs.to_dict(), "rhs": rhs.to_dict(), "z": z, "tolerance": args.tolerance}
    _emit(args, payload)
    return EXIT_OK if abs(z) <= args.tolerance and (args.tolerance > 0 or lhs.value == rhs.value) \
        else EXIT_DISAGREE


def cmd_coarea_check(args) -> int:
    from .measures import coarea_check

    budget = _budget(args)
    sc = _scenario(args.scenario, args.dist, budget, args.seed)
    if args.cells:
        from .measures import SGrid
        g = sc["s_grid"]
        sc["s_grid"] = SGrid(g.lo, g.hi, args.cells)
    try:
        rep = coarea_check(sc["sigma"], sc["f"], sc["u"], sc["h"], sc["window"], sc["s_grid"],
                           sc["normalizer"], sc["dist"], budget, args.seed, z_tol=args.tolerance)
    except HypothesisViolated as e:
        print(f"hypothesis violated at {e.witness}: {e}", file=sys.stderr)
        _emit(args, {"kind": "coarea_check", "inputs": {"scenario": args.scenario, "seed": args.seed},
                     "hypothesis_violated": True, "witness": e.witness, "flags": ["hypothesis_violated"]})
        return EXIT_HYPOTHESIS
    payload = {"kind": "coarea_check",
               "inputs": {"scenario": args.scenario, "seed": args.seed, "budget": budget.key(),
                          "distance": sc["dist"].key(), "tolerance": args.tolerance}}
    payload.update(rep.to_json())
    rows = list(rep.slices.csv_rows()) if args.format == "csv" else None
    _emit(args, payload, rows)
    return EXIT_OK if rep.passed else EXIT_DISAGREE


def cmd_density(args) -> int:
    alg = load_group(args.group)
    dist = make_distance(alg, args.dist)
    budget = _budget(args)
    P = _subgroup(alg, args.subgroup)
    norm = SphericalNormalizer(dist, budget, args.seed, _store(args))
    mu = SubgroupMeasure(P, dist, norm.beta(P))
    x = P.from_coords(np.full(P.dim, 0.1))
    est = federer_density(mu, x, dist, P.d, budget=budget, seed=args.seed)
    payload = {"kind": "federer_density", "inputs": {"group": args.group, "distance": dist.key(),
                                                     "subgroup": args.subgroup or "default",
                                                     "point": x.tolist(), "seed": args.seed},
               "value": est.value, "std_error": est.std_error, "samples": est.samples, "seed": est.seed,
               "flags": []}
    _emit(args, payload)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="carnot", description="Area and coarea computations on Carnot groups.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, group=True):
        if group:
            sp.add_argument("--group", default="heis:1", help="builtin tag (heis:n, abelian:n, engel) or spec file")
        sp.add_argument("--dist", default=None if not group else "koranyi",
                        help="koranyi | box[:eps1,eps2,..] | euclidean")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--points", type=_positive_int, default=4096)
        sp.add_argument("--final-points", type=_positive_int, default=16384)
        sp.add_argument("--replicates", type=_positive_int, default=16)
        sp.add_argument("--starts", type=_positive_int, default=32)
        sp.add_argument("--no-cache", action="store_true", help="bypass the constant cache")
        sp.add_argument("--format", choices=("json", "csv"), default="json")
        sp.add_argument("--output", default=None)

    v = sub.add_parser("validate", help="parse and validate a group spec file")
    v.add_argument("spec")
    v.set_defaults(func=cmd_validate)

    c = sub.add_parser("constants", help="compute a constant record")
    common(c)
    c.add_argument("--kind", choices=("heis_c", "area", "density", "ratio"), required=True)
    c.add_argument("--k", type=int, default=1)
    c.add_argument("--subgroup", default=None, help="comma separated basis names")
    c.add_argument("--W", default=None)
    c.add_argument("--V", default=None)
    c.set_defaults(func=cmd_constants)

    a = sub.add_parser("area-check", help="area formula consistency run")
    common(a, group=False)
    a.add_argument("--scenario", choices=AREA_SCENARIOS, default="heis1-vertical-plane")
    a.add_argument("--tolerance", type=_nonneg_float, default=3.0)
    a.set_defaults(func=cmd_area_check)

    k = sub.add_parser("coarea-check", help="coarea formula consistency run")
    common(k, group=False)
    k.add_argument("--scenario", choices=("heis1-plane-slice", "heis1-xy", "heis2-vertical-slice"),
                   default="heis1-plane-slice")
    k.add_argument("--tolerance", type=_nonneg_float, default=3.0)
    k.add_argument("--cells", type=_positive_int, default=None)
    k.set_defaults(func=cmd_coarea_check)

    d = sub.add_parser("density", help="Federer density of a normalized subgroup measure")
    common(d)
    d.add_argument("--subgroup", default=None)
    d.set_defaults(func=cmd_density)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (GradingViolation, JacobiViolation) as e:
        print(f"algebra violation: {e}", file=sys.stderr)
        return EXIT_ALGEBRA
    except GroupSpecError as e:
        print(f"syntax error: {e}", file=sys.stderr)
        return EXIT_SYNTAX
    except HypothesisViolated as e:
        print(f"hypothesis violated: {e}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except (RoutesDisagree, RepresentativeDisagreement) as e:
        print(f"disagreement: {e}", file=sys.stderr)
        return EXIT_DISAGREE
    except CarnotError as e:
        print(f"estimator failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ESTIMATOR


if __name__ == "__main__":
    sys.exit(main())
