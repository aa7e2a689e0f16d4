"""Exception hierarchy for the carnot package."""


class CarnotError(Exception):
    """Base class for every error raised by this package."""


# group specifications

class GroupSpecError(CarnotError):
    pass


class SpecSyntaxError(GroupSpecError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class UnknownSymbol(GroupSpecError):
    def __init__(self, name, line=None):
        self.name = name
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"unknown symbol {name!r}{where}")


class DuplicateBracket(GroupSpecError):
    def __init__(self, a, b, line=None):
        self.pair = (a, b)
        self.line = line
        super().__init__(f"bracket [{a},{b}] declared twice (line {line})")


class GradingViolation(GroupSpecError):
    def __init__(self, i, j, k, line=None):
        self.witness = (i, j, k)
        self.line = line
        where = "" if line is None else f" (line {line})"
        super().__init__(f"[e{i},e{j}] has a component on e{k} outside layer(i)+layer(j){where}")


class JacobiViolation(GroupSpecError):
    def __init__(self, i, j, k):
        self.witness = (i, j, k)
        super().__init__(f"Jacobi identity fails on basis triple {(i, j, k)}")


class UnknownBuiltin(GroupSpecError):
    pass


class BadParameter(GroupSpecError):
    pass


# group arithmetic

class UnsupportedStep(CarnotError):
    pass


class AlgebraMismatch(CarnotError):
    pass


# subgroups and morphisms

class NotBracketClosed(CarnotError):
    def __init__(self, pair):
        self.pair = pair
        super().__init__(f"bracket of basis vectors {pair} leaves the span")


class LayerViolation(CarnotError):
    pass


class BracketViolation(CarnotError):
    pass


class NotNormal(CarnotError):
    pass


class NotComplementary(CarnotError):
    pass


class NotFound(CarnotError):
    """Search budget exhausted. This is never a proof of nonexistence."""


# metric / estimation

class NotHeisenberg(CarnotError):
    pass


class OptimizationBudgetExceeded(CarnotError):
    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


class NonConvergent(CarnotError):
    pass


# calculus on graphs

class ExtrapolationDiverged(CarnotError):
    pass


class DegenerateCoercivity(CarnotError):
    pass


class NoConvergence(CarnotError):
    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"no convergence after {iterations} iterations (residual {residual:.3e})")


class SingularRestriction(CarnotError):
    pass


# measures

class RoutesDisagree(CarnotError):
    pass


class NotAGraph(CarnotError):
    pass


class HypothesisViolated(CarnotError):
    def __init__(self, witness, message="coarea hypothesis violated"):
        self.witness = witness
        super().__init__(f"{message} at {witness}")


# heisenberg

class CodimTooLarge(CarnotError):
    pass


class NotVertical(CarnotError):
    pass


class NotRotationallyInvariant(CarnotError):
    pass


class RepresentativeDisagreement(CarnotError):
    pass


class ShapeMismatch(CarnotError):
    pass
