"""Exception hierarchy shared by all regbound modules."""

from __future__ import annotations


class RegBoundError(Exception):
    """Base class for every error raised by regbound."""


class InvalidScenario(RegBoundError, ValueError):
    """A scenario violates one of its invariants."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems) or "invalid scenario")


class SingularFim(RegBoundError, ArithmeticError):
    """A Fisher information matrix (or Schur complement) is numerically singular."""

    def __init__(self, message, condition=float("inf")):
        self.condition = condition
        super().__init__(message)


class SingularScatter(RegBoundError, ArithmeticError):
    """The weighted CP scatter matrix Psi is numerically singular."""


class AssumptionViolated(RegBoundError, ValueError):
    """A closed-form bound was requested outside the assumptions it needs."""


class DegenerateDesign(RegBoundError, ValueError):
    """Control points do not span the space; the affine map is unidentifiable."""


class NonConvergence(RegBoundError, RuntimeError):
    """Iterative fit hit its iteration cap. ``result`` holds the partial fit."""

    def __init__(self, message, result=None):
        self.result = result
        super().__init__(message)
