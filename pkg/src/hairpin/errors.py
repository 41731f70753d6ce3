"""Exception types shared across the package."""


class HairpinError(Exception):
    """Base class for all package errors."""


class OffTrack(HairpinError):
    """Pose lies outside the drivable band around the center line."""


class SingularGeometry(HairpinError):
    """Vehicle is at (or numerically on top of) the curvature center."""


class RankDeficient(HairpinError):
    """Regression matrix is underdetermined or numerically singular."""


class InsufficientData(HairpinError):
    """Not enough stored data for the requested fit or neighbor query."""


class BadProblem(HairpinError):
    """QP data is inconsistent (dimensions, indefinite Hessian)."""


class NoProgress(HairpinError):
    """SQP could not obtain a feasible first subproblem."""


class IncompleteLap(HairpinError):
    """Recorded trajectory never crosses the finish line."""


class PlannerInfeasible(HairpinError):
    """An MPC subproblem has no solution; caller should fall back."""


class NoCorridor(HairpinError):
    """Every candidate overtaking corridor is geometrically infeasible."""


class NoCandidate(HairpinError):
    """Trajectory selection was called with no feasible candidates."""


class EpisodeAbort(HairpinError):
    """Simulation aborted (collision or ego off track)."""


class BadSpec(HairpinError):
    """Scenario specification contains an empty or invalid range."""
