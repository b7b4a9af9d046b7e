"""
Exception hierarchy for the workbench engines.
"""


class WorkbenchError(Exception):
    """Base class for workbench errors."""


class DynamicsDomainError(ValueError):
    """State outside the domain of the single-track model."""


class TrackSpecError(ValueError):
    """Invalid track segment specification."""


class RankDeficiencyError(WorkbenchError):
    """PCE regression matrix too ill-conditioned; germ points must be re-drawn."""


class UncertaintyDivergenceError(WorkbenchError):
    """A propagated sample left the physical envelope."""

    def __init__(self, message: str, node: int = -1):
        super().__init__(message)
        self.node = node


class ProblemDataError(ValueError):
    """OCP data with wrong dimensions or violating a precondition."""


class NonFiniteStateError(WorkbenchError):
    """Closed loop produced NaN/Inf in the plant state."""

    def __init__(self, message: str, step: int = -1):
        super().__init__(message)
        self.step = step
        # partial run result attached by the closed loop, if any
        self.partial = None


class CheckpointError(WorkbenchError):
    """Checkpoint missing, unreadable or incompatible with the policy spec."""
