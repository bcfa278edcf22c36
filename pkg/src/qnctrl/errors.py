"""Exception types shared across the package."""


class QnctrlError(Exception):
    """Base class for all package errors."""


class SingularRouting(QnctrlError):
    """Routing matrix has spectral radius at or above 1, traffic equation unsolvable."""


class InfeasibleAction(QnctrlError):
    """Action serves an empty buffer or is otherwise outside the feasible set."""


class ZeroProbabilityAction(QnctrlError):
    """Requested log-probability of an action the law assigns zero mass."""


class InsufficientData(QnctrlError):
    """Dataset too small for the requested fit."""


class CycleBudgetExceeded(QnctrlError):
    """Regenerative episode hit the step cap before completing its cycles."""

    def __init__(self, max_steps, cycles_done):
        super().__init__(
            f"hit step cap {max_steps} after {cycles_done} complete cycles; "
            "the policy is likely unstable"
        )
        self.max_steps = max_steps
        self.cycles_done = cycles_done


class NoCompleteCycle(QnctrlError):
    """Average-cost estimate requested from an episode with no complete cycle."""


class NoRegenerationAfter(QnctrlError):
    """No regeneration time exists after the requested step index."""

    def __init__(self, k):
        super().__init__(f"no regeneration observed after step {k}")
        self.k = k


class RegenerationNeverVisited(QnctrlError):
    """Discounted-value centering requires at least one visit to the regeneration state."""


class NonFiniteParameter(QnctrlError):
    """Network parameters contain NaN or infinity."""


class Diverged(QnctrlError):
    """Iterative solver hit its iteration cap without converging."""


class BoxTooSmall(QnctrlError):
    """Truncation-sensitivity check exceeded its tolerance."""


class Reducible(QnctrlError):
    """Policy-induced chain is not unichain on the truncated box."""


class TooFewCycles(QnctrlError):
    """Regenerative confidence interval needs more cycles."""


class EpisodeTooShort(QnctrlError):
    """Batch-means confidence interval needs a longer episode."""


class UnstablePolicy(QnctrlError):
    """Training aborted because episode generation exceeded its cycle budget."""


class NonFiniteLoss(QnctrlError):
    """Training loss or gradient became NaN or infinite."""


class MissingCheckpoint(QnctrlError):
    """Requested checkpoint file does not exist."""
