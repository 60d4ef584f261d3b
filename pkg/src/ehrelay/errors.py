"""Exception types shared across the package."""


class InvalidPolicy(ValueError):
    """A per-state pmf is not a distribution or violates the energy support rule."""


class InfeasibleTransmission(ValueError):
    """The relay tried to send "1" without holding enough energy."""


class NoSteadyState(ValueError):
    """The battery chain is decomposable or lacks a self-loop in its closed class."""


class PlanError(ValueError):
    """Block plan parameters are inconsistent (e.g. epsilon too large)."""


class BudgetExceeded(ValueError):
    """A grid search would exceed the configured evaluation budget."""


class PaddingExhausted(RuntimeError):
    """A per-state codeword ran out of symbols (counted as an incomplete-codeword event)."""

    def __init__(self, state, visits, length):
        super().__init__(f"state {state} visited {visits} times, codeword length {length}")
        self.state = state
        self.visits = visits
        self.length = length
