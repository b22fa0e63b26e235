"""Exception types shared across the package."""


class PathmkvError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PathmkvError):
    """Inconsistent or malformed inputs: dimension mismatches, bad specs, bad config files."""


class DomainError(PathmkvError, ValueError):
    """Argument outside the mathematical domain of an operation (e.g. t > T, Yosida n <= eta)."""


class CapacityError(PathmkvError):
    """Problem size exceeds what an exact algorithm is allowed to attempt."""

    def __init__(self, message, suggestion=None):
        super().__init__(message if suggestion is None else f"{message} ({suggestion})")
        self.suggestion = suggestion


class IntegrationBlowupError(PathmkvError):
    """A particle produced a non-finite coordinate during time stepping."""

    def __init__(self, step, time, particle):
        super().__init__(
            f"non-finite state at step {step} (t={time:.6g}), first offending particle {particle}"
        )
        self.step = step
        self.time = time
        self.particle = particle


class NonConvergenceError(PathmkvError):
    """Fixed-point iteration failed to reach tolerance; carries the gap history."""

    def __init__(self, gaps, tol):
        super().__init__(
            f"no convergence after {len(gaps)} iterations (last gap {gaps[-1]:.3e}, tol {tol:.3e}); "
            "consider splitting the time window"
        )
        self.gaps = list(gaps)
        self.tol = tol


class ContractError(PathmkvError):
    """A declared invariant of a user-supplied object failed a runtime spot check."""


class UnsupportedFunctionalError(PathmkvError):
    """Derivative operation requested on a functional outside the differentiable class."""
