"""Exception types shared across the package."""


class MfspdeError(Exception):
    """Base class for all package errors."""


class ValidationError(MfspdeError):
    """Rejected input: bad shapes, violated standing assumptions, malformed config."""


class SolverError(MfspdeError):
    """A linear solve or regression failed (singular system, rank deficiency)."""


class BlowUpError(SolverError):
    """Non-finite state encountered during time stepping.

    Lipschitz coefficients preclude genuine blow-up, so this almost always
    signals a bug in user-supplied coefficients.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NonConvergenceError(SolverError):
    """An iterative solver hit its iteration cap.

    Carries the residual history so callers can diagnose (and, for damped
    fixed-point iterations, retry with a smaller damping factor).
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []
