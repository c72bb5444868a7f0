"""Exception types shared across the package.

The CLI maps these onto process exit codes; library code raises them
directly so both entry points see the same error surface.
"""


class RbromError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(RbromError):
    """Invalid or inconsistent experiment configuration (exit code 2)."""


class SolverError(RbromError):
    """Linear solve or time integration failure (exit code 3)."""


class ArchiveError(RbromError):
    """Unreadable, truncated or corrupt artifact file (exit code 4)."""


class TrainingError(RbromError):
    """Optimization failed on every restart (exit code 5)."""


class CompatibilityError(RbromError):
    """Artifacts with mismatched dimensions or metadata (exit code 6)."""


class NotPositiveDefiniteError(SolverError):
    """Cholesky hit a non-positive pivot."""


class SingularMatrixError(SolverError):
    """LU pivot is zero to working precision."""


class ConvergenceError(SolverError):
    """An iterative kernel exhausted its sweep or iteration budget."""
