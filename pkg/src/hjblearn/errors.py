"""Exception types shared across the package."""


class HjbError(Exception):
    """Base class for package errors."""


class ConfigurationError(HjbError, ValueError):
    """Invalid grid, manifest, hyperparameter or CLI configuration."""


class UsageError(HjbError, ValueError):
    """Dimension mismatch or other misuse of an API."""


class InfeasibleGeometryError(HjbError):
    """Boundary conditions admit no cycloid solution."""


class LabelingError(HjbError):
    """The oracle could not produce a verified label."""


class NotHypersensitiveError(HjbError):
    """Trajectory never dwells near the equilibrium point."""


class ValidationError(HjbError, ValueError):
    """A file or record failed schema/dimension validation."""


class TrainingError(HjbError, RuntimeError):
    """Training produced a non-finite loss."""


class SolveError(HjbError):
    """A warm-started rollout diverged; ``prediction`` holds the network output."""

    def __init__(self, message: str, prediction=None):
        super().__init__(message)
        self.prediction = prediction
