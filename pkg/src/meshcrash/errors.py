"""Exception types shared across the package."""


class MeshCrashError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MeshCrashError):
    """Arrays with incompatible shapes were combined."""


class ConfigError(MeshCrashError):
    """A configuration value violates its contract."""


class StatsNotFittedError(MeshCrashError):
    """Normalization statistics were used before being fitted."""


class NumericalError(MeshCrashError):
    """A computation produced non-finite values where finite ones are required."""


class DivergenceError(MeshCrashError):
    """A rollout or training run produced non-finite state.

    Carries the step index at which the first non-finite value appeared.
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class SplitError(MeshCrashError):
    """Split construction could not satisfy the diagnostic thresholds.

    ``best_report`` holds the best assignment found before giving up.
    """

    def __init__(self, message: str, best_report=None):
        super().__init__(message)
        self.best_report = best_report
