"""Exception types raised across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class ControlBoundsError(ContractError):
    """A control lies outside the admissible box."""

    def __init__(self, control, bounds, violations):
        self.control = control
        self.bounds = bounds
        self.violations = violations
        lines = [
            f"u[{i}]={control[i]:.6g} not in [{bounds[i][0]:.6g}, {bounds[i][1]:.6g}]"
            for i in violations
        ]
        super().__init__("control out of bounds: " + "; ".join(lines))


class RolloutError(RuntimeError):
    """Numerical integration produced a non-finite state."""


class GenerationError(RuntimeError):
    """Dataset generation could not satisfy its configuration."""


class FitError(RuntimeError):
    """A regression or metric fit could not be completed."""


class ManifoldError(RuntimeError):
    """Constraint extraction failed (degenerate spectra, rank loss, ...)."""


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, corrupted or inconsistent."""

    def __init__(self, path, reason):
        self.path = path
        super().__init__(f"{path}: {reason}")


class ConfigError(ContractError):
    """A pipeline configuration is invalid or unreadable."""
