"""Exception hierarchy. The CLI maps each family onto its own exit code."""


class BBTError(Exception):
    """Base class for all package errors."""


class ConfigError(BBTError):
    """Malformed, incomplete or inconsistent configuration."""


class UnitError(ConfigError):
    """A dimensioned config field is missing its unit suffix or uses the wrong one."""


class PhysicsError(BBTError):
    """The requested physical model cannot be evaluated."""


class GridError(PhysicsError):
    """Sampling grid too coarse, too small, or a coordinate outside it."""


class ResonanceError(PhysicsError):
    """Trap wavelength sits on top of an atomic line."""


class ConvergenceError(PhysicsError):
    """An iterative solver did not converge."""


class StabilityError(PhysicsError):
    """Integrator time step too large for the trap frequencies."""


class FitError(BBTError):
    """Least-squares fit failed or the data are degenerate."""
