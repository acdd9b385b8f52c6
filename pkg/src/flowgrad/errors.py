"""Exception types shared across the package."""


class FlowgradError(Exception):
    """Base class for all flowgrad errors."""


class ConfigError(FlowgradError):
    """Invalid configuration: bad dimensions, schema violations, unknown keys."""


class UsageError(FlowgradError):
    """API misuse: empty tape, zero-size batch, missing inputs."""


class NumericsError(FlowgradError):
    """A non-finite intermediate was produced; message names the layer."""


class InversionError(NumericsError):
    """Numeric inversion (bisection) failed; message names the coordinate."""


class OracleError(FlowgradError):
    """A test oracle (finite differences) hit a non-finite evaluation."""
