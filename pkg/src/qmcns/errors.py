class NumericalError(RuntimeError):
    """Base class for numerical failures (CLI exit code 3)."""


class ConfigError(ValueError):
    """Invalid experiment or command-line configuration (CLI exit code 2)."""


class NonConvergence(NumericalError):
    def __init__(self, iterations, last_residual, time_index=None):
        self.iterations = iterations
        self.last_residual = last_residual
        self.time_index = time_index
        super().__init__(
            f"Picard iteration did not converge in {iterations} iterations "
            f"(relative change {last_residual:.3e}, time index {time_index})")


class FieldMagnitudeError(NumericalError):
    """Raised when exp(Z) would overflow."""


class SampleFailure(NumericalError):
    """A single quadrature sample failed; carries its coordinates."""

    def __init__(self, method, N, shift, index, cause):
        self.method = method
        self.N = N
        self.shift = shift
        self.index = index
        self.cause = cause
        super().__init__(f"{method} sample failed at N={N}, shift/batch={shift}, "
                         f"point={index}: {cause}")
