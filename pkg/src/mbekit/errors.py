"""Shared exception types."""


class ShapeMismatchError(ValueError):
    """Raised when an op receives incompatible operand shapes."""

    def __init__(self, op, shape_a, shape_b):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}")


class EigenConvergenceError(RuntimeError):
    """Raised when the Jacobi sweep cap is hit before convergence."""

    def __init__(self, sweeps, off_norm, tol):
        self.sweeps = sweeps
        self.off_norm = off_norm
        self.tol = tol
        super().__init__(
            f"eigendecomposition did not converge after {sweeps} sweeps "
            f"(off-diagonal norm {off_norm:.3e}, tolerance {tol:.3e})"
        )


class DegenerateRepresentationError(ValueError):
    """Raised when a representation matrix has (near-)zero trace Gram matrix."""


class NonFiniteValueError(ValueError):
    """Raised when NaN or Inf shows up where finite values are required."""


class NonFiniteLossError(RuntimeError):
    """Raised when a training loss goes NaN/Inf; carries the abort diagnostics."""

    def __init__(self, step, phase, quantity, value):
        self.step = step
        self.phase = phase
        self.quantity = quantity
        self.value = value
        super().__init__(f"non-finite {quantity} ({value}) at step {step}, phase {phase}")


class ConfigError(ValueError):
    """Raised for invalid run configuration (CLI exit code 2)."""
