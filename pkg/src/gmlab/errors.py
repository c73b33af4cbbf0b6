"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, range, length)."""


class NumericError(FloatingPointError):
    """A forward op produced NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite output from op '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class GradError(RuntimeError):
    """Misuse of the backward pass (non-scalar loss, detached loss, reuse)."""
