class NumericalError(RuntimeError):
    """Numerical failure (singular systems, broken descent); CLI exit code 2."""


class SingularSystemError(NumericalError):
    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(message)
        self.condition = condition


class DescentError(NumericalError):
    """The objective increased across a full pass beyond the rounding slack."""


class SelectionError(NumericalError):
    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []
