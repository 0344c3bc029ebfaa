"""Exception types raised across ganprop. Input problems are ValueErrors so
callers that only care about "bad input" can catch the base class."""


class ShapeError(ValueError):
    """Dimension mismatch between an input and what a model expects."""

    def __init__(self, what: str, expected, got):
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: expected shape {expected}, got {got}")


class ClassDeficitError(ValueError):
    """A pool does not hold enough samples of some class."""

    def __init__(self, message: str, deficits: dict[int, int], required: dict[int, int] | None = None):
        self.deficits = deficits
        self.required = required or {}
        report = ", ".join(f"class {c}: short by {n}" for c, n in sorted(deficits.items()))
        super().__init__(f"{message} ({report})" if report else message)


class NonFiniteError(ValueError):
    """NaN or Inf showed up in a loss or gradient."""


class ProvenanceError(ValueError):
    """Two datasets that must stay disjoint share samples."""


class StageError(RuntimeError):
    """A harness stage failed. Carries the stage name for CLI diagnostics."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
