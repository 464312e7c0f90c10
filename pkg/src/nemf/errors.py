"""Exception hierarchy shared across the package."""


class NemfError(Exception):
    """Base class for all package errors."""


class ShapeError(NemfError, ValueError):
    """Operand or tensor shapes are inconsistent."""


class FormatError(NemfError):
    """A binary container has the wrong magic bytes or an unknown version."""


class CorruptFileError(NemfError):
    """A container is truncated or otherwise structurally broken."""


class NonFiniteError(NemfError, ValueError):
    """A payload or an intermediate value contains NaN or infinity."""


class NonFiniteLossError(NonFiniteError):
    """Training produced a non-finite loss term."""

    def __init__(self, term: str, step: int, value: float):
        super().__init__(f"non-finite {term} at step {step}: {value!r}")
        self.term = term
        self.step = step
        self.value = value


class GuardError(NemfError, ValueError):
    """A request exceeds the configured evaluation budget."""


class AnnotationError(NemfError, ValueError):
    """A dataset record failed validation."""


class VersionError(FormatError):
    """A container was written by an unsupported format version."""
