"""Exception hierarchy for cryosynth.

Every error carries the process exit code the CLI reports for it:
2 for configuration problems, 3 for bad input data and 4 for internal
invariant violations.
"""


class CryosynthError(Exception):
    """Base class for all cryosynth errors."""

    exit_code = 1


class ConfigError(CryosynthError):
    """Invalid, incomplete or unresolvable scene configuration."""

    exit_code = 2


class DataError(CryosynthError):
    """Input data could not be used."""

    exit_code = 3


class InputError(DataError):
    """Argument values violate an operation's preconditions."""


class ParseError(DataError):
    """A text record could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyModelError(DataError):
    """A coordinate file contained no ATOM/HETATM records."""


class SchemaError(DataError):
    """A table lacks required columns or blocks."""


class ContainerError(DataError):
    """A binary container has a malformed header."""


class UnsupportedModeError(ContainerError):
    """A volume container uses a sample encoding we do not read."""


class LengthError(ContainerError):
    """A binary payload is shorter than its header declares."""


class GeometryError(DataError):
    """Geometry violates an operation's topological requirements."""


class CapacityError(DataError):
    """Too few particles could be placed in the available volume."""

    def __init__(self, requested, placed, structure_id=""):
        self.requested = requested
        self.placed = placed
        self.structure_id = structure_id
        label = f" for {structure_id}" if structure_id else ""
        super().__init__(
            f"placed {placed}/{requested} particles{label}"
            f" (shortfall {requested - placed})"
        )


class DegenerateSignalError(DataError):
    """A zero-variance signal cannot be calibrated to a target SNR."""


class InvariantError(CryosynthError):
    """An internal invariant was violated."""

    exit_code = 4


class StageError(CryosynthError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", InvariantError.exit_code)
        super().__init__(f"{stage}: {cause}")
