"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: configuration and parsing
problems exit with 2, data problems with 3, numerical failures with 4.
"""


class GparError(Exception):
    """Base class for all errors raised by this package."""


class SpecError(GparError):
    """Invalid configuration: kernel specs, CLI arguments, file formats."""


class KernelSpecError(SpecError):
    """A kernel specification could not be parsed.

    ``path`` locates the offending node in the spec tree, e.g.
    ``"children[1].children[0]"``.
    """

    def __init__(self, message, path=""):
        self.path = path
        where = f" at {path}" if path else ""
        super().__init__(f"{message}{where}")


class DimensionMismatch(GparError):
    """Inputs do not match a kernel's declared dimensionality."""

    def __init__(self, expected, given, what="input"):
        self.expected = expected
        self.given = given
        super().__init__(
            f"{what} dimension mismatch: expected {expected}, got {given}"
        )


class DataError(GparError):
    """Malformed or protocol-violating data."""


class ClosedDownwardsViolation(DataError):
    """An observation pattern breaks the closed-downwards requirement.

    ``row`` and ``output`` identify the earliest offending cell: the
    output is unobserved at that row although a later output (under the
    active ordering) is observed there.
    """

    def __init__(self, row, output, output_name=None):
        self.row = row
        self.output = output
        self.output_name = output_name
        label = f"'{output_name}' (column {output})" if output_name else str(output)
        super().__init__(
            f"data is not closed downwards: row {row} observes a later output "
            f"while output {label} is missing"
        )


class ProtocolError(DataError):
    """A benchmark file does not match its documented canonical layout."""


class NumericalError(GparError):
    """A linear-algebra or optimisation step failed beyond recovery."""


class ModelFormatError(GparError):
    """A persisted model file is corrupt or structurally invalid."""


class ModelVersionError(ModelFormatError):
    """A persisted model uses an unsupported format version."""

    def __init__(self, found, supported):
        self.found = found
        self.supported = supported
        super().__init__(
            f"model file version {found} is not supported "
            f"(this build reads version {supported})"
        )
