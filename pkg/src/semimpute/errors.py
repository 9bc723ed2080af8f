"""Exception hierarchy shared by all modules.

Two broad classes matter to callers (and to the CLI exit-code contract):
``InputError`` for anything wrong with user-supplied files, specs, or
arguments, and ``NumericalError`` for failures inside the numerics.
"""


class SemimputeError(Exception):
    """Base class for every error raised by this package."""


class InputError(SemimputeError):
    """Bad user input: files, headers, specs, or argument values."""


class ParseError(InputError):
    """A cell or line could not be parsed; carries row/column context."""

    def __init__(self, message, *, row=None, column=None, line=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column
        self.line = line


class SpecError(InputError):
    """A variable spec or path-model spec violates its invariants."""


class NumericalError(SemimputeError):
    """Numerical failure: singular systems, divergence, non-finite values."""
