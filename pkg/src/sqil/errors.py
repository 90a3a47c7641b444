"""Error taxonomy shared by the library and the CLI.

Three categories cover every abort path: bad inputs or configuration
(usage), non-finite numerics (numeric), and file problems, which reuse
the builtin OSError family (io).
"""


class UsageError(ValueError):
    """Invalid argument, shape, mode, or configuration."""


class NumericError(ArithmeticError):
    """A computation produced NaN or infinity and was aborted."""
