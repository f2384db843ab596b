"""Exception hierarchy shared across the package.

The CLI maps RagmoeError to exit code 1 (domain error); argparse usage
failures exit 2 on their own.
"""


class RagmoeError(Exception):
    """Base class for all package-level errors."""


class ConfigurationError(RagmoeError):
    """Invalid configuration value; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"configuration field '{field}': {message}")
        self.field = field


class InputError(RagmoeError, ValueError):
    """Operation precondition violated: bad shape, empty set, out-of-range arg."""


class DataFormatError(RagmoeError):
    """Corrupt, truncated, or incompatible on-disk artifact."""


class TrainingDiverged(RagmoeError):
    """Loss became non-finite; ``step`` records where."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss ({value}) at step {step}")
        self.step = step
        self.value = value
