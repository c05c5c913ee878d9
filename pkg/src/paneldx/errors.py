"""Exception types shared across the package."""


class PaneldxError(Exception):
    """Base class for all package errors."""


class SchemaError(PaneldxError):
    """Input file does not match the declared panel scheme."""


class ParseError(PaneldxError):
    """Malformed input row; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ContractError(PaneldxError):
    """A documented precondition was violated by the caller."""


class NumericError(PaneldxError):
    """Non-finite value produced where a finite one is required."""


class StratificationError(PaneldxError):
    """A stratified split would leave some part without positives."""


class SizeError(PaneldxError):
    """A finite-instance computation exceeds its configured bound."""


class MetricError(PaneldxError):
    """Metric undefined for the given inputs (e.g. single-class AUROC)."""


class ConfigError(PaneldxError):
    """Invalid run configuration; message names the offending field."""
