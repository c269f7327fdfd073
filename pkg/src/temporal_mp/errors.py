"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation (e.g. log of 0)."""


class EmptyReductionError(ValueError):
    """A reduction was asked to reduce over zero elements."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class NonFiniteError(FloatingPointError):
    """An operation produced inf or NaN from finite inputs."""


class ParseError(ValueError):
    """Malformed input file; message carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class IntegrityError(ValueError):
    """Input data violates a structural invariant (duplicate keys, bad ids)."""


class ConfigError(ValueError):
    """Invalid or conflicting configuration."""


class SpecError(ConfigError):
    """Infeasible synthetic-data generator specification."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given labels (e.g. no positives)."""
