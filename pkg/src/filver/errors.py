"""Exception types shared across the package."""


class ContractViolation(Exception):
    """A caller broke a documented precondition (bad shapes, labels, layouts...)."""


class IdxFormatError(ValueError):
    """Base class for IDX parse failures."""


class IdxMagicError(IdxFormatError):
    """Magic number does not identify an IDX image/label file."""


class IdxTruncatedError(IdxFormatError):
    """File ended before the declared payload was read."""


class IdxCountMismatchError(IdxFormatError):
    """Image file and label file declare different item counts."""


class ConfigError(Exception):
    """Invalid experiment configuration; carries every problem found, not just the first."""

    def __init__(self, origin, problems):
        self.origin = origin
        self.problems = list(problems)
        lines = [f"{origin}:"] + [f"  - {p}" for p in self.problems]
        super().__init__("\n".join(lines))
