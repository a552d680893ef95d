"""Exception types shared across the package."""


class IdrankError(Exception):
    """Base class for all idrank failures."""


class FormatError(IdrankError):
    """An embedding file is malformed, truncated, or fails its checksum."""


class ValidationError(IdrankError):
    """Data violates a structural invariant or a call precondition."""


class StratumShortfallError(ValidationError):
    """A gender stratum cannot supply the requested number of identities."""

    def __init__(self, stratum: str, required: int, available: int):
        self.stratum = stratum
        self.required = required
        self.available = available
        super().__init__(
            f"stratum {stratum!r}: need {required} identities, only {available} "
            f"eligible (shortfall {required - available})"
        )


class ReportError(IdrankError):
    """Evaluation results cannot be compared or tabulated together."""
