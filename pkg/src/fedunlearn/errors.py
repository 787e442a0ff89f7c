"""Exception hierarchy for the simulation harness.

Every failure mode callers are expected to handle gets its own class so
tests and the CLI can react to the category, not the message text.
"""


class FedUnlearnError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FedUnlearnError):
    """Invalid sizes, shapes-of-the-problem, or other setup mistakes."""


class ConfigFileError(ConfigurationError):
    """Config file missing or unreadable."""


class ConfigSyntaxError(ConfigurationError):
    """Config file could not be parsed; carries a line number when known."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class UnknownKeyError(ConfigurationError):
    """Config contains a section or key the schema does not define."""


class InvariantError(ConfigurationError):
    """A resolved config value violates a documented invariant.

    ``field`` names the offending entry as ``section.key``.
    """

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class DomainError(FedUnlearnError):
    """Argument outside its mathematical domain (e.g. temperature <= 0)."""


class NumericError(FedUnlearnError):
    """Non-finite values where finite numbers are required."""


class ShapeError(FedUnlearnError):
    """Mismatched dimensions between models, gradients, or batches."""


class StateError(FedUnlearnError):
    """An object was used out of sequence (stale cache, foreign ledger)."""


class UnknownClientError(FedUnlearnError):
    """Client id not present in the ledger's client universe.

    Distinct from a known client with zero recorded updates, which is a
    valid state and yields a zero vector.
    """


class FormatError(FedUnlearnError):
    """A serialized artifact is corrupt; ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class VersionError(FormatError):
    """Artifact header declares an unsupported format version."""


class PolicyError(FedUnlearnError):
    """A data-hygiene rule would be violated (e.g. target data in the pool)."""


class ArtifactMismatchError(FedUnlearnError):
    """An on-disk artifact was produced by a different config."""


class StageError(FedUnlearnError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
