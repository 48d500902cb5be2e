"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: validation problems (schema, manifest,
contract violations) exit 1, runtime failures exit 2.
"""


class MsfaError(Exception):
    """Base class for all toolkit errors."""


class LoadError(MsfaError):
    """A file is missing, corrupt, truncated, or version-incompatible."""


class SchemaError(MsfaError):
    """A document violates the expected schema; message names the field."""


class ContractError(MsfaError):
    """An operation was called with arguments violating its contract."""


class ManifestError(MsfaError):
    """Experiment manifest validation failed; carries every problem found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("manifest validation failed:\n" +
                         "\n".join(f"  - {p}" for p in self.problems))


class TrainingDiverged(MsfaError):
    """Training hit a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot):
        self.snapshot = dict(snapshot)
        super().__init__(message)
