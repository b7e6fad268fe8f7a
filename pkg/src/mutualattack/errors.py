"""Exception hierarchy for mutualattack.

Every error raised on purpose by the package derives from
:class:`MutualAttackError`. Each subclass also derives from the builtin it
refines, so ``except ValueError`` keeps working for callers that do not
know about this package.
"""


class MutualAttackError(Exception):
    """Base class for all mutualattack errors."""


class InputContractError(MutualAttackError, ValueError):
    """An input violates a shape, range or length contract."""


class DegenerateEmbeddingError(InputContractError):
    """An embedding with zero norm cannot be normalized."""


class VocabularyError(MutualAttackError, KeyError):
    """A token is not part of the backend vocabulary."""

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the message readable.
        return str(self.args[0]) if self.args else ""


class ConfigurationError(MutualAttackError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class TrainingDivergenceError(MutualAttackError, RuntimeError):
    """A loss became non-finite; the offending step was not applied."""


class ExternalDependencyError(MutualAttackError, RuntimeError):
    """An optional package or pretrained artifact is not available."""


class CheckpointError(MutualAttackError, ValueError):
    """A serialized blob has the wrong format tag or version."""


class RunDirectoryLockedError(MutualAttackError, RuntimeError):
    """Another invocation already owns the run directory."""


class InvariantViolationError(MutualAttackError, AssertionError):
    """A training-loop invariant was observed broken at runtime."""
