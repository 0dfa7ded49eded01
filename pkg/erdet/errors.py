class ErdetError(Exception):
    """Base class for every error this package raises deliberately."""

    pass


class ConfigurationError(ErdetError, ValueError):
    """
    A configuration value, protocol name, strategy name or tensor shape is not usable. These
    never go away on retry.
    """

    pass


class GenerationError(ErdetError):
    """The requested synthetic scene cannot be generated. The message names the constraint."""

    pass


class EmptyStepError(ErdetError):
    """Filtering a partition for an incremental step left no images."""

    pass


class SelectionError(ErdetError):
    """
    Response selection was asked for with no old categories, ie. there is no teacher knowledge
    to select from.
    """

    pass


class SnapshotError(ErdetError):
    """A detector snapshot file is unreadable or does not match the expected head config."""

    pass


class TrainingDivergedError(ErdetError):
    """The training loss became non-finite."""

    pass


class EvaluationError(ErdetError):
    """There is nothing to evaluate: an empty test view, no ground truth or no probe images."""

    pass


class TemporaryFailure(ErdetError):
    """
    Throw exceptions of this type if an error occurs while storing artifacts and it makes sense
    to retry later. Examples might be network failures or running out of disk space.

    If the exception will definitely occur again then any other Exception can be thrown.
    """

    pass


class ArtifactError(ErdetError):
    """A run artifact could not be persisted and retrying will not help."""

    pass
