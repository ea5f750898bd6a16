"""Exception types shared across the package."""


class PathPruneError(Exception):
    """Base class for all package errors."""


class EmptyDatasetError(PathPruneError):
    """An operation received no records to work on."""


class LifecycleError(PathPruneError):
    """A path was driven through an illegal status transition."""


class CapabilityError(PathPruneError):
    """A backend endpoint lacks a required capability (e.g. logprobs)."""


class EndpointError(PathPruneError):
    """Transport-level failure talking to an HTTP backend."""


class BackendError(PathPruneError):
    """One or more backend calls failed; message aggregates them per query."""


class TruncationError(PathPruneError):
    """The endpoint ran out of context; carries the partial record."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class CollinearityError(PathPruneError):
    """A regression design matrix is rank deficient."""


class ConfigError(PathPruneError):
    """Invalid configuration; message names the offending key path."""


class DependencyError(PathPruneError):
    """A required upstream artifact is missing; message names the file."""
