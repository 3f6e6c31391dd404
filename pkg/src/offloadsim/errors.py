"""Exception hierarchy shared by every module."""


class OffloadSimError(Exception):
    """Base class for all errors raised by offloadsim."""


class DomainError(OffloadSimError, ValueError):
    """An argument is outside the domain an operation is defined on."""


class ConfigError(OffloadSimError):
    """A profile, preset, plan or experiment file is malformed or incomplete."""


class InfeasibleError(OffloadSimError):
    """The requested placement does not fit in the available memory."""
