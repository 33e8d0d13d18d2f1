"""Exception types shared across the package."""


class ContractViolationError(RuntimeError):
    """A caller-supplied object broke its contract (e.g. a policy returned a
    malformed action distribution, or an expert was queried off its domain)."""


class InconsistentEvidenceError(ValueError):
    """A Bayes filter update was asked to condition on an observation that has
    zero probability under the current belief."""


class ResourceLimitError(RuntimeError):
    """An exact enumeration would exceed the configured size cap."""
