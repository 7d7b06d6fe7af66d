"""Exception types shared across the library."""


class Error(Exception):
    """Base class for all library errors."""


class ConfigurationError(Error):
    """A configuration value violates a structural precondition."""


class DomainError(Error):
    """A point or index lies outside its admissible domain."""


class ShapeError(Error):
    """Blockings or dimensions of two operands do not match."""


class PatternError(Error):
    """A required block is missing from a sparsity pattern."""


class StateError(Error):
    """An operation is illegal in the matrix's current exchange state."""


class ProtocolError(Error):
    """Pairwise exchange metadata disagrees between two ranks."""


class ConsistencyError(Error):
    """Derived data structures disagree (e.g. a cell touches an unmapped row)."""


class UsageError(Error):
    """An API object was used against its contract (e.g. double wait)."""


class DeadlockError(Error):
    """All live ranks are blocked on receives with no messages in flight."""


class RankFailure(Error):
    """One or more rank programs raised; carries per-rank details."""

    def __init__(self, failures):
        self.failures = dict(failures)
        ranks = ", ".join(str(r) for r in sorted(self.failures))
        first = self.failures[min(self.failures)]
        super().__init__(f"rank(s) {ranks} failed; first error: {first!r}")
