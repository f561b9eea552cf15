"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: config problems exit 2,
numeric trouble (domain violations, divergence, failed reconstruction)
exits 3, file-format and I/O problems exit 4.
"""


class ShapeError(ValueError):
    """Array shapes violate an operation's contract."""


class DomainError(ValueError):
    """A numeric input is outside the valid domain (division floor,
    timestep range, degenerate normalization input)."""


class ConfigError(ValueError):
    """Bad, missing, or unknown configuration key/value."""


class FormatError(ValueError):
    """A serialized file (volume or checkpoint) is corrupt or truncated."""


class DivergenceError(RuntimeError):
    """Training or sampling produced a non-finite value."""

    def __init__(self, msg, where=None):
        super().__init__(msg)
        self.where = where


class ReconstructionError(RuntimeError):
    """An invertible node's reconstructed input drifted past tolerance."""

    def __init__(self, node_name, drift, tol):
        super().__init__(
            f"reconstruction drift {drift:.3e} exceeds {tol:.3e} at node {node_name!r}"
        )
        self.node_name = node_name
        self.drift = drift
        self.tol = tol
