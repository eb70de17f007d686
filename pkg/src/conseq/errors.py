"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so keep the taxonomy stable:
configuration problems, shape/domain violations, broken runtime contracts,
and diverged training runs are different failure classes.
"""


class DimensionError(ValueError):
    """Operand shapes or ranks are incompatible."""


class DomainError(ValueError):
    """Input is outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(RuntimeError):
    """A runtime usage contract was violated (caller bug, not bad data)."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, detail: str = ""):
        self.epoch = epoch
        msg = f"training diverged at epoch {epoch}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
