"""Error taxonomy shared across the package.

The CLI maps these onto distinct exit codes, so keep the hierarchy flat and
stable: ConfigError -> 2, ContractError -> 3, VerificationError -> 4.
"""


class CoopAdaptError(Exception):
    """Base class for all package errors."""


class ShapeError(CoopAdaptError):
    """Tensor or field shapes are incompatible with the requested operation."""


class ConfigError(CoopAdaptError):
    """A configuration value or scenario file violates its contract."""


class ContractError(CoopAdaptError):
    """A runtime invariant (finite values, scalar loss, frozen state) broke."""


class VerificationError(CoopAdaptError):
    """The self-check suite found a failing invariant."""
