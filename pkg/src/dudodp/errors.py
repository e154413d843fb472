"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid parameters or configuration (CLI exit code 2)."""


class ContractError(ValueError):
    """Arrays passed to an operation do not satisfy its shape contract."""


class DataError(RuntimeError):
    """Missing or malformed dataset files (CLI exit code 3)."""


class DenoiserUnavailable(RuntimeError):
    """The denoiser could not produce a valid prediction (CLI exit code 4)."""
