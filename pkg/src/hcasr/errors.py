"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class AsrError(Exception):
    exit_code = 2


class ConfigError(AsrError, ValueError):
    exit_code = 1


class DataError(AsrError, ValueError):
    exit_code = 2


class VerificationError(AsrError):
    exit_code = 3
