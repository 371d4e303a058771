class ZooscoutError(Exception):
    """Base class for every error the pipeline raises on purpose."""

    exit_code = 1


class UsageError(ZooscoutError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class DataError(ZooscoutError):
    exit_code = 2


class FormatError(DataError):
    pass


class TruncationError(FormatError):
    def __init__(self, path, offset, needed):
        super().__init__(f"{path}: truncated at offset {offset} (needed {needed} more bytes)")
        self.offset = offset
        self.needed = needed


class NumericalError(ZooscoutError):
    exit_code = 3
