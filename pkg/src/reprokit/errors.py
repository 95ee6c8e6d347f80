"""Exception hierarchy.

Every error carries the CLI exit code it maps to, so the command line front
end can translate failures without a lookup table of its own.
"""

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PARSE = 4


class ReproError(Exception):
    exit_code = EXIT_IO


class UsageError(ReproError):
    exit_code = EXIT_USAGE


class ValidationError(ReproError):
    """A value violates a domain invariant.  ``field`` names the offender."""

    exit_code = EXIT_USAGE

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ParseError(ReproError):
    exit_code = EXIT_PARSE

    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class LockConflictError(ParseError):
    def __init__(self, package, versions):
        self.package = package
        super().__init__(
            f"conflicting versions for package {package!r}: " + ", ".join(sorted(versions))
        )


class StoreIOError(ReproError):
    exit_code = EXIT_IO


class SchemaVersionError(ReproError):
    exit_code = EXIT_IO


class ConflictError(ReproError):
    exit_code = EXIT_USAGE


class NotFoundError(ReproError):
    exit_code = EXIT_USAGE

    def __init__(self, message, near_misses=()):
        self.near_misses = list(near_misses)
        if self.near_misses:
            message += " (did you mean: " + ", ".join(self.near_misses) + ")"
        super().__init__(message)


class ConsistencyError(ReproError):
    exit_code = EXIT_USAGE


class IntegrityError(ReproError):
    exit_code = EXIT_IO

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(message)


class SpawnError(ReproError):
    exit_code = EXIT_IO


class StoreWriteError(ReproError):
    """Trial could not be persisted; ``rescue_path`` holds the serialized trial."""

    exit_code = EXIT_IO

    def __init__(self, message, rescue_path):
        self.rescue_path = rescue_path
        super().__init__(f"{message}; trial saved to {rescue_path}")


class ConfigurationError(ReproError):
    exit_code = EXIT_USAGE


class DepositTransportError(ReproError):
    exit_code = EXIT_IO
