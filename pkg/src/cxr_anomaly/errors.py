"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to, so ``cli.main`` can translate
failures without a lookup table.
"""


class PipelineError(Exception):
    exit_code = 1


class ConfigError(PipelineError, ValueError):
    exit_code = 2


class MissingDependencyError(PipelineError):
    exit_code = 3


class DataError(PipelineError, ValueError):
    exit_code = 4


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IngestionError(DataError):
    pass


class TrainingError(PipelineError, RuntimeError):
    pass
