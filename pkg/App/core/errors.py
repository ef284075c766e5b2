from typing import Optional


class MarMaerError(Exception):
    """
    Base error carrying an exit code and a human-readable detail,
    the CLI counterpart of an HTTP status code + detail pair.
    """
    exit_code: int = 2

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


# Validation errors: bad input, exit code 1

class ValidationFailure(MarMaerError):
    exit_code = 1


class UsageError(ValidationFailure):
    pass


class ConfigError(ValidationFailure):
    pass


class VocabularyError(ValidationFailure):
    pass


class MalformedPromptError(ValidationFailure):
    def __init__(self, position: int, detail: str):
        super().__init__(f"Malformed prompt at position {position}: {detail}")
        self.position = position


class ResolutionError(ValidationFailure):
    pass


class ShapeMismatchError(ValidationFailure):
    pass


class BatchTooSmallError(ValidationFailure):
    pass


class TemperatureError(ValidationFailure):
    pass


# Runtime errors: exit code 2

class RuntimeFailure(MarMaerError):
    exit_code = 2


class DatasetParseError(RuntimeFailure):
    def __init__(self, path, line: int, detail: str):
        super().__init__(f"{path}:{line}: {detail}")
        self.path = path
        self.line = line


class OutputPathError(RuntimeFailure):
    def __init__(self, path, detail: str):
        super().__init__(f"Cannot write {path}: {detail}")
        self.path = path


class CheckpointVersionError(RuntimeFailure):
    pass


class CheckpointTruncatedError(RuntimeFailure):
    pass


class CheckpointShapeError(RuntimeFailure):
    def __init__(self, parameter: str, expected, found):
        super().__init__(
            f"Shape mismatch for parameter '{parameter}': model expects {tuple(expected)}, "
            f"checkpoint has {tuple(found)}"
        )
        self.parameter = parameter


class NonFiniteLossError(RuntimeFailure):
    def __init__(self, component: str, step: int, value: float):
        super().__init__(f"Non-finite {component} at step {step}: {value}")
        self.component = component
        self.step = step
