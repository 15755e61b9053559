"""Exception hierarchy.  Each class carries the CLI exit code it maps to."""


class GnpLabError(Exception):
    exit_code = 1


class ConfigError(GnpLabError, ValueError):
    """Invalid configuration or hyperparameter."""

    exit_code = 2


class SpecError(ConfigError):
    """Architecture description that cannot be built."""


class InputError(GnpLabError, ValueError):
    """Rejected input: wrong shape, label out of range, empty batch, ..."""

    exit_code = 2


class DataFormatError(GnpLabError):
    """Malformed file.  ``offset`` is the byte position of the problem, if known."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(GnpLabError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    pass


class CapacityError(GnpLabError):
    """Not enough samples satisfy a selection rule."""

    exit_code = 5

    def __init__(self, message, qualified):
        super().__init__(f"{message} (qualified={qualified})")
        self.qualified = qualified


class UnknownModelError(GnpLabError, LookupError):
    exit_code = 6

    def __init__(self, model_id, known):
        super().__init__(f"unknown model id {model_id!r}; known ids: {', '.join(sorted(known)) or '(none)'}")
        self.model_id = model_id
        self.known = sorted(known)


class ComparisonError(InputError):
    pass
