"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration and parameter problems
exit with 2, data/state problems with 3, numeric aborts with 4.
"""


class CumolosError(Exception):
    exit_code = 3


class ParameterError(CumolosError, ValueError):
    exit_code = 2


class ConfigError(CumolosError, ValueError):
    exit_code = 2

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))


class ShapeError(CumolosError, ValueError):
    pass


class MissingVariableError(CumolosError, LookupError):
    def __init__(self, name, path=None):
        self.name = name
        where = f" in {path}" if path is not None else ""
        super().__init__(f"variable {name!r} not found{where}")

    def __str__(self):
        return self.args[0]


class FieldReadError(CumolosError, OSError):
    pass


class MetadataError(CumolosError, ValueError):
    pass


class StateError(CumolosError, RuntimeError):
    pass


class AlignmentError(CumolosError, ValueError):
    def __init__(self, message, patch_ids=()):
        self.patch_ids = list(patch_ids)
        if self.patch_ids:
            message = f"{message} (offending patch ids: {', '.join(map(str, self.patch_ids))})"
        super().__init__(message)


class NumericError(CumolosError, ArithmeticError):
    exit_code = 4
