"""Shared exception types.

InputError marks problems with user-supplied inputs (bad files, bad
configs, schema violations); the CLI maps it to exit code 2. Everything
else is a runtime failure (exit code 1).
"""


class InputError(ValueError):
    pass


class SchemaError(InputError):
    pass


class ConfigError(InputError):
    pass
