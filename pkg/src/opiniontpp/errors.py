"""Exception types that map onto the command-line exit-code contract."""


class InputError(ValueError):
    """Bad user input: missing/malformed files, unknown config keys, bad flags."""


class EmptyResultError(RuntimeError):
    """A command produced nothing to act on (e.g. empty test split)."""
