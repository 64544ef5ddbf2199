"""Exception types shared across the package.

ValueError is used for plain invalid arguments; the classes below exist so
the CLI can map failure families to distinct exit codes.
"""


class FormatError(Exception):
    """A file is malformed: bad magic, wrong version, truncated payload."""


class ConfigMismatchError(FormatError):
    """A checkpoint's stored configuration conflicts with the requested one."""


class NumericError(Exception):
    """A numeric failure: non-finite loss, failed gradient check."""
