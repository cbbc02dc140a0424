"""Shared exception base for the package.

Every error raised by cirlite derives from CirliteError so callers (and the
CLI) can catch one type. Specific failure modes get their own subclasses in
the module that raises them.
"""


class CirliteError(Exception):
    """Base class for all cirlite errors."""
