"""Exception hierarchy shared by all modules."""


class TaskModelError(Exception):
    """Base class for every error raised by this package."""


class DomainError(TaskModelError, ValueError):
    """Argument outside the mathematical domain of a function."""


class UsageError(TaskModelError, ValueError):
    """Inconsistent shapes or violated call contracts."""


class ConfigError(TaskModelError, ValueError):
    """Configuration value outside its admissible range."""


class DegeneracyError(TaskModelError, ArithmeticError):
    """The model reached a numerically degenerate state."""


class ParseError(TaskModelError, ValueError):
    """Malformed or invalid corpus file."""


class CheckpointError(TaskModelError, ValueError):
    """Checkpoint could not be loaded (checksum, version, compatibility)."""
