"""Exception taxonomy surfaced by the CLI as ``error: <category>: <detail>``."""


class ToolError(Exception):
    category = "internal"


class ConfigError(ToolError):
    """Bad option value, unknown key, inconsistent preset."""

    category = "config"


class FormatError(ToolError):
    """Malformed file contents (bad magic, truncated payload, wrong field)."""

    category = "format"


class DataError(ToolError):
    """Dataset-level problem: missing shard, empty index, id mismatch."""

    category = "data"
