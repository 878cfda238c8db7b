"""Exception types shared across the toolkit."""


class ConfigError(Exception):
    """A configuration file or option is missing, malformed, or inconsistent."""


class DataError(Exception):
    """Training data and auxiliary artifacts (e.g. teacher caches) disagree."""


class ParseError(Exception):
    """A corpus file could not be parsed."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no
