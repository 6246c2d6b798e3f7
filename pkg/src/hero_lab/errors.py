"""Exception types shared across the package.

Every error raised on a contract violation derives from HeroLabError so
callers (and the CLI) can separate our failures from genuine bugs.
"""

from __future__ import annotations


class HeroLabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(HeroLabError):
    """An array did not have the shape a contract requires.

    ``name`` identifies the offending parameter or input when known.
    """

    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


class DataFormatError(HeroLabError):
    """A binary file (IDX or checkpoint) failed structural validation."""


class ConfigError(HeroLabError):
    """An experiment config failed validation.

    Carries every violation found, not just the first one.
    """

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


class NumericalError(HeroLabError):
    """A non-finite loss or gradient aborted an optimization run.

    ``step`` is the global step index at which the abort happened, when
    the failure occurred inside a training loop.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class SearchError(HeroLabError):
    """A numerical search (radius bisection) exhausted its budget."""
