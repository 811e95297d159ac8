#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
异常类型定义

Every error carries the process exit code the CLI reports for it.
"""


class ActionLLMError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class InputError(ActionLLMError, ValueError):
    """Malformed user input, arguments or files."""

    exit_code = 1


class ParseError(InputError):
    """A text file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{where}{message}")


class ConsistencyError(InputError):
    """Two inputs that must agree (labels vs. features, ...) do not."""


class EmptyObservationError(InputError):
    """Sampling produced no observed positions."""


class DimensionError(InputError):
    """Matrix shapes do not conform."""


class IntegrityError(ActionLLMError):
    """A checkpoint or report failed an integrity or fingerprint check."""

    exit_code = 2


class NumericError(ActionLLMError, ArithmeticError):
    """A loss or gradient became non-finite."""

    exit_code = 3
