"""Shared exception base for the qhq stack.

Every module defines its own exception types; they all inherit from
QhqError so callers can catch anything raised by this package in one
clause when they do not care about the stage.
"""


class QhqError(Exception):
    """Base class for all errors raised by qhq."""
