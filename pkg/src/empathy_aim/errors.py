"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class AimError(Exception):
    """Base class for every error raised by this package."""


class ParseError(AimError, ValueError):
    pass


class FeatureDimMismatch(ParseError):
    def __init__(self, conversation: str, turn: int | None, expected: int, got: int):
        self.conversation = conversation
        self.turn = turn
        self.expected = expected
        self.got = got
        where = f"turn {turn}" if turn is not None else "header"
        super().__init__(
            f"conversation {conversation!r}, {where}: expected {expected} features, got {got}"
        )


class AlternationViolation(ParseError):
    def __init__(self, conversation: str, index: int):
        self.conversation = conversation
        self.index = index
        super().__init__(
            f"conversation {conversation!r}: turn {index} has the same speaker as turn {index - 1}"
        )


class NonFiniteFeature(ParseError):
    def __init__(self, conversation: str, turn: int):
        self.conversation = conversation
        self.turn = turn
        super().__init__(f"conversation {conversation!r}, turn {turn}: non-finite feature value")


class AlreadyNormalized(AimError):
    pass


class ShapeError(AimError, ValueError):
    pass


class EmptyWindow(AimError, ValueError):
    pass


class EmptyConversation(AimError, ValueError):
    pass


class NonFiniteGradient(AimError, FloatingPointError):
    pass


class NonFiniteLoss(AimError, FloatingPointError):
    pass


class TraceMismatch(AimError):
    pass


class MissingLabel(AimError, ValueError):
    pass


class EmptyHistory(AimError, ValueError):
    pass


class EmptyEvalSet(AimError, ValueError):
    pass


class InvalidFoldCount(AimError, ValueError):
    pass


class ConfigError(AimError, ValueError):
    pass
