"""
exceptions raised by guarded_tuning

Each error also subclasses the builtin that callers would expect in the same
place, so ``except ValueError`` keeps working for shape and decode errors.
"""


class GuardedTuningError(Exception):
    """ base class of all guarded_tuning errors """


class DimensionError(GuardedTuningError, ValueError):
    """ tensor shapes do not agree """


class ContractError(GuardedTuningError, ValueError):
    """ a precondition of an operation was violated """


class NonFiniteError(GuardedTuningError, FloatingPointError):
    """ a forward or backward pass produced NaN or Inf """


class ConfigError(GuardedTuningError, ValueError):
    """ invalid configuration

    Args:
        message (str|list): a single message, or a list of field-level messages
    """

    def __init__(self, message):
        self.messages = list(message) if isinstance(message, (list, tuple)) else [message]
        super().__init__('; '.join(self.messages))


class DecodeError(GuardedTuningError, ValueError):
    """ a byte stream is truncated or corrupt

    Args:
        message (str): what is wrong
        offset (int): the byte offset where decoding failed
    """

    def __init__(self, message, offset=0):
        self.offset = offset
        super().__init__(f'{message} (at byte offset {offset})')


class ProtocolError(GuardedTuningError, RuntimeError):
    """ a message arrived out of order or of an unexpected kind """


class InvariantViolation(ProtocolError):
    """ an architecture saw a message it must never see """


class PhaseError(GuardedTuningError):
    """ an experiment phase failed, wraps the original error """

    def __init__(self, phase, error):
        self.phase = phase
        self.error = error
        super().__init__(f'[{phase}] {error.__class__.__name__}: {error}')
