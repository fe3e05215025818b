"""
guarded-tuning: privacy-preserving split fine-tuning at desk scale

A model provider (server) keeps the backbone of a transformer and ships the
input and output adapter layers to a data owner (client). The client
fine-tunes across the cut points with decorrelated and quantized activation
frames, or trains fully locally over a compressed emulator.
"""
from guarded_tuning.errors import (GuardedTuningError, DimensionError, ContractError, ConfigError,  # noqa
                                   DecodeError, ProtocolError, InvariantViolation, NonFiniteError,
                                   PhaseError)

__version__ = '0.1'
