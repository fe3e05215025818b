"""
outlier-preserving quantization of transmitted tensors, and the frame formats
they travel in

Values at or below the p-th percentile (nearest rank) are mapped to b-bit
codes ``round((a - min) / s)`` with ``s = (P_p - min) / (2^b - 1)``; values
above it travel as raw 32-bit floats with their flat position. Rounding is
half away from zero.

Two frame formats share a prefix, so a receiver dispatches on the magic:

* ``GTQF`` quantized frame (see QuantizedFrame)
* ``GTRF`` raw frame, 32-bit values, used when quantization is disabled

Both end in a CRC-32 of everything before it. docs/wire-format.md has the
byte layouts.
"""
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from guarded_tuning.errors import ContractError, DecodeError
from guarded_tuning.tensor import Tensor

logger = logging.getLogger(__name__)

QUANTIZED_MAGIC = b'GTQF'
RAW_MAGIC = b'GTRF'
VERSION = 1
MAX_RANK = 8

_PREFIX = struct.Struct('<4sBIB')          # magic, version, tensor_id, rank
_QPARAMS = struct.Struct('<BBfffI')        # bits, percentile, min, threshold, scale, inlier count
_U32 = struct.Struct('<I')
_OUTLIER = np.dtype([('pos', '<u4'), ('value', '<f4')])


@dataclass(eq=False)
class QuantizedFrame:
    """ the wire representation of one quantized tensor

    codes hold the inlier codes in row-major order, skipping outlier
    positions. The receiver uses scale as serialized, it never recomputes it.
    """
    tensor_id: int
    shape: tuple
    bits: int
    percentile: int
    min_value: np.float32
    threshold: np.float32
    scale: np.float32
    codes: np.ndarray
    outlier_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint32))
    outlier_values: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))

    @property
    def inlier_count(self):
        return int(self.codes.size)

    @property
    def outlier_count(self):
        return int(self.outlier_positions.size)

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, QuantizedFrame):
            return NotImplemented
        return (self.tensor_id == other.tensor_id
                and tuple(self.shape) == tuple(other.shape)
                and self.bits == other.bits
                and self.percentile == other.percentile
                and np.float32(self.min_value).tobytes() == np.float32(other.min_value).tobytes()
                and np.float32(self.threshold).tobytes() == np.float32(other.threshold).tobytes()
                and np.float32(self.scale).tobytes() == np.float32(other.scale).tobytes()
                and np.array_equal(self.codes, other.codes)
                and np.array_equal(self.outlier_positions, other.outlier_positions)
                and self.outlier_values.astype('<f4').tobytes() == other.outlier_values.astype('<f4').tobytes())


@dataclass(eq=False)
class RawFrame:
    tensor_id: int
    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def _flat(values):
    data = values.data if isinstance(values, Tensor) else np.asarray(values)
    return np.ascontiguousarray(data, dtype=np.float32)


def _check_params(bits, percentile):
    if not isinstance(bits, (int, np.integer)) or not 1 <= bits <= 16:
        raise ContractError(f'bits must be an integer in [1, 16], got {bits}')
    if not isinstance(percentile, (int, np.integer)) or not 1 <= percentile <= 100:
        raise ContractError(f'percentile must be an integer in [1, 100], got {percentile}')


def nearest_rank_percentile(values, p):
    """ the ascending-sorted value at 1-indexed position ceil(p / 100 * n) """
    flat = _flat(values).reshape(-1)
    if flat.size == 0:
        raise ContractError('nearest_rank_percentile needs at least one value')
    if not 1 <= p <= 100:
        raise ContractError(f'percentile must be in [1, 100], got {p}')
    rank = max(1, -(-int(p) * flat.size // 100))
    return np.sort(flat, kind='stable')[rank - 1]


def quantize(values, bits, percentile, tensor_id=0):
    """ quantize a tensor, preserving values above the percentile threshold

    Args:
        values (Tensor|np.ndarray): any non-empty shape
        bits (int): code width, 1..16
        percentile (int): threshold percentile, 1..100
        tensor_id (int): carried in the frame header

    Returns:
        QuantizedFrame
    """
    _check_params(bits, percentile)
    data = _flat(values)
    flat = data.reshape(-1)
    if flat.size == 0:
        raise ContractError('cannot quantize an empty tensor')
    threshold = np.float32(nearest_rank_percentile(flat, percentile))
    low = np.float32(flat.min())
    outlier = flat > threshold
    inliers = flat[~outlier]
    levels = (1 << bits) - 1
    if threshold == low:
        scale = np.float32(0.0)
        codes = np.zeros(inliers.size, dtype=np.uint32)
    else:
        scale = np.float32(np.float32(threshold - low) / np.float32(levels))
        ratio = (inliers.astype(np.float64) - np.float64(low)) / np.float64(scale)
        codes = np.clip(np.floor(ratio + 0.5), 0, levels).astype(np.uint32)
    positions = np.flatnonzero(outlier).astype(np.uint32)
    return QuantizedFrame(tensor_id=int(tensor_id), shape=tuple(data.shape), bits=int(bits),
                          percentile=int(percentile), min_value=low, threshold=threshold, scale=scale,
                          codes=codes, outlier_positions=positions,
                          outlier_values=flat[outlier].astype(np.float32))


def dequantize(frame):
    """ code * scale + min at inlier positions, raw values at outlier positions """
    out = np.empty(frame.size, dtype=np.float32)
    inlier = np.ones(frame.size, dtype=bool)
    inlier[frame.outlier_positions] = False
    if inlier.sum() != frame.inlier_count:
        raise DecodeError(f'{frame.inlier_count} codes for {int(inlier.sum())} inlier positions')
    values = frame.codes.astype(np.float64) * np.float64(frame.scale) + np.float64(frame.min_value)
    out[inlier] = values.astype(np.float32)
    out[~inlier] = frame.outlier_values
    return Tensor(out.reshape(frame.shape), dtype=np.float32)


def pack_codes(codes, bits):
    """ concatenate b-bit codes, least significant bit first, into bytes """
    codes = np.asarray(codes, dtype=np.uint32)
    if codes.size and int(codes.max()) >= 1 << bits:
        raise ContractError(f'code {int(codes.max())} does not fit in {bits} bits')
    stream = ((codes[:, None] >> np.arange(bits, dtype=np.uint32)) & 1).astype(np.uint8)
    return np.packbits(stream.reshape(-1), bitorder='little').tobytes()


def unpack_codes(buffer, bits, count):
    stream = np.unpackbits(np.frombuffer(buffer, dtype=np.uint8), bitorder='little')
    used = count * bits
    if stream[used:].any():
        raise ValueError('non-zero padding bits')
    weights = (np.uint32(1) << np.arange(bits, dtype=np.uint32))
    return (stream[:used].reshape(count, bits).astype(np.uint32) * weights).sum(axis=1).astype(np.uint32)


def frame_size(shape, bits, inlier_count, outlier_count):
    """ the encoded size of a quantized frame, in bytes """
    return (_PREFIX.size + 4 * len(shape) + _QPARAMS.size + math.ceil(inlier_count * bits / 8)
            + 4 + 8 * outlier_count + 4)


def raw_frame_size(shape):
    return _PREFIX.size + 4 * len(shape) + 4 * int(np.prod(shape, dtype=np.int64)) + 4


def _prefix(magic, tensor_id, shape):
    if len(shape) > MAX_RANK:
        raise ContractError(f'rank {len(shape)} exceeds {MAX_RANK}')
    return _PREFIX.pack(magic, VERSION, tensor_id, len(shape)) + struct.pack(f'<{len(shape)}I', *shape)


def _seal(body):
    return body + _U32.pack(zlib.crc32(body) & 0xffffffff)


def encode_bytes(frame):
    """ serialize a QuantizedFrame, canonically """
    parts = [
        _prefix(QUANTIZED_MAGIC, frame.tensor_id, frame.shape),
        _QPARAMS.pack(frame.bits, frame.percentile, frame.min_value, frame.threshold,
                      frame.scale, frame.inlier_count),
        pack_codes(frame.codes, frame.bits),
        _U32.pack(frame.outlier_count),
    ]
    outliers = np.empty(frame.outlier_count, dtype=_OUTLIER)
    outliers['pos'] = frame.outlier_positions
    outliers['value'] = frame.outlier_values
    parts.append(outliers.tobytes())
    return _seal(b''.join(parts))


def encode_raw(values, tensor_id=0):
    data = _flat(values)
    return _seal(_prefix(RAW_MAGIC, tensor_id, data.shape) + data.astype('<f4').tobytes())


class _Reader:
    """ sequential reader over a byte buffer, raising DecodeError with the offset """

    def __init__(self, buffer):
        self.view = memoryview(buffer)
        self.offset = 0

    def take(self, count, what):
        if count < 0 or self.offset + count > len(self.view):
            raise DecodeError(f'truncated {what}, need {count} bytes', self.offset)
        chunk = self.view[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt, what):
        return fmt.unpack(self.take(fmt.size, what))


def _open(buffer):
    """ check the CRC trailer and the common prefix, return (reader, magic, tensor_id, shape) """
    buffer = bytes(buffer)
    if len(buffer) < _PREFIX.size + 4:
        raise DecodeError(f'frame of {len(buffer)} bytes is too short', 0)
    body, (crc,) = buffer[:-4], _U32.unpack(buffer[-4:])
    if zlib.crc32(body) & 0xffffffff != crc:
        raise DecodeError('frame checksum mismatch', len(buffer) - 4)
    reader = _Reader(body)
    magic, version, tensor_id, rank = reader.unpack(_PREFIX, 'frame header')
    if magic not in (QUANTIZED_MAGIC, RAW_MAGIC):
        raise DecodeError(f'bad frame magic {bytes(magic)!r}', 0)
    if version != VERSION:
        raise DecodeError(f'unsupported frame version {version}', 4)
    if rank > MAX_RANK:
        raise DecodeError(f'rank {rank} exceeds {MAX_RANK}', 9)
    shape = struct.unpack(f'<{rank}I', reader.take(4 * rank, 'dims'))
    return reader, magic, tensor_id, shape


def decode_bytes(buffer):
    """ parse a GTQF frame into a QuantizedFrame, validating every field """
    reader, magic, tensor_id, shape = _open(buffer)
    if magic != QUANTIZED_MAGIC:
        raise DecodeError(f'expected a quantized frame, got {bytes(magic)!r}', 0)
    at = reader.offset
    bits, percentile, low, threshold, scale, inlier_count = reader.unpack(_QPARAMS, 'quantization header')
    if not 1 <= bits <= 16:
        raise DecodeError(f'bits {bits} out of range', at)
    if not 1 <= percentile <= 100:
        raise DecodeError(f'percentile {percentile} out of range', at + 1)
    if not all(math.isfinite(v) for v in (low, threshold, scale)) or scale < 0:
        raise DecodeError('non-finite or negative quantization parameters', at + 2)
    size = int(np.prod(shape, dtype=np.int64))
    if inlier_count > size:
        raise DecodeError(f'{inlier_count} inliers for {size} values', at + 14)
    at = reader.offset
    try:
        codes = unpack_codes(bytes(reader.take(math.ceil(inlier_count * bits / 8), 'codes')), bits, inlier_count)
    except ValueError as e:
        raise DecodeError(str(e), at) from e
    (outlier_count,) = reader.unpack(_U32, 'outlier count')
    if inlier_count + outlier_count != size:
        raise DecodeError(f'{inlier_count} inliers + {outlier_count} outliers != {size} values', reader.offset - 4)
    at = reader.offset
    outliers = np.frombuffer(bytes(reader.take(8 * outlier_count, 'outliers')), dtype=_OUTLIER)
    positions = outliers['pos'].astype(np.uint32)
    values = outliers['value'].astype(np.float32)
    if positions.size and (np.any(np.diff(positions.astype(np.int64)) <= 0) or int(positions[-1]) >= size):
        raise DecodeError('outlier positions not strictly increasing within the tensor', at)
    if values.size and not np.all(values > np.float32(threshold)):
        raise DecodeError('outlier value at or below the threshold', at)
    if reader.offset != len(reader.view):
        raise DecodeError(f'{len(reader.view) - reader.offset} trailing bytes in frame', reader.offset)
    return QuantizedFrame(tensor_id=tensor_id, shape=tuple(shape), bits=bits, percentile=percentile,
                          min_value=np.float32(low), threshold=np.float32(threshold), scale=np.float32(scale),
                          codes=codes, outlier_positions=positions, outlier_values=values)


def decode_raw(buffer):
    reader, magic, tensor_id, shape = _open(buffer)
    if magic != RAW_MAGIC:
        raise DecodeError(f'expected a raw frame, got {bytes(magic)!r}', 0)
    size = int(np.prod(shape, dtype=np.int64))
    values = np.frombuffer(bytes(reader.take(4 * size, 'values')), dtype='<f4').astype(np.float32)
    if reader.offset != len(reader.view):
        raise DecodeError(f'{len(reader.view) - reader.offset} trailing bytes in frame', reader.offset)
    return RawFrame(tensor_id, values.reshape(shape))


def frame_magic(buffer):
    return bytes(buffer[:4])


class TensorCodec:
    """ encodes tensors for the wire, quantized or raw

    Args:
        enabled (bool): quantize when True, else send raw 32-bit values
        bits (int): code width
        percentile (int): outlier threshold percentile
    """

    def __init__(self, enabled=True, bits=8, percentile=99):
        _check_params(bits, percentile)
        self.enabled = enabled
        self.bits = bits
        self.percentile = percentile

    def __repr__(self):
        if not self.enabled:
            return '<TensorCodec(raw)>'
        return f'<TensorCodec(bits={self.bits}, percentile={self.percentile})>'

    def encode(self, values, tensor_id=0):
        if not self.enabled:
            return encode_raw(values, tensor_id)
        frame = quantize(values, self.bits, self.percentile, tensor_id)
        logger.debug('tensor %d: %d inliers, %d outliers, scale %g',
                     tensor_id, frame.inlier_count, frame.outlier_count, frame.scale)
        return encode_bytes(frame)

    def decode(self, buffer, dtype=np.float32):
        """ decode any frame (dispatching on its magic) to an array of dtype """
        magic = frame_magic(buffer)
        if magic == QUANTIZED_MAGIC:
            return dequantize(decode_bytes(buffer)).data.astype(dtype)
        if magic == RAW_MAGIC:
            return decode_raw(buffer).values.astype(dtype)
        raise DecodeError(f'bad frame magic {magic!r}', 0)
