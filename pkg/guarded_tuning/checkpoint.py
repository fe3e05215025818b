"""
checkpoint files: named 32-bit tensors in a little-endian binary container

Layout (see docs/wire-format.md)::

    magic "GTCK" | version u16 | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | values f32 * prod(dims)
"""
import struct
from collections import OrderedDict

import numpy as np

from guarded_tuning.errors import DecodeError
from guarded_tuning.tensor import Tensor

MAGIC = b'GTCK'
VERSION = 1
_HEADER = struct.Struct('<4sHI')


def encode_checkpoint(tensors):
    """ serialize a mapping name => Tensor (or ndarray) to bytes, in mapping order """
    parts = [_HEADER.pack(MAGIC, VERSION, len(tensors))]
    for name, value in tensors.items():
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        encoded = name.encode('utf8')
        parts.append(struct.pack('<H', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack('<B', data.ndim))
        parts.append(struct.pack(f'<{data.ndim}I', *data.shape))
        parts.append(np.ascontiguousarray(data, dtype='<f4').tobytes())
    return b''.join(parts)


def decode_checkpoint(buffer, dtype=np.float32):
    """ parse bytes produced by encode_checkpoint

    Returns:
        OrderedDict name => np.ndarray
    """
    view = memoryview(buffer)
    offset = 0

    def take(count):
        nonlocal offset
        if offset + count > len(view):
            raise DecodeError(f'checkpoint truncated, need {count} bytes', offset)
        chunk = view[offset:offset + count]
        offset += count
        return chunk

    magic, version, count = _HEADER.unpack(take(_HEADER.size))
    if magic != MAGIC:
        raise DecodeError(f'bad checkpoint magic {bytes(magic)!r}', 0)
    if version != VERSION:
        raise DecodeError(f'unsupported checkpoint version {version}', 4)
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack('<H', take(2))
        try:
            name = bytes(take(name_len)).decode('utf8')
        except UnicodeDecodeError as e:
            raise DecodeError('tensor name is not UTF-8', offset) from e
        (rank,) = struct.unpack('<B', take(1))
        shape = struct.unpack(f'<{rank}I', take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(4 * size), dtype='<f4')
        tensors[name] = values.reshape(shape).astype(dtype)
    if offset != len(view):
        raise DecodeError(f'{len(view) - offset} trailing bytes after checkpoint', offset)
    return tensors


def save_checkpoint(path, tensors):
    with open(path, 'wb') as fout:
        fout.write(encode_checkpoint(tensors))


def load_checkpoint(path, dtype=np.float32):
    with open(path, 'rb') as fin:
        return decode_checkpoint(fin.read(), dtype=dtype)
