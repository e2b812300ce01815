"""
ModelParams: a flat, dot-named tree of numpy arrays, and its binary file.

Parameter file layout (little-endian)::

    header   4s magic b'FSBP' | uint32 version (1) | uint32 tensor count | int64 init seed
    tensor   uint32 name length | name (UTF-8) | uint8 dtype code | uint8 rank
             | uint32 dims[rank] | payload (row-major)

dtype codes: 1 = float32, 2 = float64, 3 = int64.
"""

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .exceptions import ParamFileError

PARAM_MAGIC = b'FSBP'
PARAM_VERSION = 1

_HEADER = struct.Struct('<4sIIq')
_DTYPES = {1: np.dtype('<f4'), 2: np.dtype('<f8'), 3: np.dtype('<i8')}
_CODES = {np.dtype('float32'): 1, np.dtype('float64'): 2, np.dtype('int64'): 3}


class ModelParams:
    """Named tensors shared by every layer; buffers are tensors no gradient touches."""

    def __init__(self, tensors=None, seed=0):
        self.tensors = OrderedDict(tensors or {})
        self.seed = int(seed)

    def add(self, name, value):
        if name in self.tensors:
            raise ParamFileError(f'parameter {name!r} registered twice')
        self.tensors[name] = value

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def equals(self, other):
        if self.names() != other.names():
            return False
        return all(
            self[k].dtype == other[k].dtype and np.array_equal(self[k], other[k]) for k in self.tensors
        )


def save_params(params, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [_HEADER.pack(PARAM_MAGIC, PARAM_VERSION, len(params), params.seed)]
    for name, value in params.items():
        value = np.asarray(value)
        code = _CODES.get(value.dtype)
        if code is None:
            raise ParamFileError(f'{name}: unsupported dtype {value.dtype}')
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<BB', code, value.ndim))
        chunks.append(struct.pack(f'<{value.ndim}I', *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype=_DTYPES[code]).tobytes())
    path.write_bytes(b''.join(chunks))


def _read(raw, offset, fmt, path):
    size = struct.calcsize(fmt)
    if offset + size > len(raw):
        raise ParamFileError(f'{path}: truncated parameter file')
    return struct.unpack_from(fmt, raw, offset), offset + size


def load_params(path, expected=None):
    """Read a parameter file; with ``expected`` names and shapes must match exactly."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ParamFileError(f'cannot read {path}: {exc}') from exc
    (magic, version, count, seed), offset = _read(raw, 0, _HEADER.format, path)
    if magic != PARAM_MAGIC:
        raise ParamFileError(f'{path}: not a parameter file')
    if version != PARAM_VERSION:
        raise ParamFileError(f'{path}: parameter file version {version}, expected {PARAM_VERSION}')
    params = ModelParams(seed=seed)
    for _ in range(count):
        (name_len,), offset = _read(raw, offset, '<I', path)
        if offset + name_len > len(raw):
            raise ParamFileError(f'{path}: truncated parameter file')
        name = raw[offset:offset + name_len].decode('utf-8')
        offset += name_len
        (code, rank), offset = _read(raw, offset, '<BB', path)
        if code not in _DTYPES:
            raise ParamFileError(f'{path}: {name} has unknown dtype code {code}')
        dims, offset = _read(raw, offset, f'<{rank}I', path)
        dtype = _DTYPES[code]
        nbytes = dtype.itemsize * int(np.prod(dims, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise ParamFileError(f'{path}: truncated payload for {name}')
        value = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        params.add(name, value.reshape(dims).astype(dtype.newbyteorder('=')))
        offset += nbytes
    if expected is not None:
        check_params(params, expected, path)
    return params


def check_params(params, expected, source='params'):
    unknown = sorted(set(params.names()) - set(expected.names()))
    if unknown:
        raise ParamFileError(f'{source}: unknown tensors {", ".join(unknown)}')
    missing = sorted(set(expected.names()) - set(params.names()))
    if missing:
        raise ParamFileError(f'{source}: missing tensors {", ".join(missing)}')
    wrong = [
        f'{name} {params[name].shape} != {expected[name].shape}'
        for name in expected.names()
        if params[name].shape != expected[name].shape
    ]
    if wrong:
        raise ParamFileError(f'{source}: shape mismatch {"; ".join(wrong)}')
