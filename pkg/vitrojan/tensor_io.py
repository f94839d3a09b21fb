#
# Binary record format for named float arrays
#
# See LICENSE.txt for license details.
#
"""
Checkpoints, trigger patterns and raw datasets share one little-endian
record format::

    magic         8 bytes (identifies the kind of file)
    version       3 x uint16 (major, minor, patch)
    count         uint32, number of records
    record * count:
        name_len  uint32
        name      name_len bytes, UTF-8
        ndim      uint32
        dims      ndim x uint64
        values    prod(dims) x float64, little-endian, row-major

A file is decoded completely before anything is returned, so a truncated or
corrupt file never yields a partial result.
"""
import struct

import numpy as np
import semver

from .error import HeaderError, PayloadError, VersionError
from .log import getLogger
from .utils import atomic_write

_logger = getLogger(__name__)

FORMAT_VERSION = '1.0.0'

CHECKPOINT_MAGIC = b'VTJCKPT\x00'
TENSOR_MAGIC = b'VTJTNSR\x00'

_HEADER = struct.Struct('<8s3HI')
_U32 = struct.Struct('<I')
_LE_FLOAT = np.dtype('<f8')


def _check_version(major, minor, patch, source):
    found = semver.VersionInfo(major, minor, patch)
    ours = semver.VersionInfo.parse(FORMAT_VERSION)

    if found.major != ours.major or found.minor > ours.minor:
        raise VersionError(f"{source}: format version {found} is not readable by this version ({ours})")


def encode_records(records, magic):
    """
    Serialize an ordered mapping of name -> array.

    :param records: (dict) arrays keyed by name; values are converted to float64
    :param magic: (bytes) 8-byte file identifier
    :return: (bytes) the encoded file contents
    """
    ours = semver.VersionInfo.parse(FORMAT_VERSION)
    parts = [_HEADER.pack(magic, ours.major, ours.minor, ours.patch, len(records))]

    for name, array in records.items():
        array = np.asarray(array, dtype=np.float64)
        encoded = name.encode('utf-8')
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(array.ndim))
        parts.append(struct.pack(f'<{array.ndim}Q', *array.shape))
        parts.append(np.ascontiguousarray(array).astype(_LE_FLOAT).tobytes())

    return b''.join(parts)


class _Reader:
    def __init__(self, buf, source):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, nbytes):
        end = self.pos + nbytes
        if end > len(self.buf):
            raise PayloadError(f"{self.source}: file is truncated (needed {nbytes} bytes at offset {self.pos})")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode_records(buf, magic, source='<bytes>'):
    """
    Decode the contents of a record file.

    :param buf: (bytes) file contents
    :param magic: (bytes) the expected 8-byte identifier
    :param source: (str) name used in error messages
    :return: (dict) arrays keyed by name, in file order
    :raises HeaderError, VersionError, PayloadError:
    """
    if len(buf) < _HEADER.size:
        raise HeaderError(f"{source}: file is too short to hold a header")

    found_magic, major, minor, patch, count = _HEADER.unpack_from(buf, 0)
    if found_magic != magic:
        raise HeaderError(f"{source}: bad magic {found_magic!r}, expected {magic!r}")

    _check_version(major, minor, patch, source)

    reader = _Reader(buf, source)
    reader.pos = _HEADER.size
    records = {}

    for _ in range(count):
        (name_len,) = reader.unpack('<I')
        try:
            name = reader.take(name_len).decode('utf-8')
        except UnicodeDecodeError:
            raise PayloadError(f"{source}: record name is not valid UTF-8")

        (ndim,) = reader.unpack('<I')
        shape = reader.unpack(f'<{ndim}Q') if ndim else ()
        nvalues = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(nvalues * _LE_FLOAT.itemsize), dtype=_LE_FLOAT)

        if name in records:
            raise PayloadError(f"{source}: duplicate record '{name}'")

        records[name] = values.astype(np.float64).reshape(shape)

    if reader.pos != len(buf):
        raise PayloadError(f"{source}: {len(buf) - reader.pos} unexpected bytes after the last record")

    return records


def write_records(path, records, magic):
    data = encode_records(records, magic)
    with atomic_write(path, 'wb') as f:
        f.write(data)
    _logger.debug(f"Wrote {len(records)} records ({len(data)} bytes) to {path}")


def read_records(path, magic):
    with open(path, 'rb') as f:
        buf = f.read()
    return decode_records(buf, magic, source=path)
