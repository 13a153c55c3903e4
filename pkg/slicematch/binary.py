# Little-endian binary container helpers: a 4-byte magic, a u32 version, u64 sizes, then f64 arrays.

import struct

import numpy as np

from .exceptions import DataException


def write_sizes(stream, *sizes):
    for size in sizes:
        stream.write(struct.pack("<Q", size))


def read_sizes(stream, path, count):
    raw = stream.read(8 * count)
    if len(raw) != 8 * count:
        raise DataException("%s: truncated size fields" % path)
    return struct.unpack("<%dQ" % count, raw)


def write_header(stream, magic, version, *sizes):
    stream.write(struct.pack("<4sI", magic, version))
    write_sizes(stream, *sizes)


def read_header(stream, path, magic, version, count):
    """
    Check the magic and version of a file, then return its `count` u64 size fields.
    """
    head = stream.read(8)
    if len(head) != 8:
        raise DataException("%s: truncated header" % path)
    found_magic, found_version = struct.unpack("<4sI", head)
    if found_magic != magic:
        raise DataException("%s: bad magic %s, expected %s" % (path, repr(found_magic), repr(magic)))
    if found_version != version:
        raise DataException("%s: unsupported version %d (expected %d)" % (path, found_version, version))
    return read_sizes(stream, path, count)


def write_array(stream, array):
    stream.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def read_array(stream, path, shape):
    """
    Read a row-major f64 array of the given shape.
    """
    size = int(np.prod(shape))
    raw = stream.read(8 * size)
    if len(raw) != 8 * size:
        raise DataException("%s: truncated data, expected %d values" % (path, size))
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def expect_end(stream, path):
    if stream.read(1):
        raise DataException("%s: trailing bytes after data" % path)
