"""Binary descriptor files.

Layout (little-endian): 8-byte magic, u8 version, 3 pad bytes, u64 count,
u32 dimension, 32-byte SHA-256 of the source checkpoint, then
``count * dimension`` float32 values row by row.
"""

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PNNETDSC"
VERSION = 1
_HEADER = struct.Struct("<8sB3xQI32s")
HEADER_SIZE = _HEADER.size


@dataclass
class DescriptorFile:
    descriptors: np.ndarray  # (N, D) float32
    source_hash: bytes = bytes(32)
    version: int = VERSION

    @property
    def count(self):
        return self.descriptors.shape[0]

    @property
    def dim(self):
        return self.descriptors.shape[1]


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).digest()


def encode(descriptors, source_hash=bytes(32)):
    desc = np.asarray(descriptors)
    if desc.ndim != 2:
        raise ValueError(f"descriptors must be 2-D, got shape {desc.shape}")
    if len(source_hash) != 32:
        raise ValueError("source hash must be 32 bytes")
    header = _HEADER.pack(MAGIC, VERSION, desc.shape[0], desc.shape[1], bytes(source_hash))
    return header + np.ascontiguousarray(desc, dtype="<f4").tobytes()


def decode(blob):
    if len(blob) < HEADER_SIZE:
        raise FormatError(f"descriptor file truncated: {len(blob)} bytes")
    magic, version, n, d, source = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError("not a descriptor file (bad magic)")
    if version != VERSION:
        raise FormatError(f"unsupported descriptor file version {version}")
    expected = HEADER_SIZE + 4 * n * d
    if len(blob) != expected:
        raise FormatError(f"descriptor file is {len(blob)} bytes, header implies {expected}")
    values = np.frombuffer(blob, dtype="<f4", offset=HEADER_SIZE).reshape(n, d)
    return DescriptorFile(values.astype(np.float32), source, version)


def write(path, descriptors, source_hash=bytes(32)):
    Path(path).write_bytes(encode(descriptors, source_hash))


def read(path):
    return decode(Path(path).read_bytes())


def dump_text(df, fh):
    """Human-readable form: one header comment, then one row per descriptor."""
    fh.write(f"# count={df.count} dim={df.dim} source={df.source_hash.hex()}\n")
    for row in df.descriptors:
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")
