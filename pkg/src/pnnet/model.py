"""The two-layer convolutional descriptor network and its checkpoint format.

Layer stack for a 32x32 grayscale patch (valid convolutions, stride 1)::

    1x32x32 -conv7x7-> C1x26x26 -tanh-> -maxpool2-> C1x13x13
            -conv6x6-> C2x8x8 -tanh-> flatten (C2*64) -linear-> D -tanh->

The published network uses C1=32, C2=64 (flatten 4096) and D in {128, 256}.
Smaller channel counts keep the same operations and are used for quick
experiments and tests.
"""

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ShapeError

PATCH_SIZE = 32
CONV1_KERNEL = 7
CONV2_KERNEL = 6
CONV1_CHANNELS = 32
CONV2_CHANNELS = 64
# spatial extent after conv2: (32 - 7 + 1) / 2 - 6 + 1
CONV2_EXTENT = 8

# Reduced extents used by the toy experiments; same ops, ~10x cheaper.
SMOKE_CHANNELS = (8, 16)

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b")


@dataclass
class NetworkParams:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray

    def __post_init__(self):
        c1 = self.conv1_w.shape[0]
        c2 = self.conv2_w.shape[0]
        d = self.fc_w.shape[0] if self.fc_w.ndim == 2 else -1
        expected = {
            "conv1_w": (c1, 1, CONV1_KERNEL, CONV1_KERNEL),
            "conv1_b": (c1,),
            "conv2_w": (c2, c1, CONV2_KERNEL, CONV2_KERNEL),
            "conv2_b": (c2,),
            "fc_w": (d, c2 * CONV2_EXTENT * CONV2_EXTENT),
            "fc_b": (d,),
        }
        for name in PARAM_NAMES:
            got = getattr(self, name).shape
            if got != expected[name] or d < 1:
                raise ShapeError(f"{name} has shape {got}, expected {expected[name]}", axis=name)

    @property
    def descriptor_dim(self):
        return self.fc_w.shape[0]

    @property
    def channels(self):
        return self.conv1_w.shape[0], self.conv2_w.shape[0]

    @property
    def dtype(self):
        return self.fc_w.dtype

    def tensors(self):
        return [getattr(self, name) for name in PARAM_NAMES]

    def items(self):
        return [(name, getattr(self, name)) for name in PARAM_NAMES]

    def map(self, fn):
        return NetworkParams(*(fn(t) for t in self.tensors()))

    def copy(self):
        return self.map(np.copy)

    def astype(self, dtype):
        return self.map(lambda t: t.astype(dtype))

    def zeros_like(self):
        return self.map(np.zeros_like)

    def all_finite(self):
        return all(np.all(np.isfinite(t)) for t in self.tensors())

    def flatten(self):
        return np.concatenate([t.reshape(-1) for t in self.tensors()])

    @classmethod
    def unflatten(cls, flat, like):
        out, pos = [], 0
        for t in like.tensors():
            out.append(np.asarray(flat[pos:pos + t.size]).reshape(t.shape))
            pos += t.size
        return cls(*out)

    def __eq__(self, other):
        if not isinstance(other, NetworkParams):
            return NotImplemented
        return all(a.dtype == b.dtype and np.array_equal(a, b)
                   for a, b in zip(self.tensors(), other.tensors()))


def _uniform(rng, bound, shape):
    # Clamp to the largest float32 not above the bound so the cast cannot
    # round a sample outside the support.
    limit = np.float32(bound)
    if float(limit) > bound:
        limit = np.nextafter(limit, np.float32(0))
    values = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return np.clip(values, -limit, limit)


def init_params(seed, descriptor_dim=128, channels=(CONV1_CHANNELS, CONV2_CHANNELS)):
    """Uniform +-1/sqrt(fan_in) initialization, biases included."""
    if descriptor_dim < 1:
        raise ValueError(f"descriptor_dim must be >= 1, got {descriptor_dim}")
    c1, c2 = channels
    if c1 < 1 or c2 < 1:
        raise ValueError(f"channel counts must be >= 1, got {channels}")
    rng = np.random.default_rng(seed)
    fan1 = CONV1_KERNEL * CONV1_KERNEL
    fan2 = c1 * CONV2_KERNEL * CONV2_KERNEL
    fan3 = c2 * CONV2_EXTENT * CONV2_EXTENT
    return NetworkParams(
        conv1_w=_uniform(rng, fan1 ** -0.5, (c1, 1, CONV1_KERNEL, CONV1_KERNEL)),
        conv1_b=_uniform(rng, fan1 ** -0.5, (c1,)),
        conv2_w=_uniform(rng, fan2 ** -0.5, (c2, c1, CONV2_KERNEL, CONV2_KERNEL)),
        conv2_b=_uniform(rng, fan2 ** -0.5, (c2,)),
        fc_w=_uniform(rng, fan3 ** -0.5, (descriptor_dim, fan3)),
        fc_b=_uniform(rng, fan3 ** -0.5, (descriptor_dim,)),
    )


def _check_patches(patches):
    patches = np.asarray(patches)
    if patches.ndim != 4:
        raise ShapeError(f"patches must be (B, 1, 32, 32), got {patches.shape}")
    if patches.shape[1] != 1:
        raise ShapeError(f"patches must be single-channel, got {patches.shape[1]}", axis="channels")
    if patches.shape[2:] != (PATCH_SIZE, PATCH_SIZE):
        raise ShapeError(f"patches must be 32x32, got {patches.shape[2]}x{patches.shape[3]}",
                         axis="rows" if patches.shape[2] != PATCH_SIZE else "cols")
    if patches.shape[0] < 1:
        raise ShapeError("empty batch", axis="batch")
    return patches


@dataclass
class ForwardCache:
    x: np.ndarray
    cols1: np.ndarray
    a1: np.ndarray
    argmax: np.ndarray
    p1: np.ndarray
    cols2: np.ndarray
    a2: np.ndarray
    flat: np.ndarray
    out: np.ndarray


def forward(params, patches):
    """Descriptor forward pass keeping what :func:`backward` needs."""
    x = _check_patches(patches).astype(params.dtype, copy=False)
    h1, cols1 = T.conv2d_forward(x, params.conv1_w, params.conv1_b, return_cols=True)
    a1 = T.tanh_forward(h1)
    p1, argmax = T.maxpool2_forward(a1)
    h2, cols2 = T.conv2d_forward(p1, params.conv2_w, params.conv2_b, return_cols=True)
    a2 = T.tanh_forward(h2)
    flat = a2.reshape(a2.shape[0], -1)
    out = T.tanh_forward(T.linear_forward(flat, params.fc_w, params.fc_b))
    return out, ForwardCache(x, cols1, a1, argmax, p1, cols2, a2, flat, out)


def backward(params, cache, grad_out):
    """Parameter gradients given dLoss/dDescriptor; returned as NetworkParams."""
    dz = T.tanh_backward(cache.out, grad_out)
    dflat, dfc_w, dfc_b = T.linear_backward(cache.flat, params.fc_w, dz)
    da2 = dflat.reshape(cache.a2.shape)
    dh2 = T.tanh_backward(cache.a2, da2)
    dp1, dconv2_w, dconv2_b = T.conv2d_backward(cache.p1, params.conv2_w, dh2, cols=cache.cols2)
    da1 = T.maxpool2_backward(cache.argmax, dp1)
    dh1 = T.tanh_backward(cache.a1, da1)
    _, dconv1_w, dconv1_b = T.conv2d_backward(cache.x, params.conv1_w, dh1, cols=cache.cols1,
                                              need_input_grad=False)
    return NetworkParams(dconv1_w, dconv1_b, dconv2_w, dconv2_b, dfc_w, dfc_b)


def describe(params, patches):
    """Descriptors ``(B, D)`` for normalized ``(B, 1, 32, 32)`` patches."""
    x = _check_patches(patches).astype(params.dtype, copy=False)
    h = T.tanh_forward(T.conv2d_forward(x, params.conv1_w, params.conv1_b))
    h, _ = T.maxpool2_forward(h)
    h = T.tanh_forward(T.conv2d_forward(h, params.conv2_w, params.conv2_b))
    h = h.reshape(h.shape[0], -1)
    return T.tanh_forward(T.linear_forward(h, params.fc_w, params.fc_b))


def describe_batched(params, patches, batch_size=256):
    patches = np.asarray(patches)
    if len(patches) == 0:
        return np.zeros((0, params.descriptor_dim), dtype=params.dtype)
    return np.concatenate([describe(params, patches[i:i + batch_size])
                           for i in range(0, len(patches), batch_size)])


def describe_triplet(params, p1, p2, n):
    """Three passes through the same weights: ``(D(p1), D(p2), D(n))``."""
    sizes = {len(p1), len(p2), len(n)}
    if len(sizes) != 1:
        raise ShapeError(f"triplet batches differ in size: {len(p1)}, {len(p2)}, {len(n)}",
                         axis="batch")
    return describe(params, p1), describe(params, p2), describe(params, n)


def pool_signature(params, patches):
    """Max-pool winner map; used to keep finite differences off pooling kinks."""
    x = _check_patches(patches).astype(params.dtype, copy=False)
    h = T.tanh_forward(T.conv2d_forward(x, params.conv1_w, params.conv1_b))
    return T.maxpool2_forward(h)[1]


# -- checkpoints ---------------------------------------------------------------
#
# Little-endian layout:
#   magic "PNNETCKP" | version u8 | flags u8 | reserved u16
#   | descriptor_dim u32 | conv1 channels u32 | conv2 channels u32
#   | seed i64 | epoch u32
#   | float32 tensors in PARAM_NAMES order | velocity tensors (flag bit 0)
#   | crc32 u32 over all preceding bytes

CHECKPOINT_MAGIC = b"PNNETCKP"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sBBHIIIqI")
_CRC = struct.Struct("<I")


@dataclass
class Checkpoint:
    params: NetworkParams
    velocity: NetworkParams | None = None
    seed: int = 0
    epoch: int = 0
    version: int = CHECKPOINT_VERSION


def _param_shapes(dim, c1, c2):
    flat = c2 * CONV2_EXTENT * CONV2_EXTENT
    return [(c1, 1, CONV1_KERNEL, CONV1_KERNEL), (c1,),
            (c2, c1, CONV2_KERNEL, CONV2_KERNEL), (c2,), (dim, flat), (dim,)]


def encode_checkpoint(params, velocity=None, seed=0, epoch=0):
    flags = 1 if velocity is not None else 0
    c1, c2 = params.channels
    parts = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, flags, 0,
                          params.descriptor_dim, c1, c2, seed, epoch)]
    groups = [params] + ([velocity] if velocity is not None else [])
    for group in groups:
        for t in group.tensors():
            parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def decode_checkpoint(blob, expected_dim=None):
    if len(blob) < _HEADER.size + _CRC.size:
        raise CheckpointError("checkpoint truncated before end of header")
    magic, version, flags, _, dim, c1, c2, seed, epoch = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a pnnet checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise CheckpointError(f"checkpoint descriptor dimension {dim} != expected {expected_dim}")
    shapes = _param_shapes(dim, c1, c2)
    groups = 2 if flags & 1 else 1
    n_floats = groups * sum(int(np.prod(s)) for s in shapes)
    expected_len = _HEADER.size + 4 * n_floats + _CRC.size
    if len(blob) != expected_len:
        raise CheckpointError(f"checkpoint is {len(blob)} bytes, expected {expected_len} (truncated?)")
    body = blob[:-_CRC.size]
    (stored,) = _CRC.unpack_from(blob, len(body))
    if zlib.crc32(body) != stored:
        raise CheckpointError("checkpoint checksum mismatch")
    values = np.frombuffer(body, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    tensors, pos = [], 0
    for _ in range(groups):
        for shape in shapes:
            size = int(np.prod(shape))
            tensors.append(values[pos:pos + size].reshape(shape).copy())
            pos += size
    params = NetworkParams(*tensors[:6])
    velocity = NetworkParams(*tensors[6:]) if groups == 2 else None
    return Checkpoint(params, velocity, seed, epoch, version)


def save_checkpoint(params, velocity, path, seed=0, epoch=0):
    path = Path(path)
    blob = encode_checkpoint(params, velocity, seed=seed, epoch=epoch)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_dim=None):
    return decode_checkpoint(Path(path).read_bytes(), expected_dim=expected_dim)
