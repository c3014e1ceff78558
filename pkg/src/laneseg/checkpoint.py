"""LSEG binary checkpoint format.

Layout (all little-endian)::

    b"LSEG"                 magic
    u16                     version (1)
    u32                     tensor count
    per tensor:
        u16 + utf-8         name
        u8                  rank
        u32 * rank          dims
        f32 * prod(dims)    data, row-major
    u32                     CRC-32 of every preceding byte

Model hyperparameters that are not arrays (batch-norm eps/momentum, BR
post-relu flag, output scale) travel in a float32 tensor named ``meta``.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, CheckpointError, MagicError, TruncatedError, VersionError
from .network import BrBlockParams, GcnBlockParams, ModelParams
from .tensor import BatchNormParams, ConvParams

MAGIC = b"LSEG"
VERSION = 1
META = "meta"


def _meta(params: ModelParams) -> np.ndarray:
    bn = params.encoder[0][1]
    return np.array([bn.eps, bn.momentum, float(params.br.post_relu), params.output_scale], dtype="<f4")


def serialize_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize_tensors(data: bytes) -> dict[str, np.ndarray]:
    r = _Reader(bytes(data))
    if bytes(r.take(4, "magic")) != MAGIC:
        raise MagicError("not an LSEG checkpoint (bad magic)")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise VersionError(f"unsupported LSEG version {version} (expected {VERSION})")
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (n,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = bytes(r.take(n, f"name of tensor {i}")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor {i} name is not valid UTF-8") from exc
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(4 * size, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    body_end = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after checksum")
    if zlib.crc32(r.data[:body_end]) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    return tensors


def serialize_model(params: ModelParams) -> bytes:
    tensors = {META: _meta(params)}
    tensors.update(params.named_arrays())
    return serialize_tensors(tensors)


def deserialize_model(data: bytes) -> ModelParams:
    t = deserialize_tensors(data)
    try:
        return _build(t)
    except CheckpointError:
        raise
    except (KeyError, ValueError, IndexError) as exc:
        raise CheckpointError(f"checkpoint does not describe a valid model: {exc}") from exc


def _build(t: dict[str, np.ndarray]) -> ModelParams:
    used = set()

    def get(name):
        if name not in t:
            raise CheckpointError(f"missing tensor {name!r}")
        used.add(name)
        return t[name]

    meta = get(META)
    if meta.shape != (4,):
        raise CheckpointError("meta tensor must hold 4 values")
    eps, momentum, post_relu, scale = (float(v) for v in meta)

    def conv(prefix):
        w = get(prefix + ".w")
        if w.ndim != 4:
            raise CheckpointError(f"{prefix}.w must be rank 4")
        return ConvParams(w, get(prefix + ".b"), padding=(w.shape[2] // 2, w.shape[3] // 2))

    def bn(prefix):
        return BatchNormParams(
            get(prefix + ".gamma"), get(prefix + ".beta"),
            get(prefix + ".running_mean"), get(prefix + ".running_var"),
            eps=eps, momentum=momentum,
        )

    depth = 0
    while f"enc{depth}.conv.w" in t:
        depth += 1
    encoder = [(conv(f"enc{i}.conv"), bn(f"enc{i}.bn")) for i in range(depth)]
    gcn = GcnBlockParams((conv("gcn.a1"), conv("gcn.a2")), (conv("gcn.b1"), conv("gcn.b2")))
    decoder = [(conv(f"dec{i}.conv"), bn(f"dec{i}.bn")) for i in range(depth)]
    br = BrBlockParams(conv("br.w1"), conv("br.w2"), post_relu=bool(post_relu))
    params = ModelParams(encoder, gcn, decoder, br, conv("head"), output_scale=scale)
    extra = set(t) - used
    if extra:
        raise CheckpointError(f"unexpected tensors {sorted(extra)}")
    _check_chain(params)
    return params


def _check_chain(params: ModelParams) -> None:
    """Channel counts must line up from input to head."""
    c = params.encoder[0][0].c_in
    convs = [conv for conv, _ in params.encoder]
    for conv in convs:
        if conv.c_in != c:
            raise CheckpointError("encoder channel counts do not chain")
        c = conv.c_out
    for first, second in (params.gcn.branch_a, params.gcn.branch_b):
        if first.c_in != c or second.c_in != first.c_out:
            raise CheckpointError("GCN channel counts do not chain")
    c = params.gcn.branch_a[1].c_out
    for conv, bn in params.decoder:
        if conv.c_in != c or bn.gamma.shape != (conv.c_out,):
            raise CheckpointError("decoder channel counts do not chain")
        c = conv.c_out
    for conv, bn in params.encoder:
        if bn.gamma.shape != (conv.c_out,):
            raise CheckpointError("encoder batchnorm size mismatch")
    if params.br.w1.c_in != c or params.head.c_in != c:
        raise CheckpointError("BR / head channel counts do not chain")


def save(path, params: ModelParams) -> bytes:
    data = serialize_model(params)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return data


def load(path) -> ModelParams:
    return deserialize_model(Path(path).read_bytes())
