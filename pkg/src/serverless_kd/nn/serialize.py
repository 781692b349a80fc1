"""Weight blobs: a versioned little-endian binary format.

Layout (all integers unsigned, little-endian)::

    magic        4 bytes   b"SKDW"
    version      u16       currently 1
    graph hash   32 bytes  SHA-256 digest of the canonical graph serialization
    node count   u32
    per node (in topological order):
        name length  u16, name (UTF-8)
        array count  u8
        per array:
            key length  u8, key (UTF-8)
            ndim        u8
            dims        u32 * ndim
            payload     float64 little-endian, C order
"""

from __future__ import annotations

import struct

import numpy as np

from ..model_dsl import LayerGraph

MAGIC = b"SKDW"
VERSION = 1
_F64 = np.dtype("<f8")


class BlobFormatError(ValueError):
    pass


class ArchitectureMismatch(ValueError):
    pass


def graph_digest(graph: LayerGraph) -> bytes:
    return bytes.fromhex(graph.fingerprint())


def encode_weights(weights: dict[str, dict[str, np.ndarray]], digest: bytes, order=None) -> bytes:
    if len(digest) != 32:
        raise ValueError("graph digest must be 32 bytes")
    order = list(order) if order is not None else list(weights)
    names = [n for n in order if weights.get(n)]
    parts = [MAGIC, struct.pack("<H", VERSION), digest, struct.pack("<I", len(names))]
    for name in names:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        arrays = weights[name]
        parts.append(struct.pack("<B", len(arrays)))
        for key in sorted(arrays):
            arr = np.ascontiguousarray(arrays[key], dtype=_F64)
            kraw = key.encode()
            parts.append(struct.pack("<B", len(kraw)) + kraw)
            parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
    return b"".join(parts)


def decode_weights(blob: bytes) -> tuple[bytes, dict[str, dict[str, np.ndarray]]]:
    """Return ``(graph digest, weights)``; node order is preserved."""
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise BlobFormatError("not a weight blob")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise BlobFormatError("truncated weight blob")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    (version,) = take("<H")
    if version != VERSION:
        raise BlobFormatError(f"unsupported weight blob version {version}")
    digest = bytes(view[pos : pos + 32])
    pos += 32
    (count,) = take("<I")
    weights: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = bytes(view[pos : pos + nlen]).decode()
        pos += nlen
        (narr,) = take("<B")
        arrays = {}
        for _ in range(narr):
            (klen,) = take("<B")
            key = bytes(view[pos : pos + klen]).decode()
            pos += klen
            (ndim,) = take("<B")
            shape = take(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) * 8
            if pos + size > len(view):
                raise BlobFormatError("truncated weight blob")
            arrays[key] = np.frombuffer(view[pos : pos + size], dtype=_F64).reshape(shape).astype(np.float64)
            pos += size
        weights[name] = arrays
    if pos != len(view):
        raise BlobFormatError("trailing bytes after weight payload")
    return digest, weights


def network_to_blob(net) -> bytes:
    return encode_weights(net.weights, graph_digest(net.graph), net.order)


def load_blob_into(net, blob: bytes) -> None:
    digest, weights = decode_weights(blob)
    if digest != graph_digest(net.graph):
        raise ArchitectureMismatch("weight blob was produced for a different architecture")
    net.set_weights(weights)
