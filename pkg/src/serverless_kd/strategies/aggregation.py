"""Logit consensus and weighted weight averaging."""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..model_dsl import ShapeMismatch
from ..nn.serialize import ArchitectureMismatch, decode_weights, encode_weights


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class ConsensusLogits:
    round: int
    subset: np.ndarray
    matrix: np.ndarray

    def __post_init__(self):
        if len(self.subset) != len(self.matrix):
            raise ShapeMismatch("consensus rows must match the subset size")
        if not np.isfinite(self.matrix).all():
            raise ValueError("consensus logits must be finite")


def aggregate_logits(per_client: Sequence[np.ndarray], round: int = 0, subset=None) -> ConsensusLogits:
    """Element-wise arithmetic mean of the clients' logit matrices."""
    if not per_client:
        raise EmptyInput("no client logits to aggregate")
    first = np.asarray(per_client[0], dtype=np.float64)
    total = np.zeros_like(first)
    for m in per_client:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != first.shape:
            raise ShapeMismatch(f"logit matrices differ in shape: {first.shape} vs {m.shape}")
        total += m
    mean = total / len(per_client)
    if all(np.array_equal(first, m) for m in per_client[1:]):
        mean = first.copy()
    subset = np.arange(len(first)) if subset is None else np.asarray(subset)
    return ConsensusLogits(round, subset, mean)


def fedavg_weights(weight_blobs: Sequence[bytes], sample_counts: Sequence[int | float]) -> bytes:
    """Sample-weighted mean of every array across blobs of one architecture.

    Pairs are summed in a canonical order (by blob digest, then count), so the
    result does not depend on argument order.
    """
    if not weight_blobs:
        raise EmptyInput("no weights to average")
    if len(weight_blobs) != len(sample_counts):
        raise ValueError("one sample count per blob is required")
    if any(c <= 0 for c in sample_counts):
        raise ValueError("sample counts must be positive")
    pairs = sorted(zip(weight_blobs, sample_counts), key=lambda p: (hashlib.sha256(p[0]).digest(), p[1]))
    decoded = [decode_weights(b) for b, _ in pairs]
    digest, template = decoded[0]
    for d, w in decoded[1:]:
        if d != digest or _layout(w) != _layout(template):
            raise ArchitectureMismatch("cannot average weights of different architectures")
    if len(pairs) == 1:
        return bytes(pairs[0][0])
    total = float(sum(c for _, c in pairs))
    out = {}
    for node, arrays in template.items():
        out[node] = {}
        for key in arrays:
            acc = np.zeros_like(arrays[key])
            for (_, count), (_, w) in zip(pairs, decoded):
                acc += (count / total) * w[node][key]
            out[node][key] = acc
    return encode_weights(out, digest, list(template))


def _layout(weights):
    return [(n, k, a.shape) for n, d in weights.items() for k, a in d.items()]


def encode_array(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.asarray(array, dtype=np.float64), allow_pickle=False)
    return buf.getvalue()


def decode_array(data: bytes) -> np.ndarray:
    return np.load(io.BytesIO(data), allow_pickle=False)
