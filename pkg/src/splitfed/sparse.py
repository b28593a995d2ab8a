"""Magnitude top-K sparsification of cut-layer tensors.

Selection keeps ``k = max(1, floor(K * numel))`` entries with the largest
absolute value; among equal magnitudes the lower flat index wins. Indices
are always returned in ascending order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from splitfed import kernels


@dataclass(frozen=True, eq=False)
class SparseCutTensor:
    shape: tuple
    indices: np.ndarray  # uint32, strictly increasing
    values: np.ndarray  # float32, one per index

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.uint32))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float32))

    @property
    def numel(self):
        return math.prod(self.shape)

    @property
    def count(self):
        return int(self.indices.shape[0])

    def validate(self):
        if any(d < 1 for d in self.shape):
            raise ValueError(f"shape dimensions must be positive: {self.shape}")
        if self.indices.ndim != 1 or self.values.shape != self.indices.shape:
            raise ValueError("indices and values must be 1-D with equal length")
        if self.count > self.numel:
            raise ValueError(f"{self.count} entries exceed tensor size {self.numel}")
        if self.count:
            if np.any(np.diff(self.indices.astype(np.int64)) <= 0):
                raise ValueError("indices must be strictly increasing")
            if int(self.indices[-1]) >= self.numel:
                raise IndexError(f"index {int(self.indices[-1])} out of bounds for size {self.numel}")
        return self

    def __eq__(self, other):
        if not isinstance(other, SparseCutTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.indices, other.indices)
            and self.values.tobytes() == other.values.tobytes()
        )


def kept_count(numel: int, fraction: float) -> int:
    """``max(1, floor(fraction * numel))``, rounded first to absorb binary representation error."""
    if not 0 < fraction <= 1:
        raise ValueError(f"K must lie in (0, 1], got {fraction}")
    return min(numel, max(1, math.floor(round(fraction * numel, 9))))


def topk_sparsify(t, fraction: float, scope: str = "tensor") -> SparseCutTensor:
    """Keep the top-``fraction`` entries of ``t`` by magnitude.

    ``scope="sample"`` applies the rule separately to each slice along the
    leading (batch) axis; the result is still one tensor-wide index list.
    """
    t = np.asarray(t, dtype=np.float32)
    if t.size == 0:
        raise ValueError("cannot sparsify an empty tensor")
    flat = np.ascontiguousarray(t.reshape(-1))
    if scope == "tensor":
        idx = kernels.topk_indices(flat, kept_count(flat.size, fraction))
    elif scope == "sample":
        per = flat.size // t.shape[0]
        k = kept_count(per, fraction)
        idx = np.concatenate(
            [kernels.topk_indices(flat[b * per : (b + 1) * per], k).astype(np.int64) + b * per for b in range(t.shape[0])]
        ).astype(np.uint32)
    else:
        raise ValueError(f"scope must be 'tensor' or 'sample', got {scope!r}")
    return SparseCutTensor(t.shape, idx, flat[idx])


def densify(s: SparseCutTensor) -> np.ndarray:
    if s.count and int(s.indices.max()) >= s.numel:
        raise IndexError(f"index {int(s.indices.max())} out of bounds for size {s.numel}")
    out = np.zeros(s.numel, dtype=np.float32)
    out[s.indices] = s.values
    return out.reshape(s.shape)


def residual_sparsify(t, residual, fraction: float, scope: str = "tensor"):
    """Error-feedback sparsification: send top-K of ``t + residual``, keep the rest.

    Returns ``(sparse, new_residual)``; ``residual`` itself is not modified.
    """
    t = np.asarray(t, dtype=np.float32)
    if residual.shape != t.shape:
        raise ValueError(f"residual shape {residual.shape} != tensor shape {t.shape}")
    m = t + residual
    s = topk_sparsify(m, fraction, scope)
    return s, m - densify(s)


@dataclass(frozen=True)
class SparsityStats:
    kept_count: int
    kept_fraction: float
    values_bytes: int
    index_bytes: int


def sparsity_stats(s: SparseCutTensor) -> SparsityStats:
    return SparsityStats(s.count, s.count / s.numel, 4 * s.count, 4 * s.count)
