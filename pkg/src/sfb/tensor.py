"""Vectors, parameter matrices, and rank-1 update batches.

All parameter traffic in this package reduces to two objects: a factor
pair (u, v) whose outer product u v^T is one stochastic update to a
matrix, and a batch of K such pairs with a single scalar coefficient.
The coefficient carries sign, learning rate, shard weighting, and the
1/K minibatch average in one place, so receivers can apply any batch
without knowing which model or algorithm produced it.

Accumulation order is fixed (pair index outer, then the outer product's
natural row-major layout) and the batch delta is always formed first and
added to the target in a single step.  This keeps replayed and live
updates bitwise comparable, which the equivalence tests rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DimensionMismatch",
    "Vec64",
    "ParamMatrix",
    "SFPair",
    "SFBatch",
    "apply_sf_batch",
    "materialize_update",
    "frobenius_distance",
]

# Keep a vector sparse only while it is genuinely sparse; beyond this
# ratio the index bookkeeping costs more than it saves.
SPARSE_KEEP_RATIO = 0.25


class DimensionMismatch(ValueError):
    """Raised when factor or matrix shapes disagree."""


def _require_finite(values: np.ndarray, what: str) -> None:
    if values.size and not np.isfinite(values).all():
        raise ValueError(f"{what} contains NaN or Inf")


class Vec64:
    """A length-n float64 vector stored dense or sparse.

    Sparse storage is (indices, values) with strictly increasing u32
    indices.  Constructors reject non-finite entries and densify any
    "sparse" vector whose fill ratio reaches ``SPARSE_KEEP_RATIO``.
    """

    __slots__ = ("n", "dense_values", "indices", "sparse_values")

    def __init__(self, n, dense_values=None, indices=None, sparse_values=None):
        # Internal constructor; use Vec64.dense / Vec64.sparse.
        self.n = int(n)
        self.dense_values = dense_values
        self.indices = indices
        self.sparse_values = sparse_values

    @classmethod
    def dense(cls, values) -> "Vec64":
        arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        _require_finite(arr, "vector")
        return cls(arr.shape[0], dense_values=arr)

    @classmethod
    def sparse(cls, n: int, indices, values) -> "Vec64":
        idx = np.array(indices, dtype=np.uint32, copy=True).reshape(-1)
        val = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        if idx.shape[0] != val.shape[0]:
            raise ValueError("index/value length mismatch")
        if idx.size:
            if int(idx[-1]) >= n:
                raise ValueError("sparse index out of range")
            if idx.size > 1 and not (np.diff(idx.astype(np.int64)) > 0).all():
                raise ValueError("sparse indices must be strictly increasing")
        _require_finite(val, "vector")
        if idx.size >= n * SPARSE_KEEP_RATIO:
            out = np.zeros(n, dtype=np.float64)
            out[idx] = val
            return cls(n, dense_values=out)
        return cls(n, indices=idx, sparse_values=val)

    @property
    def is_sparse(self) -> bool:
        return self.dense_values is None

    @property
    def nnz(self) -> int:
        """Stored value count (the unit the comm counters bill)."""
        if self.is_sparse:
            return int(self.sparse_values.shape[0])
        return self.n

    def to_dense(self) -> np.ndarray:
        """Dense copy-free view when already dense, otherwise a new array."""
        if not self.is_sparse:
            return self.dense_values
        out = np.zeros(self.n, dtype=np.float64)
        out[self.indices] = self.sparse_values
        return out

    def norm(self) -> float:
        vals = self.sparse_values if self.is_sparse else self.dense_values
        return float(np.linalg.norm(vals))

    def storage_equal(self, other: "Vec64") -> bool:
        """Bit-level equality including the dense/sparse representation."""
        if self.n != other.n or self.is_sparse != other.is_sparse:
            return False
        if self.is_sparse:
            return (
                self.indices.tobytes() == other.indices.tobytes()
                and self.sparse_values.tobytes() == other.sparse_values.tobytes()
            )
        return self.dense_values.tobytes() == other.dense_values.tobytes()

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        kind = "sparse" if self.is_sparse else "dense"
        return f"Vec64({kind}, n={self.n}, nnz={self.nnz})"


class ParamMatrix:
    """Dense row-major R x C float64 matrix; the replicated model state."""

    __slots__ = ("rows", "cols", "values")

    def __init__(self, values: np.ndarray):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("matrix must be 2-D")
        _require_finite(arr, "matrix")
        self.rows, self.cols = arr.shape
        self.values = arr

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "ParamMatrix":
        return cls(np.zeros((rows, cols), dtype=np.float64))

    def copy(self) -> "ParamMatrix":
        return ParamMatrix(self.values.copy())

    def matvec(self, x: Vec64) -> np.ndarray:
        """W @ x, exploiting sparse x."""
        if x.n != self.cols:
            raise DimensionMismatch(f"matvec: {self.cols} cols vs vector of {x.n}")
        if x.is_sparse:
            if x.indices.size == 0:
                return np.zeros(self.rows, dtype=np.float64)
            return self.values[:, x.indices] @ x.sparse_values
        return self.values @ x.dense_values

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def __repr__(self) -> str:
        return f"ParamMatrix({self.rows}x{self.cols})"


@dataclass
class SFPair:
    """One sufficient factor pair; u v^T is the update it encodes."""

    u: Vec64
    v: Vec64

    def storage_equal(self, other: "SFPair") -> bool:
        return self.u.storage_equal(other.u) and self.v.storage_equal(other.v)


@dataclass
class SFBatch:
    """A committed minibatch of factor pairs plus scaling metadata.

    ``coeff`` scales the summed outer products; receivers compute
    W <- W + coeff * sum_i u_i v_i^T.  ``clock`` is the sender's commit
    count when the batch was produced (1-based).  A batch may be empty
    (e.g. hinge-inactive metric-learning samples emit no pair) but is
    still committed so clocks advance.
    """

    pairs: list[SFPair] = field(default_factory=list)
    coeff: float = 1.0
    sender: int = 0
    clock: int = 1

    def __post_init__(self):
        if not np.isfinite(self.coeff):
            raise ValueError("batch coeff must be finite")
        if self.clock < 1:
            raise ValueError("batch clock must be >= 1")
        dims = {(p.u.n, p.v.n) for p in self.pairs}
        if len(dims) > 1:
            raise DimensionMismatch(f"pairs with mixed dims: {sorted(dims)}")

    @property
    def dims(self) -> tuple[int, int] | None:
        if not self.pairs:
            return None
        return (self.pairs[0].u.n, self.pairs[0].v.n)

    @property
    def value_count(self) -> int:
        """Stored float64 values across all pairs (dense dims or nnz)."""
        return sum(p.u.nnz + p.v.nnz for p in self.pairs)


def _accumulate_outer(out: np.ndarray, pair: SFPair) -> None:
    # Scatter only the rows/cols the factors actually touch.
    u, v = pair.u, pair.v
    if u.is_sparse and v.is_sparse:
        if u.indices.size and v.indices.size:
            out[np.ix_(u.indices, v.indices)] += np.outer(u.sparse_values, v.sparse_values)
    elif u.is_sparse:
        if u.indices.size:
            out[u.indices, :] += np.outer(u.sparse_values, v.dense_values)
    elif v.is_sparse:
        if v.indices.size:
            out[:, v.indices] += np.outer(u.dense_values, v.sparse_values)
    else:
        out += np.outer(u.dense_values, v.dense_values)


def _delta_values(batch: SFBatch, rows: int, cols: int) -> np.ndarray:
    out = np.zeros((rows, cols), dtype=np.float64)
    for pair in batch.pairs:
        _accumulate_outer(out, pair)
    out *= batch.coeff
    return out


def _check_batch_dims(batch: SFBatch, target: ParamMatrix) -> None:
    dims = batch.dims
    if dims is not None and dims != target.shape:
        raise DimensionMismatch(
            f"batch factors are {dims[0]}x{dims[1]} but target is "
            f"{target.rows}x{target.cols}"
        )


def apply_sf_batch(W: ParamMatrix, batch: SFBatch) -> None:
    """In-place W <- W + coeff * sum_i u_i v_i^T.

    The delta is accumulated pair-major into a scratch buffer and added
    to W once, so the result equals ``W + materialize_update(batch)``
    exactly.  An empty batch is a no-op.
    """
    _check_batch_dims(batch, W)
    if not batch.pairs:
        return
    W.values += _delta_values(batch, W.rows, W.cols)


def materialize_update(batch: SFBatch) -> ParamMatrix:
    """The batch's dense update matrix coeff * sum_i u_i v_i^T."""
    dims = batch.dims
    if dims is None:
        raise ValueError("cannot materialize an empty batch")
    return ParamMatrix(_delta_values(batch, dims[0], dims[1]))


def frobenius_distance(A: ParamMatrix, B: ParamMatrix) -> float:
    """sqrt(sum (A_ij - B_ij)^2)."""
    if A.shape != B.shape:
        raise DimensionMismatch(f"{A.shape} vs {B.shape}")
    return float(np.sqrt(np.sum((A.values - B.values) ** 2)))
