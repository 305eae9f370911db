"""Dense float64 tensors.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 laid out as
(batch, channels, height, width). The helpers here add the strict shape
checks the layers rely on: no broadcasting, no silent dtype changes.
"""
import numpy as np

from .errors import NumericError, ShapeError


def create(shape, values) -> np.ndarray:
    """Build a tensor from a shape and a flat row-major value sequence."""
    dims = tuple(int(d) for d in shape)
    if not dims or any(d < 1 for d in dims):
        raise ShapeError(f"invalid shape {dims}: every extent must be >= 1")
    flat = np.array(values, dtype=np.float64).reshape(-1)
    count = int(np.prod(dims))
    if flat.size != count:
        raise ShapeError(f"shape {dims} needs {count} values, got {flat.size}")
    if not np.all(np.isfinite(flat)):
        raise NumericError("tensor values must be finite")
    return flat.reshape(dims)


def flatten(x: np.ndarray, batched: bool = False) -> np.ndarray:
    """Row-major unroll; with ``batched`` keep axis 0 and flatten the rest."""
    if batched:
        return x.reshape(x.shape[0], -1)
    return x.reshape(-1)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack ``a`` then ``b`` along the channel axis (axis 1)."""
    if a.ndim != b.ndim or a.ndim < 2:
        raise ShapeError(f"cannot concatenate ranks {a.ndim} and {b.ndim}")
    bad = [ax for ax in range(a.ndim) if ax != 1 and a.shape[ax] != b.shape[ax]]
    if bad:
        names = ", ".join("NCHW"[ax] if a.ndim == 4 else str(ax) for ax in bad)
        raise ShapeError(f"concat mismatch on axes {names}: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def map_elementwise(x: np.ndarray, f) -> np.ndarray:
    """Apply scalar function ``f`` to every element (vectorized when possible)."""
    try:
        out = np.asarray(f(x), dtype=np.float64)
        if out.shape != x.shape:
            raise TypeError
    except (TypeError, ValueError):
        out = np.array([f(v) for v in x.reshape(-1)], dtype=np.float64).reshape(x.shape)
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        idx = np.unravel_index(bad[0], x.shape)
        raise NumericError(f"non-finite value at index {tuple(int(i) for i in idx)}")
    return out
