"""Dense tensor helpers.

Tensors are plain C-contiguous float64 numpy arrays. The functions here add
the shape checks the rest of the package relies on and implement contraction
as a single GEMM over matricized operands.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Return ``data`` as a C-contiguous float64 array, optionally reshaped.

    Zero-dimensional input and empty axes are rejected.
    """
    t = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if shape is not None:
        t = reshape(t, shape)
    if t.ndim == 0 or any(d < 1 for d in t.shape):
        raise ShapeError(f"tensor shape must be non-empty with positive dims, got {t.shape}")
    return t


def _check_axis(t: np.ndarray, axis: int, name: str) -> int:
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"axis {axis} out of range for {name} with shape {t.shape}")
    return axis % t.ndim


def contract(a: np.ndarray, axis_a: int, b: np.ndarray, axis_b: int) -> np.ndarray:
    """Sum over one matched axis of ``a`` and ``b``.

    The result has the remaining axes of ``a`` (in order) followed by the
    remaining axes of ``b``. Both operands are moved into matrix form around
    the contracted axis and multiplied with one GEMM.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax = _check_axis(a, axis_a, "a")
    bx = _check_axis(b, axis_b, "b")
    if a.shape[ax] != b.shape[bx]:
        raise ShapeError(
            f"cannot contract axis {ax} of shape {a.shape} with axis {bx} of shape {b.shape}: "
            f"{a.shape[ax]} != {b.shape[bx]}"
        )
    n = a.shape[ax]
    a_rest = a.shape[:ax] + a.shape[ax + 1:]
    b_rest = b.shape[:bx] + b.shape[bx + 1:]
    am = np.moveaxis(a, ax, -1).reshape(-1, n)
    bm = np.moveaxis(b, bx, 0).reshape(n, -1)
    return np.ascontiguousarray((am @ bm).reshape(a_rest + b_rest))


def permute(t: np.ndarray, order: Sequence[int]) -> np.ndarray:
    """Reorder axes; ``result.shape[k] == t.shape[order[k]]``. Always copies."""
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(t.ndim)):
        raise ShapeError(f"{order} is not a permutation of the {t.ndim} axes of shape {t.shape}")
    return np.ascontiguousarray(np.transpose(t, order))


def reshape(t: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    new_shape = tuple(int(d) for d in new_shape)
    if int(np.prod(new_shape)) != t.size or any(d < 1 for d in new_shape):
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    return np.ascontiguousarray(t).reshape(new_shape)


def flatten_from(t: np.ndarray, start_axis: int) -> np.ndarray:
    """Merge axes ``start_axis..end`` into one trailing axis."""
    if not 0 <= start_axis < t.ndim:
        raise ShapeError(f"start_axis {start_axis} out of range for shape {t.shape}")
    return reshape(t, t.shape[:start_axis] + (int(np.prod(t.shape[start_axis:])),))
