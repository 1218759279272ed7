"""Differentiable quantile pooling over a spatial neighbourhood.

The forward pass selects, per output channel, one element of the
neighbourhood (nearest-rank quantile, never interpolated). It is therefore a
linear map ``y = Q f`` with a 0/1 selection matrix ``Q``, and its gradient is
``Q^T g``: the upstream gradient lands on the selected element only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .ndnn.tensor import ShapeError, Tensor, op_result


class SelectionStateError(RuntimeError):
    pass


@dataclass
class QuantileSelection:
    selected_index: np.ndarray  # [..., C] flattened neighbourhood position
    neighborhood_shape: tuple
    q: float

    @property
    def neighborhood_size(self) -> int:
        return int(np.prod(self.neighborhood_shape))


def quantile_rank(n: int, q: float) -> int:
    return int(np.floor(q * (n - 1)))


def select(values: np.ndarray, q: float) -> np.ndarray:
    """Indices of the q-quantile along axis -2 of ``[..., n, C]``.

    Among elements equal to the value at the selected rank, the lowest
    position wins.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile level {q} outside [0, 1]")
    n = values.shape[-2]
    if n == 0:
        raise ShapeError("empty neighbourhood")
    target = np.take(np.sort(values, axis=-2), quantile_rank(n, q), axis=-2)
    return np.argmax(values == target[..., None, :], axis=-2)


def quantile_forward(preds: Tensor, q: float = 0.5, spatial_dims: int = 2) -> tuple[Tensor, QuantileSelection]:
    """Reduce the ``spatial_dims`` axes before the channel axis to their q-quantile.

    ``preds`` is ``[..., 3, 3, C]`` for the default 3x3 neighbourhood.
    """
    shape = preds.shape
    nb_shape = shape[-1 - spatial_dims : -1]
    lead = shape[: -1 - spatial_dims]
    C = shape[-1]
    n = int(np.prod(nb_shape))
    if n == 0:
        raise ShapeError("empty neighbourhood")
    flat = preds.data.reshape(lead + (n, C))
    idx = select(flat, q)
    out = np.take_along_axis(flat, idx[..., None, :], axis=-2)[..., 0, :]
    selection = QuantileSelection(idx, nb_shape, q)

    def backward(g):
        return (quantile_backward(selection, g).reshape(shape),)

    return op_result(out, (preds,), backward), selection


def quantile_backward(selection: QuantileSelection, upstream: np.ndarray) -> np.ndarray:
    """Apply ``Q^T`` to ``upstream`` (shape ``[..., C]``)."""
    upstream = np.asarray(upstream, dtype=np.float64)
    idx = selection.selected_index
    if upstream.shape != idx.shape:
        raise SelectionStateError(f"upstream {upstream.shape} does not match selection {idx.shape}")
    n = selection.neighborhood_size
    grad = np.zeros(idx.shape[:-1] + (n, idx.shape[-1]))
    np.put_along_axis(grad, idx[..., None, :], upstream[..., None, :], axis=-2)
    return grad.reshape(idx.shape[:-1] + tuple(selection.neighborhood_shape) + (idx.shape[-1],))


def quantile_matrix(selection: QuantileSelection) -> sp.csr_matrix:
    """Explicit ``Q`` of shape ``[C, n*C]`` for one neighbourhood, acting on
    the row-major flattening of ``[*neighbourhood, C]``."""
    idx = np.asarray(selection.selected_index)
    if idx.ndim != 1:
        raise ValueError("quantile_matrix expects the selection of a single neighbourhood")
    C = idx.size
    n = selection.neighborhood_size
    cols = idx * C + np.arange(C)
    return sp.csr_matrix((np.ones(C), (np.arange(C), cols)), shape=(C, n * C))
