"""Small building blocks shared by the stack, language head, and alignment.

The autodiff layer only broadcasts scalars, so row-wise bias adds and
vertical concatenation are spelled out with constant matrices here.  Cached
constants are plain immutable tensors and safe to share across graphs.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .autodiff import Tensor, concat_last, matmul, transpose


@lru_cache(maxsize=None)
def ones_column(rows: int) -> Tensor:
    return Tensor(np.ones((rows, 1)))


@lru_cache(maxsize=None)
def identity(n: int) -> Tensor:
    return Tensor(np.eye(n))


@lru_cache(maxsize=None)
def causal_mask(n: int) -> Tensor:
    # large negative instead of -inf keeps softmax inputs finite
    mask = np.triu(np.full((n, n), -1e9), k=1)
    return Tensor(mask)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = out + matmul(ones_column(x.shape[0]), b)
    return out


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return linear(linear(x, w1, b1).tanh(), w2, b2)


def vconcat(parts) -> Tensor:
    """Stack 2-D tensors along axis 0 (rows)."""
    parts = list(parts)
    if len(parts) == 1:
        return parts[0]
    return transpose(concat_last([transpose(p) for p in parts]))


def normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)
