"""Diagonal Gaussian utilities."""

from __future__ import annotations

import numpy as np

from .tensor import DomainError, Tensor, add, as_tensor, div, log, mul, softplus, square, sub, sum_

STD_FLOOR = 0.01


def std_from_raw(raw: Tensor, floor: float = STD_FLOOR) -> Tensor:
    return add(softplus(raw), floor)


def _check_std(*stds: Tensor) -> None:
    for s in stds:
        if not np.all(s.data > 0):
            raise DomainError("standard deviation must be strictly positive")


def gaussian_sample(mean, std, rng: np.random.Generator) -> Tensor:
    """Reparameterized draw ``mean + std * eps``."""
    mean, std = as_tensor(mean), as_tensor(std)
    _check_std(std)
    eps = rng.standard_normal(np.broadcast_shapes(mean.shape, std.shape)).astype(mean.data.dtype)
    return add(mean, mul(std, eps))


def kl_diag_gauss(mean_q, std_q, mean_p, std_p) -> Tensor:
    """KL(q || p) summed over the last axis."""
    mean_q, std_q, mean_p, std_p = map(as_tensor, (mean_q, std_q, mean_p, std_p))
    _check_std(std_q, std_p)
    var_ratio = square(div(std_q, std_p))
    mean_term = square(div(sub(mean_q, mean_p), std_p))
    per_dim = mul(sub(add(var_ratio, mean_term), add(log(var_ratio), 1.0)), 0.5)
    return sum_(per_dim, axis=-1)


def gaussian_entropy(std) -> Tensor:
    """Differential entropy summed over the last axis."""
    std = as_tensor(std)
    _check_std(std)
    return add(sum_(log(std), axis=-1), 0.5 * std.shape[-1] * (1.0 + np.log(2 * np.pi)))
