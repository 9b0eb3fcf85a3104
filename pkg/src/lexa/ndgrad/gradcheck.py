from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, no_tape, precision


def grad_check(f: Callable, x: Tensor | Sequence[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` receives ``x`` unchanged (a tensor or a list of tensors) and must
    return a scalar tensor. Inputs are perturbed in place and restored.
    Relative error per coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``.
    The check runs in float64; the inputs get their original dtype back.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.data.dtype) for t in xs]
    for t in xs:
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    try:
        with precision(np.float64), Tape() as tape:
            out = f(x)
            if not np.all(np.isfinite(out.data)):
                raise ValueError("f(x) is not finite")
            backward(out, tape)
        analytic = [t.grad.copy() for t in xs]

        worst = 0.0
        with precision(np.float64), no_tape():
            for t, ga in zip(xs, analytic):
                flat = t.data.reshape(-1)
                gflat = ga.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    hi = float(f(x).data)
                    flat[i] = orig - eps
                    lo = float(f(x).data)
                    flat[i] = orig
                    fd = (hi - lo) / (2 * eps)
                    a = float(gflat[i])
                    err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
                    worst = max(worst, err)
        return worst
    finally:
        for t, (flag, dtype) in zip(xs, saved):
            t.data = t.data.astype(dtype)
            t.requires_grad = flag
            t.grad = np.zeros_like(t.data) if flag else None
