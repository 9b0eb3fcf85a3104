"""Parameters, layers and the GRU cell."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, affine, elu, mul, sigmoid, sub, tanh, add

ACTIVATIONS = {"elu": elu, "tanh": tanh, "sigmoid": sigmoid, None: None}


class Parameter(Tensor):
    """A learnable tensor with Adam moment buffers."""

    __slots__ = ("name", "adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={list(self.shape)})"


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, lead: tuple = ()) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=lead + (fan_in, fan_out))


class Module:
    """Collects :class:`Parameter` attributes (and sub-modules) by name."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str) -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy_from(self, other: "Module") -> None:
        for a, b in zip(self.parameters(), other.parameters()):
            a.data[...] = b.data

    def frozen(self) -> "_Frozen":
        return _Frozen(self.parameters())


def _walk(value, path: str):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + "/")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}/{i}")


class _Frozen:
    """Context in which parameters act as constants (no gradient recorded)."""

    def __init__(self, params: Sequence[Parameter]):
        self.params = list(params)

    def __enter__(self):
        for p in self.params:
            p.requires_grad = False

    def __exit__(self, *exc):
        for p in self.params:
            p.requires_grad = True


class Dense(Module):
    def __init__(self, rng, n_in: int, n_out: int, act: str | None = None):
        self.w = Parameter(glorot(rng, n_in, n_out))
        self.b = Parameter(np.zeros(n_out))
        self._act = ACTIVATIONS[act]

    def __call__(self, x) -> Tensor:
        y = affine(x, self.w, self.b)
        return self._act(y) if self._act is not None else y


class MLP(Module):
    """Stack of dense layers; hidden layers use ``act``, output is linear."""

    def __init__(self, rng, sizes: Sequence[int], act: str = "elu"):
        self.layers = [
            Dense(rng, a, b, act if i < len(sizes) - 2 else None)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class GRUCell(Module):
    """Gated recurrent unit.

    ``r = σ(x Wr + h Ur)``, ``u = σ(x Wu + h Uu)``,
    ``c = tanh(x Wc + r ∘ (h Uc))``, ``h' = (1 − u) ∘ h + u ∘ c``.
    """

    def __init__(self, rng, n_in: int, n_hidden: int):
        self.wx = Parameter(glorot(rng, n_in, 3 * n_hidden))
        self.bx = Parameter(np.zeros(3 * n_hidden))
        self.wh = Parameter(glorot(rng, n_hidden, 3 * n_hidden))
        self.bh = Parameter(np.zeros(3 * n_hidden))
        self.n_in = n_in
        self.n_hidden = n_hidden

    def __call__(self, h, x) -> Tensor:
        return gru_cell(h, x, self)


def gru_cell(h, x, params: GRUCell) -> Tensor:
    n = params.n_hidden
    if h.shape[-1] != n or x.shape[-1] != params.n_in:
        raise ShapeError(
            f"gru_cell got h {list(h.shape)}, x {list(x.shape)}; expects hidden {n}, input {params.n_in}")
    if h.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"gru_cell batch dims differ: {list(h.shape)} vs {list(x.shape)}")
    gx = affine(x, params.wx, params.bx)
    gh = affine(h, params.wh, params.bh)
    r = sigmoid(add(gx[..., :n], gh[..., :n]))
    u = sigmoid(add(gx[..., n:2 * n], gh[..., n:2 * n]))
    c = tanh(add(gx[..., 2 * n:], mul(r, gh[..., 2 * n:])))
    # h' = h + u * (c - h)
    return add(h, mul(u, sub(c, h)))
