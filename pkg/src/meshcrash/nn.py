"""Parameter store and small building blocks (linear, MLP, layer norm).

Every parameter is initialized from a seed derived from (run seed, parameter
name), so two models built with the same seed get identical weights for every
module they share by name, regardless of what other modules exist.
"""

from __future__ import annotations

import numpy as np

from . import engine
from .engine import Tensor
from .errors import ConfigError
from .util import derive_seed


class ParamStore:
    """Creates and registers named parameters."""

    def __init__(self, seed: int):
        self.seed = seed
        self.params: dict[str, Tensor] = {}

    def param(self, name: str, shape: tuple, fan_in: int | None = None,
              init: str = "fan_in", value: float = 0.0) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if init == "fan_in":
            if fan_in is None or fan_in <= 0:
                raise ConfigError(f"fan_in required for parameter {name!r}")
            rng = np.random.default_rng(derive_seed(self.seed, name))
            bound = 1.0 / np.sqrt(fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            values = np.zeros(shape)
        elif init == "ones":
            values = np.ones(shape)
        elif init == "constant":
            values = np.full(shape, float(value))
        else:
            raise ConfigError(f"unknown init {init!r}")
        t = engine.parameter(values, name)
        self.params[name] = t
        return t


def activation_fn(name: str):
    if name == "relu":
        return engine.relu
    if name == "gelu":
        return engine.gelu
    raise ConfigError(f"unknown activation {name!r}")


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.weight = store.param(f"{name}.weight", (d_in, d_out), fan_in=d_in)
        self.bias = store.param(f"{name}.bias", (1, d_out), init="zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = engine.matmul(x, self.weight)
        if self.bias is not None:
            out = engine.add(out, self.bias)
        return out


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int):
        self.gain = store.param(f"{name}.gain", (1, d), init="ones")
        self.bias = store.param(f"{name}.bias", (1, d), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return engine.layer_norm(x, self.gain, self.bias)


class MLP:
    """Linear chain with activations between layers (none after the last)."""

    def __init__(self, store: ParamStore, name: str, dims: list[int], activation: str = "relu"):
        if len(dims) < 2:
            raise ConfigError("MLP needs at least input and output dims")
        self.layers = [
            Linear(store, f"{name}.fc{k}", dims[k], dims[k + 1])
            for k in range(len(dims) - 1)
        ]
        self.act = activation_fn(activation)

    def __call__(self, x: Tensor) -> Tensor:
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = self.act(x)
        return x
