"""Design space, design samples and Latin hypercube sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class DesignSpace:
    """Named design variables with [low, high] bounds."""

    names: tuple
    lows: tuple
    highs: tuple

    def __post_init__(self):
        if not (len(self.names) == len(self.lows) == len(self.highs)):
            raise ConfigError("DesignSpace: names, lows and highs must align")
        for name, lo, hi in zip(self.names, self.lows, self.highs):
            if not lo < hi:
                raise ConfigError(f"DesignSpace: bad bounds for {name}: [{lo}, {hi}]")

    @property
    def n_vars(self) -> int:
        return len(self.names)

    def lows_array(self) -> np.ndarray:
        return np.asarray(self.lows, dtype=np.float64)

    def highs_array(self) -> np.ndarray:
        return np.asarray(self.highs, dtype=np.float64)

    def nominal(self) -> np.ndarray:
        """Midpoint of every bound interval."""
        return 0.5 * (self.lows_array() + self.highs_array())

    def contains(self, values: np.ndarray) -> bool:
        v = np.asarray(values, dtype=np.float64)
        return bool(np.all(v >= self.lows_array()) and np.all(v <= self.highs_array()))


@dataclass(frozen=True)
class DesignSample:
    """One point in the design space."""

    values: np.ndarray
    sample_id: int
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    def __getitem__(self, name: str) -> float:
        try:
            return float(self.values[self.names.index(name)])
        except ValueError as exc:
            raise KeyError(name) from exc

    def as_dict(self) -> dict:
        return {name: float(v) for name, v in zip(self.names, self.values)}


def lhs_sample(n: int, space: DesignSpace, seed: int) -> list[DesignSample]:
    """Latin hypercube: per dimension, one sample in each of n equal strata.

    Stratum membership is an exact property: sample i of dimension d lands in
    stratum ``perm_d[i]`` with uniform jitter inside it.
    """
    if n < 1:
        raise ConfigError("lhs_sample: n must be >= 1")
    rng = np.random.default_rng(seed)
    d = space.n_vars
    unit = np.empty((n, d))
    for k in range(d):
        perm = rng.permutation(n)
        jitter = rng.random(n)
        unit[:, k] = (perm + jitter) / n
    lows = space.lows_array()
    highs = space.highs_array()
    values = lows + unit * (highs - lows)
    return [DesignSample(values=values[i], sample_id=i, names=space.names) for i in range(n)]
