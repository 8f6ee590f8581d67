"""Ordered registry of named trainable parameters."""

from __future__ import annotations

import numpy as np

from .autodiff import Value


class ParamStore:
    """Insertion-ordered name -> Value registry shared by all model parts.

    The registration order defines the checkpoint layout, so construction
    must be deterministic.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Value] = {}

    def add(self, name, array):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        v = Value(np.ascontiguousarray(array, dtype=self.dtype), requires_grad=True)
        self._params[name] = v
        return v

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return list(self._params.items())

    def values(self):
        return list(self._params.values())

    def zero_grads(self):
        for v in self._params.values():
            v.grad = None

    def count(self):
        return sum(v.data.size for v in self._params.values())

    def state_arrays(self):
        return [(name, v.data) for name, v in self._params.items()]

    def load_state(self, arrays):
        """Assign parameter data from a name -> ndarray mapping (exact shapes)."""
        for name, v in self._params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            a = arrays[name]
            if a.shape != v.data.shape:
                raise ValueError(f"parameter {name!r}: checkpoint shape {a.shape} != model shape {v.data.shape}")
            v.data = np.ascontiguousarray(a, dtype=self.dtype)
            v.grad = None


def uniform_fan_in(rng, shape, fan_in):
    """Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def normal_embed(rng, shape, std=0.02):
    return rng.normal(0.0, std, size=shape)
