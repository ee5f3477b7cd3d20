"""Named-parameter registry with the package's init conventions."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter


class ParamStore:
    """Creates and holds every Parameter of a model, keyed by checkpoint name."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, Parameter] = {}

    def new(self, name: str, shape: tuple, init: str = "xavier") -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if init == "xavier":
            fan_in, fan_out = (shape[0], shape[-1]) if len(shape) > 1 else (shape[0], shape[0])
            if len(shape) == 4:  # conv kernels: [out, in, kh, kw]
                rf = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * rf, shape[0] * rf
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-limit, limit, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Parameter(name, data, dtype=self.dtype)
        self.params[name] = p
        return p

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params
