"""Parameter-owning building blocks shared by the network modules."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from .tensor import ConvParams, Tensor, conv2d


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Minimal parameter registry: children and tensors, walked by name."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()

    def register(self, name: str, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        else:
            raise TypeError(f"cannot register {type(value).__name__}")
        return value

    def named_params(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, child in self._children.items():
            out.update(child.named_params(prefix + name + "."))
        return out

    def param_list(self) -> list:
        return list(self.named_params().values())

    def param_count(self) -> int:
        return sum(p.data.size for p in self.param_list())

    def astype(self, dtype):
        """Cast all parameters in place (float64 mode for gradient checks)."""
        for p in self.param_list():
            p.data = p.data.astype(dtype)
        return self


class Conv(Module):
    """Convolution layer with He-uniform init and optional bias."""

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int, kernel: int,
                 stride: int = 1, padding: int = 0, dilation: int = 1, bias: bool = True,
                 dtype=np.float32):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        weight = Tensor(he_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype), requires_grad=True)
        self.register("weight", weight)
        b = None
        if bias:
            b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
            self.register("bias", b)
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def __call__(self, x: Tensor, dilation: int | None = None) -> Tensor:
        params = ConvParams(
            weight=self._params["weight"],
            bias=self._params.get("bias"),
            stride=self.stride,
            padding=self.padding if dilation is None else dilation,
            dilation=self.dilation if dilation is None else dilation,
        )
        return conv2d(x, params)
