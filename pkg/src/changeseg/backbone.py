"""Siamese hierarchical encoder producing stride 4/8/16/32 feature pyramids."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .layers import Conv, Module
from .tensor import ShapeError, Tensor, relu

PYRAMID_STRIDES = (4, 8, 16, 32)
DEFAULT_WIDTHS = (32, 64, 128, 256)

_REGISTRY: dict[str, Callable] = {}


def register_backbone(name: str):
    def deco(fn):
        _REGISTRY[name] = fn
        return fn

    return deco


def build_backbone(name: str, rng: np.random.Generator, widths: Sequence[int] = DEFAULT_WIDTHS,
                   in_ch: int = 3, dtype=np.float32) -> "Module":
    if name not in _REGISTRY:
        raise ValueError(f"unknown backbone {name!r}; available: {sorted(_REGISTRY)}")
    return _REGISTRY[name](rng, widths, in_ch, dtype)


class ToyBackbone(Module):
    """Stem to stride 4 then three stride-2 stages; ReLU after every conv.

    Channel widths must be non-decreasing across the four pyramid levels.
    """

    def __init__(self, rng, widths=DEFAULT_WIDTHS, in_ch=3, dtype=np.float32):
        super().__init__()
        if len(widths) != 4:
            raise ValueError(f"expected 4 channel widths, got {widths}")
        if any(a > b for a, b in zip(widths, widths[1:])):
            raise ValueError(f"channel widths must be non-decreasing, got {widths}")
        self.widths = tuple(widths)
        w0, w1, w2, w3 = widths
        self.register("stem0", Conv(rng, in_ch, w0, 3, stride=2, padding=1, dtype=dtype))
        self.register("stem1", Conv(rng, w0, w0, 3, stride=2, padding=1, dtype=dtype))
        for i, (ci, co) in enumerate(((w0, w1), (w1, w2), (w2, w3))):
            self.register(f"stage{i}a", Conv(rng, ci, co, 3, stride=2, padding=1, dtype=dtype))
            self.register(f"stage{i}b", Conv(rng, co, co, 3, stride=1, padding=1, dtype=dtype))

    def encode(self, image: Tensor) -> list:
        """Four-level pyramid from one image batch (dims divisible by 32)."""
        n, c, h, w = image.data.shape
        if h % 32 or w % 32:
            pad_h, pad_w = (-h) % 32, (-w) % 32
            raise ShapeError(
                f"input dims {h}x{w} must be divisible by 32; pad by {pad_h}x{pad_w} first"
            )
        x = relu(self._children["stem0"](image))
        x = relu(self._children["stem1"](x))
        levels = [x]
        for i in range(3):
            x = relu(self._children[f"stage{i}a"](x))
            x = relu(self._children[f"stage{i}b"](x))
            levels.append(x)
        return levels

    def __call__(self, image: Tensor) -> list:
        return self.encode(image)


register_backbone("toy")(ToyBackbone)


def encode_pair(t0: Tensor, t1: Tensor, primary: ToyBackbone, secondary: ToyBackbone | None = None):
    """Encode both images; with secondary=None the weights are shared."""
    if t0.data.shape != t1.data.shape:
        raise ShapeError(f"image pair shapes differ: {t0.data.shape} vs {t1.data.shape}")
    other = primary if secondary is None else secondary
    return primary.encode(t0), other.encode(t1)
