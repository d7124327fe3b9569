"""Multi-head soft attention classifier.

A small conv backbone produces feature maps X (N,C,H,W). A 1x1 conv with
ReLU gives M nonnegative attention maps A (N,M,H,W). Each map weights X
and is globally averaged into a part vector; the M parts are concatenated,
l2-normalized and fed to a linear classifier.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Sequence
from typing import NamedTuple

import numpy as np

from .tensor import (
    Tensor,
    conv2d,
    elementwise_mul,
    global_avg_pool,
    l2_normalize,
    linear,
    no_grad,
    relu,
    reshape,
)

DEFAULT_CHANNELS = (16, 32, 64, 64)


@dataclasses.dataclass
class AttentionModel:
    """Parameters plus the architecture knobs needed to run them."""

    params: dict[str, Tensor]
    num_heads: int
    num_classes: int
    channels: tuple[int, ...]
    attention_norm: bool = False

    @property
    def depth(self) -> int:
        return len(self.channels)

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    @property
    def representation_width(self) -> int:
        return self.num_heads * self.feature_channels

    @classmethod
    def create(
        cls,
        num_classes: int,
        num_heads: int = 32,
        depth: int = 2,
        channels: Sequence[int] | None = None,
        seed: int = 0,
        in_channels: int = 3,
        attention_norm: bool = False,
        init: str = "he",
    ) -> AttentionModel:
        if num_heads < 1:
            raise ValueError(f"need at least one attention head, got {num_heads}")
        if num_classes < 2:
            raise ValueError(f"need at least two classes, got {num_classes}")
        if channels is None:
            if not 1 <= depth <= len(DEFAULT_CHANNELS):
                raise ValueError(f"default channel schedule supports depth 1..{len(DEFAULT_CHANNELS)}, got {depth}")
            channels = DEFAULT_CHANNELS[:depth]
        channels = tuple(int(c) for c in channels)
        if init not in ("he", "fan_in"):
            raise ValueError(f"unknown init scheme {init!r}")
        rng = np.random.default_rng(seed)

        def uniform(shape, fan_in, gain=1.0):
            s = gain / np.sqrt(fan_in)
            return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)

        def conv_init(shape, fan_in):
            if init == "fan_in":
                return uniform(shape, fan_in), uniform(shape[:1], fan_in)
            return uniform(shape, fan_in, np.sqrt(6.0)), Tensor(np.zeros(shape[:1]), requires_grad=True)

        params: dict[str, Tensor] = {}
        c_in = in_channels
        for i, c_out in enumerate(channels):
            fan = c_in * 9
            params[f"backbone.{i}.weight"], params[f"backbone.{i}.bias"] = conv_init((c_out, c_in, 3, 3), fan)
            c_in = c_out
        params["attention.weight"], params["attention.bias"] = conv_init((num_heads, c_in, 1, 1), c_in)
        width = num_heads * c_in
        params["classifier.weight"] = uniform((width, num_classes), width)
        params["classifier.bias"] = uniform((num_classes,), width)
        return cls(params, num_heads, num_classes, channels, attention_norm)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def replace(self, params: dict[str, Tensor]) -> AttentionModel:
        """Shallow copy with some parameters swapped out (used by gradient checks)."""
        merged = dict(self.params)
        for name, t in params.items():
            if name not in merged:
                raise KeyError(f"unknown parameter {name!r}")
            if t.shape != merged[name].shape:
                raise ValueError(f"{name}: shape {t.shape} does not match {merged[name].shape}")
            merged[name] = t
        return dataclasses.replace(self, params=merged)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def calibrate(model: AttentionModel, images: np.ndarray) -> AttentionModel:
    """Data-dependent init: rescale every conv so its pre-activations on
    ``images`` have zero mean and unit variance per channel.

    Layers are visited in order so each sees the already calibrated output
    of the one before. Without normalization layers this keeps the ReLU
    features centred enough that the normalized representation does not
    collapse onto one direction at the start of training. Channels that
    are constant on the batch only get their mean removed.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] < 2:
        raise ValueError(f"calibration needs a (N,C,H,W) batch with N >= 2, got {images.shape}")
    names = [f"backbone.{i}" for i in range(model.depth)] + ["attention"]
    with no_grad():
        x = images
        for name in names:
            w = model.params[f"{name}.weight"].data
            b = model.params[f"{name}.bias"].data
            z = _raw_conv(name, x, w, b)
            sd = z.std(axis=(0, 2, 3))
            sd = np.where(sd > 1e-12, sd, 1.0)
            w = w / sd[:, None, None, None]
            b = b / sd
            b = b - _raw_conv(name, x, w, b).mean(axis=(0, 2, 3))
            model.params[f"{name}.weight"] = Tensor(w, requires_grad=True)
            model.params[f"{name}.bias"] = Tensor(b, requires_grad=True)
            x = np.maximum(_raw_conv(name, x, w, b), 0.0)
    return model


def _raw_conv(name: str, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    stride, pad = (1, 0) if name == "attention" else (2, 1)
    return conv2d(Tensor._wrap(x), Tensor._wrap(w), Tensor._wrap(b), stride=stride, padding=pad).data


class ForwardResult(NamedTuple):
    features: Tensor
    attention: Tensor
    representation: Tensor
    logits: Tensor


def extract_features(model: AttentionModel, images: Tensor) -> Tensor:
    """Backbone: ``depth`` blocks of 3x3 stride-2 conv + ReLU."""
    if images.ndim != 4:
        raise ValueError(f"images must be (N,C,H,W), got {images.shape}")
    div = 2 ** model.depth
    h, w = images.shape[2:]
    if h % div or w % div:
        raise ValueError(f"image size {h}x{w} must be divisible by {div} for a depth-{model.depth} backbone")
    x = images
    for i in range(model.depth):
        x = relu(conv2d(x, model.params[f"backbone.{i}.weight"], model.params[f"backbone.{i}.bias"], stride=2, padding=1))
    return x


def compute_attention(model: AttentionModel, x: Tensor) -> Tensor:
    """A = relu(conv1x1(X)), optionally l2-normalized per map."""
    c = model.params["attention.weight"].shape[1]
    if x.ndim != 4 or x.shape[1] != c:
        raise ValueError(f"feature maps {x.shape} do not have the {c} channels the attention head expects")
    a = relu(conv2d(x, model.params["attention.weight"], model.params["attention.bias"]))
    if model.attention_norm:
        a = attention_l2_normalize(a)
    return a


def attention_l2_normalize(a: Tensor) -> Tensor:
    """Scale every (sample, head) map to unit l2 norm; zero maps are unchanged."""
    n, m, h, w = a.shape
    return reshape(l2_normalize(reshape(a, (n * m, h * w))), (n, m, h, w))


def attention_pool(x: Tensor, a: Tensor) -> Tensor:
    """Part vectors h_i = mean over (h,w) of X * A_i, returned as (N,M,C)."""
    if x.ndim != 4 or a.ndim != 4:
        raise ValueError(f"expected 4-D feature and attention maps, got {x.shape} and {a.shape}")
    n, c, h, w = x.shape
    if a.shape[0] != n or a.shape[2:] != (h, w):
        raise ValueError(f"attention maps {a.shape} do not match feature maps {x.shape} in N/H/W")
    m = a.shape[1]
    weighted = elementwise_mul(reshape(x, (n, 1, c, h, w)), reshape(a, (n, m, 1, h, w)))
    pooled = global_avg_pool(reshape(weighted, (n, m * c, h, w)))
    return reshape(pooled, (n, m, c))


def global_representation(parts: Tensor) -> Tensor:
    """Concatenate the M part vectors per sample and l2-normalize."""
    n = parts.shape[0]
    return l2_normalize(reshape(parts, (n, parts.size // n)))


def classify(model: AttentionModel, h: Tensor) -> Tensor:
    width = model.params["classifier.weight"].shape[0]
    if h.ndim != 2 or h.shape[1] != width:
        raise ValueError(f"representation width {h.shape[-1]} does not match classifier input {width}")
    return linear(h, model.params["classifier.weight"], model.params["classifier.bias"])


def forward(model: AttentionModel, images: Tensor) -> ForwardResult:
    x = extract_features(model, images)
    a = compute_attention(model, x)
    h = global_representation(attention_pool(x, a))
    return ForwardResult(x, a, h, classify(model, h))
