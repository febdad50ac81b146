"""Layer specifications, parameter init, and SGD with momentum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, TrainingError

LAYER_KINDS = ("conv", "max-pool", "avg-pool", "fully-connected", "relu")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a stack; only the fields relevant to `kind` are used."""

    kind: str
    name: str = ""
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"layer {self.name or '?'}: unknown kind {self.kind!r}")


def output_hw(spec: LayerSpec, hw):
    """Spatial dims after `spec`: floor((in + 2*pad - kernel)/stride) + 1."""
    h, w = hw
    if spec.kind in ("conv", "max-pool", "avg-pool"):
        oh = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        ow = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        if oh <= 0 or ow <= 0:
            raise ConfigurationError(
                f"layer {spec.name or spec.kind}: non-positive output "
                f"{oh}x{ow} for input {h}x{w}"
            )
        return oh, ow
    return h, w


def output_channels(spec: LayerSpec, channels):
    if spec.kind in ("conv", "fully-connected"):
        return spec.out_channels
    return channels


def init_layer_params(spec: LayerSpec, rng: np.random.Generator, scheme="gaussian", std=0.01):
    """Weight/bias tensors for a spec; biases start at zero.

    `gaussian` draws N(0, std^2) everywhere; `he` scales the std per layer
    by sqrt(2/fan_in), which random-init desk-scale training needs.
    """
    if spec.kind == "conv":
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        fan_in = spec.in_channels * spec.kernel * spec.kernel
    elif spec.kind == "fully-connected":
        shape = (spec.out_channels, spec.in_channels)
        fan_in = spec.in_channels
    else:
        return {}
    sigma = std if scheme == "gaussian" else np.sqrt(2.0 / fan_in)
    weight = rng.normal(0.0, sigma, size=shape).astype(np.float32)
    bias = np.zeros(shape[0], dtype=np.float32)
    return {"weight": T.parameter(weight), "bias": T.parameter(bias)}


def forward_layer(x: T.Tensor, spec: LayerSpec, params=None) -> T.Tensor:
    """Apply one layer; raises ConfigurationError naming the layer on shape mismatch."""
    name = spec.name or spec.kind
    if spec.kind == "conv":
        if x.ndim != 4 or x.shape[1] != spec.in_channels:
            raise ConfigurationError(
                f"layer {name}: expected (N,{spec.in_channels},H,W) input, got {x.shape}"
            )
        output_hw(spec, x.shape[2:])
        return T.conv2d(x, params["weight"], params["bias"], spec.stride, spec.padding)
    if spec.kind == "max-pool":
        output_hw(spec, x.shape[2:])
        return T.max_pool2d(x, (spec.kernel, spec.kernel), spec.stride)
    if spec.kind == "avg-pool":
        output_hw(spec, x.shape[2:])
        return T.avg_pool2d(x, (spec.kernel, spec.kernel), spec.stride)
    if spec.kind == "relu":
        return T.relu(x)
    # fully-connected
    if x.ndim > 2:
        x = T.reshape(x, (x.shape[0], -1))
    if x.shape[-1] != spec.in_channels:
        raise ConfigurationError(
            f"layer {name}: expected {spec.in_channels} input features, got {x.shape[-1]}"
        )
    return T.linear(x, params["weight"], params["bias"])


class SGD:
    """Mini-batch SGD: v <- momentum*v + g; p <- p - lr*v."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, iteration=None):
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                where = f" at iteration {iteration}" if iteration is not None else ""
                raise TrainingError(f"non-finite gradient in {name}{where}")
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.data.dtype)


def sgd_step(param: T.Tensor, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float):
    """Single-parameter update used by the optimizer; exposed for direct testing."""
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient")
    velocity *= momentum
    velocity += grad
    param.data -= (lr * velocity).astype(param.data.dtype)
    return param
