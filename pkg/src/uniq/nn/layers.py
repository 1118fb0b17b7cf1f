"""Layer zoo for the desk-scale classifiers.

Layers are plain objects holding `Tensor` parameters; `forward` threads a
`RunContext` carrying the training flag and instrumentation switches.
Weight quantization attaches to Dense/Conv2d as a `WeightQuantizer`
component (one latent weight tensor each); activation quantization is its
own `ActQuant` layer placed immediately after a ReLU, guarding the input
of the next quantized layer.  Biases and batch-norm parameters are never
quantized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from uniq.quantizers import Granularity, Mode, QuantSpec, StepParam
from uniq.nn import tensor as T
from uniq.nn.tensor import StructureError, Tensor


@dataclass
class RunContext:
    training: bool = False
    capture_quant_inputs: bool = False
    surrogate: bool = False


class WeightQuantizer:
    """Fake-quantization component wrapping one latent weight tensor."""

    def __init__(self, bits: int, granularity: Granularity, num_kernels: int,
                 grad_scale: float = 1.0):
        self.bits = bits
        self.spec = QuantSpec(Mode.WEIGHT, 2 ** bits, granularity)
        init = np.ones(num_kernels) if granularity is Granularity.PER_KERNEL else 1.0
        self.step = StepParam(init)  # placeholder until the init chain runs
        self.grad_scale = grad_scale
        self.frozen = None

    def apply(self, w: Tensor, ctx: RunContext) -> Tensor:
        if ctx.surrogate:
            if self.frozen is None:
                raise T.StateError("surrogate forward requested without a frozen capture")
            return T.fake_quant_frozen(w, self.step, self.spec, self.frozen)
        return T.fake_quant_weight(w, self.step, self.spec, self.grad_scale)

    def freeze(self, w: Tensor) -> None:
        self.frozen = T.capture_frozen_quant(w.data, self.step, self.spec)


class Dense:
    def __init__(self, name: str, in_features: int, out_features: int, rng: np.random.Generator):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        # He-style init for ReLU nets
        self.w = Tensor(rng.normal(0.0, np.sqrt(2.0 / in_features), size=(out_features, in_features)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_features), requires_grad=True)
        self.weight_quant: WeightQuantizer | None = None

    def params(self):
        ps = [self.w, self.b]
        if self.weight_quant is not None:
            ps.append(self.weight_quant.step)
        return ps

    def forward(self, x: Tensor, ctx: RunContext) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.in_features:
            raise StructureError(
                f"{self.name}: expected input (*, {self.in_features}), got {x.data.shape}")
        w = self.w if self.weight_quant is None else self.weight_quant.apply(self.w, ctx)
        return T.linear(x, w, self.b)


class Conv2d:
    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel_size: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.w = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                   size=(out_channels, in_channels, kernel_size, kernel_size)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_channels), requires_grad=True)
        self.weight_quant: WeightQuantizer | None = None

    def params(self):
        ps = [self.w, self.b]
        if self.weight_quant is not None:
            ps.append(self.weight_quant.step)
        return ps

    def forward(self, x: Tensor, ctx: RunContext) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != self.in_channels:
            raise StructureError(
                f"{self.name}: expected input (*, {self.in_channels}, h, w), got {x.data.shape}")
        w = self.w if self.weight_quant is None else self.weight_quant.apply(self.w, ctx)
        return T.conv2d(x, w, self.b, stride=self.stride, padding=self.padding)


class ReLU:
    def __init__(self, name: str):
        self.name = name

    def params(self):
        return []

    def forward(self, x: Tensor, ctx: RunContext) -> Tensor:
        return T.relu(x)


class BatchNorm:
    def __init__(self, name: str, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.name = name
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x: Tensor, ctx: RunContext) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           training=ctx.training, momentum=self.momentum, eps=self.eps)


class MaxPool2d:
    def __init__(self, name: str, size: int = 2):
        self.name = name
        self.size = size

    def params(self):
        return []

    def forward(self, x: Tensor, ctx: RunContext) -> Tensor:
        return T.maxpool2d(x, self.size)


class Flatten:
    def __init__(self, name: str):
        self.name = name

    def params(self):
        return []

    def forward(self, x: Tensor, ctx: RunContext) -> Tensor:
        return T.reshape(x, (x.data.shape[0], -1))


class ActQuant:
    """Post-ReLU activation quantizer (one per quantized consumer layer).

    In observe mode the layer is an identity that records calibration
    statistics (the per-batch scale sqrt(2*mean(x^2)) and mean |x|)
    instead of quantizing.
    """

    def __init__(self, name: str, bits: int, grad_scale: float = 1.0):
        self.name = name
        self.bits = bits
        self.spec = QuantSpec(Mode.ACTIVATION, 2 ** bits, Granularity.PER_LAYER)
        self.step = StepParam(1.0)  # placeholder until the init chain runs
        self.grad_scale = grad_scale
        self.observe = False
        self.observed_scales: list[float] = []
        self.observed_abs_mean: list[float] = []
        self.captured: np.ndarray | None = None
        self.frozen = None

    def params(self):
        return [self.step]

    def forward(self, x: Tensor, ctx: RunContext) -> Tensor:
        if self.observe:
            xd = x.data
            self.observed_scales.append(float(np.sqrt(2.0 * np.mean(np.square(xd)))))
            self.observed_abs_mean.append(float(np.mean(np.abs(xd))))
            return x
        if ctx.capture_quant_inputs:
            self.captured = x.data
        if ctx.surrogate:
            if self.frozen is None:
                raise T.StateError("surrogate forward requested without a frozen capture")
            return T.fake_quant_frozen(x, self.step, self.spec, self.frozen)
        return T.fake_quant_activation(x, self.step, self.spec, self.grad_scale)

    def freeze(self, x_data: np.ndarray) -> None:
        self.frozen = T.capture_frozen_quant(x_data, self.step, self.spec)

    def reset_observations(self) -> None:
        self.observed_scales = []
        self.observed_abs_mean = []
