"""Reference desk-scale architectures and the precision-map plumbing.

Two architectures are provided: ``mlp-s`` (784-256-128-10 with batch norm
and ReLU) and ``cnn-s`` (two 3x3 conv blocks with batch norm, ReLU and
2x2 max pooling, then a dense head).  A precision map assigns per-layer
weight/activation bit-widths; 32 bits means full precision (no quantizer
node at all).  Activation quantizers guard the input of each quantized
layer and sit immediately after the preceding ReLU, so a layer whose
input is not post-ReLU (the image input) never receives one.
"""

from __future__ import annotations

import numpy as np

from uniq.quantizers import Granularity
from uniq.nn.layers import (
    ActQuant,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    MaxPool2d,
    ReLU,
    RunContext,
    WeightQuantizer,
)
from uniq.nn.tensor import StructureError, Tensor

VALID_BITS = (1, 2, 3, 4, 8, 32)


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


class Model:
    def __init__(self, arch: str, input_shape: tuple, layers: list):
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.layers = layers

    def forward(self, x, training: bool = False, capture_quant_inputs: bool = False,
                surrogate: bool = False) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        want = int(np.prod(self.input_shape))
        if x.size != n * want:
            raise StructureError(
                f"{self.arch}: batch of shape {x.shape} does not match input shape {self.input_shape}")
        t = Tensor(x.reshape((n,) + self.input_shape))
        ctx = RunContext(training=training, capture_quant_inputs=capture_quant_inputs,
                         surrogate=surrogate)
        for layer in self.layers:
            t = layer.forward(t, ctx)
        return t

    # parameter access -------------------------------------------------
    def named_parameters(self):
        out = []
        for layer in self.layers:
            if isinstance(layer, (Dense, Conv2d)):
                out.append((f"{layer.name}.w", layer.w))
                out.append((f"{layer.name}.b", layer.b))
                if layer.weight_quant is not None:
                    out.append((f"{layer.name}.w_step", layer.weight_quant.step))
            elif isinstance(layer, BatchNorm):
                out.append((f"{layer.name}.gamma", layer.gamma))
                out.append((f"{layer.name}.beta", layer.beta))
            elif isinstance(layer, ActQuant):
                out.append((f"{layer.name}.step", layer.step))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # state for checkpoints ---------------------------------------------
    def named_state(self):
        """Weight/bias/batch-norm arrays in layer order (step sizes excluded)."""
        out = []
        for layer in self.layers:
            if isinstance(layer, (Dense, Conv2d)):
                out.append((f"{layer.name}.w", layer.w.data))
                out.append((f"{layer.name}.b", layer.b.data))
            elif isinstance(layer, BatchNorm):
                out.append((f"{layer.name}.gamma", layer.gamma.data))
                out.append((f"{layer.name}.beta", layer.beta.data))
                out.append((f"{layer.name}.running_mean", layer.running_mean))
                out.append((f"{layer.name}.running_var", layer.running_var))
        return out

    def load_state(self, arrays: dict) -> None:
        for name, current in self.named_state():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != current.shape:
                raise StructureError(f"state {name}: shape {arr.shape} != {current.shape}")
            current[...] = arr

    # quantizer access ---------------------------------------------------
    def weight_quant_components(self):
        return [(layer, layer.weight_quant) for layer in self.layers
                if isinstance(layer, (Dense, Conv2d)) and layer.weight_quant is not None]

    def act_quant_layers(self):
        return [layer for layer in self.layers if isinstance(layer, ActQuant)]

    def weight_quantizers(self):
        """(name, step, spec, latent weight array) per weight quantizer."""
        for layer, wq in self.weight_quant_components():
            yield f"{layer.name}.w", wq.step, wq.spec, layer.w.data

    def activation_quantizers(self):
        """(name, step, spec, captured input or None) per activation quantizer."""
        for layer in self.act_quant_layers():
            yield layer.name, layer.step, layer.spec, layer.captured

    def step_params(self):
        out = [wq.step for _, wq in self.weight_quant_components()]
        out += [aq.step for aq in self.act_quant_layers()]
        return out

    def clear_captured_inputs(self) -> None:
        for layer in self.act_quant_layers():
            layer.captured = None

    def set_observe(self, flag: bool) -> None:
        for layer in self.act_quant_layers():
            layer.observe = flag
            if flag:
                layer.reset_observations()

    def freeze_surrogate(self, x_batch, training: bool = False) -> None:
        """Capture frozen quant states at the current parameters/inputs.

        `training` must match the mode of the forward being checked, since
        batch norm feeds the activation quantizers different statistics
        per mode.
        """
        self.forward(x_batch, training=training, capture_quant_inputs=True)
        for layer, wq in self.weight_quant_components():
            wq.freeze(layer.w)
        for aq in self.act_quant_layers():
            if aq.captured is None:
                raise StructureError(f"{aq.name}: no captured input to freeze")
            aq.freeze(aq.captured)
        self.clear_captured_inputs()

    def precision_map(self) -> dict:
        out = {}
        act_bits = {}
        for layer in self.layers:
            if isinstance(layer, ActQuant):
                act_bits[layer.name.removesuffix("_in")] = layer.bits
        for layer in self.layers:
            if isinstance(layer, (Dense, Conv2d)):
                out[layer.name] = {
                    "bits_w": layer.weight_quant.bits if layer.weight_quant else 32,
                    "bits_a": act_bits.get(layer.name, 32),
                }
        return out


def _effective_bits(name: str, bits_w: int, bits_a: int, overrides: dict | None):
    o = (overrides or {}).get(name, {})
    if isinstance(o, int):
        o = {"bits_w": o, "bits_a": o}
    bw = int(o.get("bits_w", bits_w))
    ba = int(o.get("bits_a", bits_a))
    for b in (bw, ba):
        if b not in VALID_BITS:
            raise ConfigError(f"layer {name}: unsupported bit-width {b}; valid: {VALID_BITS}")
    return bw, ba


def build_model(arch: str, rng: np.random.Generator, bits_w: int = 32, bits_a: int = 32,
                overrides: dict | None = None,
                granularity_w: Granularity = Granularity.PER_KERNEL,
                step_grad_scale: float = 1.0) -> Model:
    """Construct a reference architecture with fake-quant nodes per the map.

    `overrides` maps layer names to bit-widths ({"bits_w": ..., "bits_a":
    ...} or a single int for both); unnamed layers use the global values.
    The harness applies the first/last-layer full-precision defaults
    before calling this.
    """
    arch = arch.lower()
    if arch == "mlp-s":
        return _build_mlp_s(rng, bits_w, bits_a, overrides, granularity_w, step_grad_scale)
    if arch == "cnn-s":
        return _build_cnn_s(rng, bits_w, bits_a, overrides, granularity_w, step_grad_scale)
    raise ConfigError(f"unknown architecture {arch!r}; expected 'mlp-s' or 'cnn-s'")


def _maybe_quantize_weight(layer, bits_w: int, granularity: Granularity, grad_scale: float):
    if bits_w < 32:
        layer.weight_quant = WeightQuantizer(bits_w, granularity, layer.w.data.shape[0],
                                             grad_scale=grad_scale)


def _build_mlp_s(rng, bits_w, bits_a, overrides, granularity_w, step_grad_scale) -> Model:
    names = ["dense1", "dense2", "dense3"]
    dims = [(784, 256), (256, 128), (128, 10)]
    layers = []
    for k, name in enumerate(names):
        fin, fout = dims[k]
        bw, ba = _effective_bits(name, bits_w, bits_a, overrides)
        if k > 0 and ba < 32:
            layers.append(ActQuant(f"{name}_in", ba, grad_scale=step_grad_scale))
        dense = Dense(name, fin, fout, rng)
        _maybe_quantize_weight(dense, bw, granularity_w, step_grad_scale)
        layers.append(dense)
        if k < len(names) - 1:
            layers.append(BatchNorm(f"bn{k + 1}", fout))
            layers.append(ReLU(f"relu{k + 1}"))
    return Model("mlp-s", (784,), layers)


def _build_cnn_s(rng, bits_w, bits_a, overrides, granularity_w, step_grad_scale) -> Model:
    layers = []
    bw1, _ = _effective_bits("conv1", bits_w, bits_a, overrides)
    bw2, ba2 = _effective_bits("conv2", bits_w, bits_a, overrides)
    bwd, bad = _effective_bits("dense1", bits_w, bits_a, overrides)

    conv1 = Conv2d("conv1", 1, 8, 3, rng, padding=1)
    _maybe_quantize_weight(conv1, bw1, granularity_w, step_grad_scale)
    layers += [conv1, BatchNorm("bn1", 8), ReLU("relu1")]
    if ba2 < 32:
        layers.append(ActQuant("conv2_in", ba2, grad_scale=step_grad_scale))
    layers.append(MaxPool2d("pool1"))

    conv2 = Conv2d("conv2", 8, 16, 3, rng, padding=1)
    _maybe_quantize_weight(conv2, bw2, granularity_w, step_grad_scale)
    layers += [conv2, BatchNorm("bn2", 16), ReLU("relu2")]
    if bad < 32:
        layers.append(ActQuant("dense1_in", bad, grad_scale=step_grad_scale))
    layers += [MaxPool2d("pool2"), Flatten("flatten")]

    dense = Dense("dense1", 16 * 7 * 7, 10, rng)
    _maybe_quantize_weight(dense, bwd, granularity_w, step_grad_scale)
    layers.append(dense)
    return Model("cnn-s", (1, 28, 28), layers)
