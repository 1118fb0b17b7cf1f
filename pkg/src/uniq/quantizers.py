"""Uniform fake-quantization primitives with a learnable step size.

Two quantizer shapes are provided:

* weight mode: N evenly spaced reconstruction levels placed symmetrically
  about zero.  For even N zero is not a level; the levels are
  ``{-alpha, -alpha+delta, ..., alpha}`` with ``alpha = delta*(N-1)/2``.
* activation mode: N nonnegative levels ``{0, delta, ..., (N-1)*delta}``
  with zero always representable (inputs are post-ReLU).

Rounding ties break half away from zero, everywhere.  Step-size gradients
use the straight-through estimator (round treated as identity); input
gradients are the usual clip-range pass-through mask.

All functions are pure and operate elementwise on numpy arrays; per-kernel
step sizes are one scalar per output channel (axis 0 of the tensor).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

# step sizes are clamped to this floor after every optimizer update
STEP_EPS = 1e-8


class QuantError(ValueError):
    """Invalid quantizer parameter or input."""


class NonFiniteInputError(QuantError):
    """NaN reached a quantizer input; failing fast instead of propagating."""


class Mode(enum.Enum):
    WEIGHT = "weight"
    ACTIVATION = "activation"


class Granularity(enum.Enum):
    PER_LAYER = "per-layer"
    PER_KERNEL = "per-kernel"


class TieRule(enum.Enum):
    HALF_AWAY_FROM_ZERO = "half-away-from-zero"


@dataclass(frozen=True)
class QuantSpec:
    """Static description of one quantizer: mode, level count, grouping."""

    mode: Mode
    levels: int
    granularity: Granularity = Granularity.PER_LAYER
    tie_rule: TieRule = TieRule.HALF_AWAY_FROM_ZERO

    def __post_init__(self):
        if not isinstance(self.levels, int) or self.levels < 2 or self.levels % 2 != 0:
            raise QuantError(f"levels must be an even integer >= 2, got {self.levels!r}")
        if self.granularity is Granularity.PER_KERNEL and self.mode is not Mode.WEIGHT:
            raise QuantError("per-kernel grouping is only valid for weight quantizers")

    @property
    def bits(self) -> int:
        return max(1, math.ceil(math.log2(self.levels)))


class StepParam:
    """Learnable step size: a positive scalar per quantization group.

    Shape () for per-layer grouping, (G,) for per-kernel with G output
    channels.  ``grad`` accumulates the step-size gradient between
    optimizer steps.  ``alpha`` (the weight-mode clip level) is always
    derived from ``delta``, never stored.
    """

    __slots__ = ("delta", "grad")

    def __init__(self, delta):
        arr = np.array(delta, dtype=np.float64)
        if arr.ndim > 1:
            raise QuantError(f"step size must be scalar or 1-d, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise QuantError(f"step size must be positive and finite, got {arr!r}")
        self.delta = arr
        self.grad = np.zeros_like(arr)

    # uniform parameter interface shared with autodiff tensors
    @property
    def data(self) -> np.ndarray:
        return self.delta

    @data.setter
    def data(self, value) -> None:
        self.delta = np.asarray(value, dtype=np.float64)

    def alpha(self, levels: int) -> np.ndarray:
        return self.delta * (levels - 1) / 2

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.delta)

    def clamp_min(self, eps: float = STEP_EPS) -> None:
        self.delta = np.maximum(self.delta, eps)

    @property
    def num_groups(self) -> int:
        return 1 if self.delta.ndim == 0 else self.delta.shape[0]

    def __repr__(self):
        return f"StepParam(delta={self.delta!r})"


def round_half_away(u: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    u = np.asarray(u)
    return np.sign(u) * np.floor(np.abs(u) + 0.5)


def _as_input(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise NonFiniteInputError("quantizer input contains NaN")
    return x


def _expand_delta(step: StepParam, x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Validate the step against the spec and broadcast it over x."""
    d = step.delta
    if np.any(d <= 0):
        raise QuantError("step size must be positive")
    if spec.granularity is Granularity.PER_LAYER:
        if d.ndim != 0:
            raise QuantError("per-layer quantizer expects a scalar step size")
        return d
    if d.ndim != 1 or x.ndim < 1 or d.shape[0] != x.shape[0]:
        raise QuantError(
            f"per-kernel step of shape {d.shape} does not match {x.shape[0] if x.ndim else 0} output channels"
        )
    return d.reshape((-1,) + (1,) * (x.ndim - 1))


def quantize_weight(x, step: StepParam, spec: QuantSpec) -> np.ndarray:
    """Symmetric weight quantizer: round(clip((x+alpha)/delta)) * delta - alpha."""
    if spec.mode is not Mode.WEIGHT:
        raise QuantError("quantize_weight requires a weight-mode spec")
    x = _as_input(x)
    d = _expand_delta(step, x, spec)
    n = spec.levels
    alpha = d * (n - 1) / 2
    u = np.clip((x + alpha) / d, 0.0, n - 1.0)
    # evaluate round(u)*d - alpha through the odd-code form so that
    # decode(encode(x)) reproduces this output bit for bit
    return (2 * round_half_away(u) - (n - 1)) * (d / 2)


def quantize_activation(x, step: StepParam, spec: QuantSpec) -> np.ndarray:
    """Nonnegative activation quantizer: round(clip(x/delta)) * delta."""
    if spec.mode is not Mode.ACTIVATION:
        raise QuantError("quantize_activation requires an activation-mode spec")
    x = _as_input(x)
    d = _expand_delta(step, x, spec)
    u = np.clip(x / d, 0.0, spec.levels - 1.0)
    return round_half_away(u) * d


def quantize(x, step: StepParam, spec: QuantSpec) -> np.ndarray:
    """Dispatch on spec.mode."""
    if spec.mode is Mode.WEIGHT:
        return quantize_weight(x, step, spec)
    return quantize_activation(x, step, spec)


def grad_step_weight(x, step: StepParam, spec: QuantSpec, *, alpha_saturation: bool = False) -> np.ndarray:
    """STE gradient of the weight quantizer w.r.t. its step size.

    Interior (|x| < alpha): -x/delta + round((x+alpha)/delta) - (N-1)/2.
    Saturated: sign(x)*(N-1)/2, the exact derivative of the clip level
    +-alpha.  ``alpha_saturation=True`` switches the saturated branch to
    sign(x)*alpha instead (carries an extra factor of delta); kept only
    for A/B comparison, it disagrees with finite differences of the
    frozen-offset surrogate whenever delta != 1.
    """
    if spec.mode is not Mode.WEIGHT:
        raise QuantError("grad_step_weight requires a weight-mode spec")
    x = _as_input(x)
    d = _expand_delta(step, x, spec)
    n = spec.levels
    alpha = d * (n - 1) / 2
    u = np.clip((x + alpha) / d, 0.0, n - 1.0)
    inner = -x / d + round_half_away(u) - (n - 1) / 2
    if alpha_saturation:
        outer = np.sign(x) * alpha
    else:
        outer = np.sign(x) * ((n - 1) / 2)
    return np.where(np.abs(x) < alpha, inner, np.broadcast_to(outer, inner.shape))


def grad_step_activation(x, step: StepParam, spec: QuantSpec) -> np.ndarray:
    """STE gradient of the activation quantizer w.r.t. its step size.

    0 for x <= 0; -x/delta + round(x/delta) strictly inside the range;
    N-1 once saturated at x >= (N-1)*delta.
    """
    if spec.mode is not Mode.ACTIVATION:
        raise QuantError("grad_step_activation requires an activation-mode spec")
    x = _as_input(x)
    d = _expand_delta(step, x, spec)
    n = spec.levels
    u = np.clip(x / d, 0.0, n - 1.0)
    inner = -x / d + round_half_away(u)
    out = np.where(x <= 0, 0.0, inner)
    return np.where(x >= (n - 1) * d, float(n - 1), out)


def grad_input(x, step: StepParam, spec: QuantSpec) -> np.ndarray:
    """STE pass-through mask: 1 strictly inside the clip range, else 0."""
    x = _as_input(x)
    d = _expand_delta(step, x, spec)
    n = spec.levels
    if spec.mode is Mode.WEIGHT:
        alpha = d * (n - 1) / 2
        mask = np.abs(x) < alpha
    else:
        mask = (x > 0) & (x < (n - 1) * d)
    return mask.astype(np.float64)


@dataclass(frozen=True)
class QuantCode:
    """Integer encoding of weight-quantized values.

    Codes are odd integers in {-(N-1), ..., N-1}; decoding as
    codes * delta / 2 reproduces the quantizer output bit for bit.
    """

    codes: np.ndarray
    delta: np.ndarray

    def decode(self) -> np.ndarray:
        d = self.delta
        if d.ndim == 1 and self.codes.ndim > 1:
            d = d.reshape((-1,) + (1,) * (self.codes.ndim - 1))
        return self.codes * (d / 2)


def encode(x, step: StepParam, spec: QuantSpec) -> QuantCode:
    """Encode weight-quantized values as odd signed integers."""
    if spec.mode is not Mode.WEIGHT:
        raise QuantError("encode requires a weight-mode spec")
    x = _as_input(x)
    d = _expand_delta(step, x, spec)
    n = spec.levels
    alpha = d * (n - 1) / 2
    u = np.clip((x + alpha) / d, 0.0, n - 1.0)
    codes = (2 * round_half_away(u) - (n - 1)).astype(np.int64)
    return QuantCode(codes=codes, delta=step.delta.copy())


def decode(code: QuantCode) -> np.ndarray:
    return code.decode()


def quantize_fixedpoint_baseline(x, delta: float, bits: int) -> np.ndarray:
    """Two's-complement fixed-point quantizer (comparison baseline).

    Integer range [-2**(bits-1), 2**(bits-1)-1]: one more negative level
    than positive, zero representable.
    """
    if bits < 2:
        raise QuantError(f"fixed-point baseline needs bits >= 2, got {bits}")
    delta = float(delta)
    if not delta > 0:
        raise QuantError("step size must be positive")
    x = _as_input(x)
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return np.clip(round_half_away(x / delta), lo, hi) * delta
