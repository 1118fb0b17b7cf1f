"""Minimal reverse-mode autodiff over numpy arrays.

A `Tensor` wraps an ndarray plus an optional grad buffer; ops build a
tape of backward closures that `backward()` replays in reverse
topological order.  Only the ops the desk-scale classifiers need are
provided.  Fake-quant ops route input gradients through the
straight-through clip mask and accumulate step-size gradients on the
`StepParam` itself, which lives outside the tape as a leaf parameter.

Everything runs in float64; determinism follows from numpy given fixed
seeds and a fixed thread count.
"""

from __future__ import annotations

import numpy as np

from uniq.quantizers import (
    Granularity,
    Mode,
    QuantSpec,
    StepParam,
    _expand_delta,
    grad_input,
    grad_step_activation,
    grad_step_weight,
    quantize_activation,
    quantize_weight,
    round_half_away,
)


class StructureError(ValueError):
    """Layer/input shape mismatch, reported with the offending layer."""


class StateError(RuntimeError):
    """Autodiff API misuse (backward on a consumed or seedless graph)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _prev=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = _backward
        self._prev = _prev
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        """Reverse-mode sweep from this tensor.

        `seed` defaults to 1.0 for scalars; non-scalar roots must pass an
        explicit seed of matching shape.  A graph can be swept once.
        """
        if self._consumed:
            raise StateError("backward() already ran on this graph")
        if seed is None:
            if self.data.ndim != 0:
                raise StateError("backward() on a non-scalar tensor needs an explicit seed")
            seed = np.ones(())
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != self.data.shape:
            raise StateError(f"seed shape {seed.shape} does not match tensor shape {self.data.shape}")

        order: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if isinstance(p, Tensor) and id(p) not in seen:
                    stack.append((p, False))

        self.accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            node._consumed = True


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, _prev=(a, b))

    def backward(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, _prev=(a, b))

    def backward(g):
        a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def tsum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), _prev=(x,))
    out._backward = lambda g: x.accumulate(np.broadcast_to(g, x.data.shape))
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """y = x @ w.T + b with w of shape (out_features, in_features)."""
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    out = Tensor(y, _prev=(x, w, b) if b is not None else (x, w))

    def backward(g):
        x.accumulate(g @ w.data)
        w.accumulate(g.T @ x.data)
        if b is not None:
            b.accumulate(g.sum(axis=0))

    out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0), _prev=(x,))
    out._backward = lambda g: x.accumulate(g * mask)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), _prev=(x,))
    out._backward = lambda g: x.accumulate(g.reshape(x.data.shape))
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW convolution with kernel w of shape (out_ch, in_ch, kh, kw)."""
    n, c, h, ww = x.data.shape
    oc, ic, kh, kw = w.data.shape
    if ic != c:
        raise StructureError(f"conv kernel expects {ic} input channels, got {c}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1

    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (n, c, oh, ow, kh, kw)
    y = np.einsum("nchwij,ocij->nohw", windows, w.data, optimize=True)
    if b is not None:
        y = y + b.data[None, :, None, None]
    out = Tensor(y, _prev=(x, w, b) if b is not None else (x, w))

    def backward(g):
        w.accumulate(np.einsum("nchwij,nohw->ocij", windows, g, optimize=True))
        if b is not None:
            b.accumulate(g.sum(axis=(0, 2, 3)))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += np.einsum(
                    "nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True)
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        x.accumulate(gxp)

    out._backward = backward
    return out


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.data.shape
    if h % size or w % size:
        raise StructureError(f"pool size {size} does not divide spatial dims {(h, w)}")
    oh, ow = h // size, w // size
    tiles = x.data.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    tiles = tiles.reshape(n, c, oh, ow, size * size)
    idx = tiles.argmax(axis=-1)
    out = Tensor(np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0], _prev=(x,))

    def backward(g):
        gt = np.zeros((n, c, oh, ow, size * size))
        np.put_along_axis(gt, idx[..., None], g[..., None], axis=-1)
        gt = gt.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
        x.accumulate(gt.reshape(n, c, h, w))

    out._backward = backward
    return out


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Batch normalization over (0,) for 2-d inputs, (0,2,3) for NCHW.

    Batch and running variances both use the population convention; in
    training mode the running buffers are updated in place.
    """
    if x.data.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif x.data.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise StructureError(f"batchnorm expects 2-d or 4-d input, got shape {x.data.shape}")

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var

    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * invstd.reshape(bshape)
    out = Tensor(gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape),
                 _prev=(x, gamma, beta))
    m = x.data.size // gamma.data.size

    def backward(g):
        gamma.accumulate((g * xhat).sum(axis=axes))
        beta.accumulate(g.sum(axis=axes))
        scale = (gamma.data * invstd).reshape(bshape)
        if training:
            gmean = g.mean(axis=axes).reshape(bshape)
            gxhat_mean = (g * xhat).mean(axis=axes).reshape(bshape)
            x.accumulate(scale * (g - gmean - xhat * gxhat_mean))
        else:
            x.accumulate(scale * g)

    out._backward = backward
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of softmax(logits) against integer labels."""
    labels = np.asarray(labels)
    n = logits.data.shape[0]
    if labels.shape != (n,):
        raise StructureError(f"labels shape {labels.shape} does not match batch size {n}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()
    out = Tensor(loss, _prev=(logits,))

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits.accumulate(g * p / n)

    out._backward = backward
    return out


def _group_sum(values: np.ndarray, granularity: Granularity) -> np.ndarray:
    if granularity is Granularity.PER_LAYER:
        return np.asarray(values.sum())
    return values.reshape(values.shape[0], -1).sum(axis=1)


def fake_quant_weight(w: Tensor, step: StepParam, spec: QuantSpec,
                      grad_scale: float = 1.0) -> Tensor:
    """Quantize in the forward pass; STE gradients in the backward pass.

    The latent weight receives the clip-masked gradient; the step size
    accumulates the per-element step gradient summed over its group.
    """
    q = quantize_weight(w.data, step, spec)
    mask = grad_input(w.data, step, spec)
    dstep = grad_step_weight(w.data, step, spec)
    out = Tensor(q, _prev=(w,))

    def backward(g):
        w.accumulate(g * mask)
        step.grad += grad_scale * _group_sum(g * dstep, spec.granularity)

    out._backward = backward
    return out


def fake_quant_activation(x: Tensor, step: StepParam, spec: QuantSpec,
                          grad_scale: float = 1.0) -> Tensor:
    q = quantize_activation(x.data, step, spec)
    mask = grad_input(x.data, step, spec)
    dstep = grad_step_activation(x.data, step, spec)
    out = Tensor(q, _prev=(x,))

    def backward(g):
        x.accumulate(g * mask)
        step.grad += grad_scale * _group_sum(g * dstep, spec.granularity)

    out._backward = backward
    return out


def capture_frozen_quant(x_data: np.ndarray, step: StepParam, spec: QuantSpec) -> dict:
    """Freeze the round offset and clip branch of a quant op, elementwise.

    Together with `fake_quant_frozen` this turns the quantizer into a
    locally smooth function of (input, step), used as the finite-difference
    reference for whole-network gradient checks.
    """
    d = _expand_delta(step, x_data, spec)
    n = spec.levels
    if spec.mode is Mode.WEIGHT:
        u = (x_data + d * (n - 1) / 2) / d
    else:
        u = x_data / d
    below = u < 0.0
    above = u > n - 1.0
    c = round_half_away(np.clip(u, 0.0, n - 1.0)) - u
    return {"below": below, "above": above, "c": np.where(below | above, 0.0, c)}


def fake_quant_frozen(x: Tensor, step: StepParam, spec: QuantSpec, frozen: dict) -> Tensor:
    """Forward of the frozen surrogate; value-only, carries no backward."""
    d = _expand_delta(step, x.data, spec)
    n = spec.levels
    y = x.data + frozen["c"] * d
    if spec.mode is Mode.WEIGHT:
        alpha = d * (n - 1) / 2
        y = np.where(frozen["below"], -alpha, y)
        y = np.where(frozen["above"], alpha, y)
    else:
        y = np.where(frozen["below"], 0.0, y)
        y = np.where(frozen["above"], (n - 1) * d, y)
    return Tensor(y, _prev=(x,))
