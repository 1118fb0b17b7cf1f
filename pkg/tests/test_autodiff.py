import numpy as np
import pytest

from uniq.nn import tensor as T
from uniq.nn.tensor import StateError, Tensor
from uniq.quantizers import Granularity, Mode, QuantSpec, StepParam, grad_step_activation


def numeric_grad(loss_fn, arr, h=1e-6):
    """Central finite differences of loss_fn() w.r.t. the array, in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = loss_fn()
        arr[idx] = old - h
        fm = loss_fn()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rand_weights(rng, shape):
    return rng.normal(size=shape)


class TestOpGradients:
    """Each op against full finite differences on small shapes."""

    def check(self, params, build_loss, rtol=1e-6, atol=1e-8):
        loss = build_loss()
        loss.backward()
        for p in params:
            analytic = p.grad.copy()
            fd = numeric_grad(lambda: float(build_loss().data), p.data)
            np.testing.assert_allclose(analytic, fd, rtol=rtol, atol=atol)

    def test_linear(self):
        rng = np.random.default_rng(31)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=5), requires_grad=True)
        r = rng.normal(size=(4, 5))

        def build():
            return T.tsum(T.mul(T.linear(x, w, b), Tensor(r)))

        self.check([x, w, b], build)

    def test_relu(self):
        rng = np.random.default_rng(32)
        x = Tensor(rng.normal(size=(6, 4)) + 0.05, requires_grad=True)  # keep away from the kink
        r = rng.normal(size=(6, 4))
        self.check([x], lambda: T.tsum(T.mul(T.relu(x), Tensor(r))))

    def test_conv2d(self):
        rng = np.random.default_rng(33)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.5, requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)
        r = rng.normal(size=(2, 4, 6, 6))

        def build():
            return T.tsum(T.mul(T.conv2d(x, w, b, padding=1), Tensor(r)))

        self.check([x, w, b], build, rtol=1e-5, atol=1e-7)

    def test_conv2d_stride2(self):
        rng = np.random.default_rng(34)
        x = Tensor(rng.normal(size=(2, 2, 8, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
        r = rng.normal(size=(2, 3, 3, 3))

        def build():
            return T.tsum(T.mul(T.conv2d(x, w, None, stride=2), Tensor(r)))

        self.check([x, w], build, rtol=1e-5, atol=1e-7)

    def test_maxpool(self):
        rng = np.random.default_rng(35)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        r = rng.normal(size=(2, 3, 2, 2))
        self.check([x], lambda: T.tsum(T.mul(T.maxpool2d(x, 2), Tensor(r))))

    def test_batchnorm_training(self):
        rng = np.random.default_rng(36)
        x = Tensor(rng.normal(size=(8, 5)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=5), requires_grad=True)
        beta = Tensor(rng.normal(size=5), requires_grad=True)
        r = rng.normal(size=(8, 5))

        def build():
            rm, rv = np.zeros(5), np.ones(5)  # fresh buffers so FD evals do not drift
            return T.tsum(T.mul(T.batchnorm(x, gamma, beta, rm, rv, training=True), Tensor(r)))

        self.check([x, gamma, beta], build, rtol=1e-5, atol=1e-7)

    def test_batchnorm_eval(self):
        rng = np.random.default_rng(37)
        x = Tensor(rng.normal(size=(8, 5)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=5), requires_grad=True)
        beta = Tensor(rng.normal(size=5), requires_grad=True)
        rm, rv = rng.normal(size=5) * 0.1, rng.uniform(0.5, 2.0, size=5)
        r = rng.normal(size=(8, 5))

        def build():
            return T.tsum(T.mul(T.batchnorm(x, gamma, beta, rm, rv, training=False), Tensor(r)))

        self.check([x, gamma, beta], build)

    def test_batchnorm_4d(self):
        rng = np.random.default_rng(38)
        x = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=2), requires_grad=True)
        beta = Tensor(rng.normal(size=2), requires_grad=True)
        r = rng.normal(size=(3, 2, 4, 4))

        def build():
            rm, rv = np.zeros(2), np.ones(2)
            return T.tsum(T.mul(T.batchnorm(x, gamma, beta, rm, rv, training=True), Tensor(r)))

        self.check([x, gamma, beta], build, rtol=1e-5, atol=1e-7)

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(39)
        logits = Tensor(rng.normal(size=(6, 10)), requires_grad=True)
        labels = rng.integers(0, 10, size=6)
        self.check([logits], lambda: T.softmax_cross_entropy(logits, labels))


class TestFakeQuantOps:
    def test_single_op_chain_matches_step_gradient(self):
        # L = Q_a(x): dL/d(delta) equals grad_step_activation elementwise sum
        spec = QuantSpec(Mode.ACTIVATION, 4)
        step = StepParam(0.7)
        x = Tensor(np.array([0.3, 1.1, 5.0, -0.2]), requires_grad=True)
        out = T.fake_quant_activation(x, step, spec)
        T.tsum(out).backward()
        want = grad_step_activation(x.data, step, spec).sum()
        assert step.grad == pytest.approx(want, rel=1e-12)

    def test_per_kernel_group_sums(self):
        spec = QuantSpec(Mode.WEIGHT, 4, Granularity.PER_KERNEL)
        step = StepParam([0.5, 1.0, 2.0])
        w = Tensor(np.random.default_rng(40).normal(size=(3, 7)), requires_grad=True)
        out = T.fake_quant_weight(w, step, spec)
        T.tsum(out).backward()
        assert step.grad.shape == (3,)

    def test_frozen_surrogate_value_matches_quantizer(self):
        rng = np.random.default_rng(41)
        spec = QuantSpec(Mode.WEIGHT, 4)
        step = StepParam(0.8)
        w = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
        frozen = T.capture_frozen_quant(w.data, step, spec)
        out = T.fake_quant_frozen(w, step, spec, frozen)
        from uniq.quantizers import quantize_weight
        np.testing.assert_allclose(out.data, quantize_weight(w.data, step, spec), atol=1e-15)


class TestTape:
    def test_zero_upstream_gradient(self):
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        out = T.tsum(T.linear(x, w, None))
        out.backward(np.zeros(()))
        assert np.all(w.grad == 0)
        assert np.all(x.grad == 0)

    def test_double_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        out = T.tsum(x)
        out.backward()
        with pytest.raises(StateError):
            out.backward()

    def test_nonscalar_backward_needs_seed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        out = T.relu(x)
        with pytest.raises(StateError):
            out.backward()

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        out = T.add(x, x)
        out.backward()
        assert x.grad == 2.0
