import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from uniq.quantizers import (
    Granularity,
    Mode,
    NonFiniteInputError,
    QuantError,
    QuantSpec,
    StepParam,
    decode,
    encode,
    grad_input,
    grad_step_activation,
    grad_step_weight,
    quantize_activation,
    quantize_fixedpoint_baseline,
    quantize_weight,
    round_half_away,
)

W4 = QuantSpec(Mode.WEIGHT, 4)
W2 = QuantSpec(Mode.WEIGHT, 2)
A4 = QuantSpec(Mode.ACTIVATION, 4)

levels_st = st.sampled_from([2, 4, 8, 16])
x_st = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)
delta_st = st.floats(min_value=1e-3, max_value=1e3, allow_nan=False)


def away_from_tie(x, delta, spec, margin=1e-6):
    n = spec.levels
    if spec.mode is Mode.WEIGHT:
        u = (x + delta * (n - 1) / 2) / delta
    else:
        u = x / delta
    frac = u - np.floor(u)
    return abs(abs(frac) - 0.5) > margin and abs(u) > margin and abs(u - (n - 1)) > margin


class TestWeightQuantizer:
    def test_hand_example(self):
        assert quantize_weight(0.7, StepParam(1.0), W4) == 0.5

    def test_odd_symmetry_example(self):
        assert quantize_weight(-0.7, StepParam(1.0), W4) == -0.5

    def test_saturation(self):
        assert quantize_weight(10.0, StepParam(1.0), W4) == 1.5

    def test_reconstruction_levels(self):
        xs = np.linspace(-4, 4, 4001)
        q = quantize_weight(xs, StepParam(1.0), W4)
        assert set(np.unique(q)) == {-1.5, -0.5, 0.5, 1.5}

    def test_zero_never_a_level(self):
        for n in (2, 4, 8, 16):
            spec = QuantSpec(Mode.WEIGHT, n)
            xs = np.linspace(-3 * n, 3 * n, 8001)
            q = np.unique(quantize_weight(xs, StepParam(0.37), spec))
            assert len(q) == n
            assert 0.0 not in q
            np.testing.assert_allclose(q, -q[::-1], rtol=0, atol=0)

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(QuantError):
            StepParam(0.0)
        with pytest.raises(QuantError):
            StepParam(-1.0)

    def test_nan_fails_fast(self):
        with pytest.raises(NonFiniteInputError):
            quantize_weight(np.array([0.1, np.nan]), StepParam(1.0), W4)

    def test_mode_mismatch(self):
        with pytest.raises(QuantError):
            quantize_weight(0.5, StepParam(1.0), A4)
        with pytest.raises(QuantError):
            quantize_activation(0.5, StepParam(1.0), W4)

    def test_all_zero_weights_are_legal(self):
        q = quantize_weight(np.zeros(16), StepParam(0.5), W4)
        assert np.all(np.abs(q) == 0.25)  # zero rounds up to +delta/2 (ties away from zero)

    def test_per_kernel_broadcast(self):
        spec = QuantSpec(Mode.WEIGHT, 4, Granularity.PER_KERNEL)
        x = np.array([[0.7, -0.7], [1.4, -1.4]])
        step = StepParam([1.0, 2.0])
        q = quantize_weight(x, step, spec)
        np.testing.assert_array_equal(q, [[0.5, -0.5], [1.0, -1.0]])

    def test_per_kernel_shape_mismatch(self):
        spec = QuantSpec(Mode.WEIGHT, 4, Granularity.PER_KERNEL)
        with pytest.raises(QuantError):
            quantize_weight(np.zeros((3, 2)), StepParam([1.0, 2.0]), spec)

    def test_per_kernel_activation_spec_rejected(self):
        with pytest.raises(QuantError):
            QuantSpec(Mode.ACTIVATION, 4, Granularity.PER_KERNEL)

    def test_bad_levels_rejected(self):
        for bad in (3, 1, 0, -2):
            with pytest.raises(QuantError):
                QuantSpec(Mode.WEIGHT, bad)


class TestActivationQuantizer:
    def test_zero_is_fixed_level(self):
        assert quantize_activation(0.0, StepParam(1.0), A4) == 0.0

    def test_hand_example(self):
        assert quantize_activation(0.6, StepParam(1.0), A4) == 1.0

    def test_saturation(self):
        assert quantize_activation(5.0, StepParam(1.0), A4) == 3.0

    def test_level_set(self):
        xs = np.linspace(-2, 9, 5001)
        q = np.unique(quantize_activation(xs, StepParam(0.7), A4))
        np.testing.assert_allclose(q, [0.0, 0.7, 1.4, 2.1], atol=1e-15)


class TestStepGradients:
    def test_weight_interior(self):
        assert grad_step_weight(0.7, StepParam(1.0), W4) == pytest.approx(-0.2, abs=1e-12)

    def test_weight_saturated_has_no_delta_factor(self):
        # distinguishes the corrected branch (N-1)/2 from sign(x)*alpha
        assert grad_step_weight(10.0, StepParam(2.0), W4) == 1.5

    def test_weight_saturated_negative(self):
        assert grad_step_weight(-10.0, StepParam(1.0), W2) == -0.5

    def test_weight_alpha_saturation_flag(self):
        assert grad_step_weight(10.0, StepParam(2.0), W4, alpha_saturation=True) == 3.0

    def test_activation_clipped_to_zero(self):
        assert grad_step_activation(-1.0, StepParam(0.3), A4) == 0.0
        assert grad_step_activation(-1.0, StepParam(2.0), QuantSpec(Mode.ACTIVATION, 16)) == 0.0

    def test_activation_interior(self):
        assert grad_step_activation(0.6, StepParam(1.0), A4) == pytest.approx(0.4, abs=1e-12)

    def test_activation_saturated(self):
        assert grad_step_activation(5.0, StepParam(1.0), A4) == 3.0

    def test_input_mask(self):
        step = StepParam(1.0)
        assert grad_input(0.7, step, W4) == 1.0
        assert grad_input(10.0, step, W4) == 0.0
        assert grad_input(-0.1, step, A4) == 0.0
        assert grad_input(0.5, step, A4) == 1.0
        assert grad_input(3.5, step, A4) == 0.0


class TestEncoding:
    def test_hand_example(self):
        code = encode(0.7, StepParam(1.0), W4)
        assert code.codes == 1
        assert decode(code) == 0.5

    def test_max_code(self):
        assert encode(10.0, StepParam(1.0), W4).codes == 3

    def test_binary_codes(self):
        xs = np.linspace(-3, 3, 101)
        codes = encode(xs, StepParam(1.0), W2).codes
        assert set(np.unique(codes)) == {-1, 1}

    def test_roundtrip_bit_exact(self):
        rng = np.random.default_rng(8)
        for n in (2, 4, 8, 16):
            spec = QuantSpec(Mode.WEIGHT, n)
            step = StepParam(rng.uniform(0.05, 2.0))
            x = rng.normal(size=1000) * 3
            np.testing.assert_array_equal(decode(encode(x, step, spec)), quantize_weight(x, step, spec))

    def test_roundtrip_per_kernel(self):
        spec = QuantSpec(Mode.WEIGHT, 8, Granularity.PER_KERNEL)
        rng = np.random.default_rng(3)
        step = StepParam(rng.uniform(0.1, 1.0, size=5))
        x = rng.normal(size=(5, 7, 3))
        np.testing.assert_array_equal(decode(encode(x, step, spec)), quantize_weight(x, step, spec))

    def test_codes_odd_and_bounded(self):
        rng = np.random.default_rng(4)
        for n in (2, 4, 8, 16):
            codes = encode(rng.normal(size=500) * 4, StepParam(0.5), QuantSpec(Mode.WEIGHT, n)).codes
            assert np.all(codes % 2 != 0)
            assert np.all(np.abs(codes) <= n - 1)


class TestFixedPointBaseline:
    def test_representable_values(self):
        xs = np.linspace(-5, 5, 2001)
        q = np.unique(quantize_fixedpoint_baseline(xs, 1.0, 2))
        np.testing.assert_array_equal(q, [-2.0, -1.0, 0.0, 1.0])

    def test_zero(self):
        assert quantize_fixedpoint_baseline(0.0, 0.3, 4) == 0.0

    def test_positive_saturation(self):
        assert quantize_fixedpoint_baseline(5.0, 1.0, 2) == 1.0

    def test_one_bit_rejected(self):
        with pytest.raises(QuantError):
            quantize_fixedpoint_baseline(1.0, 1.0, 1)


class TestRounding:
    def test_half_away_from_zero(self):
        np.testing.assert_array_equal(
            round_half_away(np.array([-2.5, -1.5, -0.5, 0.0, 0.5, 1.5, 2.5])),
            [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0],
        )


@given(x=x_st, delta=delta_st, n=levels_st)
def test_odd_symmetry(x, delta, n):
    spec = QuantSpec(Mode.WEIGHT, n)
    assume(away_from_tie(x, delta, spec))
    step = StepParam(delta)
    assert quantize_weight(-x, step, spec) == -quantize_weight(x, step, spec)


@given(x=x_st, delta=delta_st, n=levels_st, mode=st.sampled_from(list(Mode)))
def test_idempotence(x, delta, n, mode):
    spec = QuantSpec(mode, n)
    step = StepParam(delta)
    fn = quantize_weight if mode is Mode.WEIGHT else quantize_activation
    q = fn(x, step, spec)
    assert fn(q, step, spec) == q


@given(x1=x_st, x2=x_st, delta=delta_st, n=levels_st, mode=st.sampled_from(list(Mode)))
def test_monotonicity(x1, x2, delta, n, mode):
    spec = QuantSpec(mode, n)
    step = StepParam(delta)
    fn = quantize_weight if mode is Mode.WEIGHT else quantize_activation
    lo, hi = min(x1, x2), max(x1, x2)
    assert fn(lo, step, spec) <= fn(hi, step, spec)


@given(x=x_st, delta=st.floats(0.01, 100), c=st.floats(1e-3, 1e3), n=levels_st)
def test_scale_equivariance(x, delta, c, n):
    spec = QuantSpec(Mode.WEIGHT, n)
    assume(away_from_tie(x, delta, spec, margin=1e-5))
    lhs = quantize_weight(c * x, StepParam(c * delta), spec)
    rhs = c * quantize_weight(x, StepParam(delta), spec)
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-300)


@given(x=x_st, delta=st.floats(0.01, 100), c=st.floats(1e-3, 1e3), n=levels_st)
def test_scale_equivariance_activation(x, delta, c, n):
    spec = QuantSpec(Mode.ACTIVATION, n)
    assume(away_from_tie(x, delta, spec, margin=1e-5))
    lhs = quantize_activation(c * x, StepParam(c * delta), spec)
    rhs = c * quantize_activation(x, StepParam(delta), spec)
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-300)
