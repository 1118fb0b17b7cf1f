"""Analytic MSE-optimal step sizes and statistics-based initializers.

For a unit-variance input model, the step size minimizing the expected
squared quantization error depends only on the quantizer shape and level
count.  Those unit constants are solved once (bisection on the derivative
of the expected error) and scaled at init time by a measured statistic of
the actual quantizer input: the sample standard deviation for weights,
sqrt(2*mean(x^2)) for post-ReLU activations.

Input models: weights are standard Gaussian; activations are rectified
standard Gaussian.  The rectified input is half a point mass at zero and
half a continuous positive part; all integrals here use the conditional
density of the continuous part, 2*phi(x) on x > 0, which has unit second
moment.  SQNR is reported as full-input variance over full-input MSE,
which is the convention the reference constants in `UNIT_STEP_TARGETS`
follow.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from scipy import integrate

from uniq.quantizers import (
    Granularity,
    Mode,
    QuantError,
    QuantSpec,
    StepParam,
    quantize,
)

TAIL_SIGMA = 12.0
QUAD_ABS_TOL = 1e-10
BISECT_TOL = 1e-7
BRACKET = (1e-3, 10.0)
SCALE_EPS = 1e-8

_SQRT_2PI = math.sqrt(2 * math.pi)


class NumericalError(RuntimeError):
    """Quadrature failed to reach the requested accuracy."""


class SolverError(NumericalError):
    """Root bracketing or bisection failed."""


def _phi(x):
    return np.exp(-0.5 * np.square(x)) / _SQRT_2PI


@dataclass(frozen=True)
class InputDistribution:
    """Input model for one quantizer mode.

    ``pdf`` is the density of the continuous part only (for the rectified
    Gaussian: the conditional density 2*phi on x > 0, unit second moment).
    ``continuous_mass`` is the probability the full input lands in the
    continuous part, and ``variance`` is the variance of the full input
    including any point mass -- the signal power used for SQNR.
    """

    kind: str
    pdf: Callable[[np.ndarray], np.ndarray]
    support: tuple[float, float]
    symmetric: bool
    continuous_mass: float
    variance: float


STD_GAUSSIAN = InputDistribution(
    kind="std-gaussian",
    pdf=_phi,
    support=(-TAIL_SIGMA, TAIL_SIGMA),
    symmetric=True,
    continuous_mass=1.0,
    variance=1.0,
)

STD_HALF_GAUSSIAN = InputDistribution(
    kind="std-half-gaussian",
    pdf=lambda x: 2.0 * _phi(x),
    support=(0.0, TAIL_SIGMA),
    symmetric=False,
    continuous_mass=0.5,
    variance=0.5 - 1.0 / (2.0 * math.pi),
)


def default_distribution(mode: Mode) -> InputDistribution:
    return STD_GAUSSIAN if mode is Mode.WEIGHT else STD_HALF_GAUSSIAN


def _check_delta(delta: float) -> float:
    delta = float(delta)
    if not (delta > 0 and math.isfinite(delta)):
        raise QuantError(f"step size must be positive and finite, got {delta}")
    return delta


def _cell_edges(delta: float, levels: int, mode: Mode, support) -> np.ndarray:
    """Decision boundaries of the quantizer, clipped to the support."""
    lo, hi = support
    if mode is Mode.WEIGHT:
        ks = np.arange(-(levels // 2 - 1), levels // 2)
        inner = ks * delta
    else:
        js = np.arange(0, levels - 1)
        inner = (js + 0.5) * delta
    inner = inner[(inner > lo) & (inner < hi)]
    return np.concatenate(([lo], inner, [hi]))


def expected_mse(delta: float, levels: int, mode: Mode, dist: InputDistribution | None = None) -> float:
    """Expected squared quantization error under the input model.

    Adaptive quadrature per quantizer cell, tail truncated at the support
    edge (12 sigma).  With the half-Gaussian conditional density this is
    the error conditioned on a nonzero input.
    """
    delta = _check_delta(delta)
    dist = dist or default_distribution(mode)
    spec = QuantSpec(mode, levels)
    step = StepParam(delta)
    edges = _cell_edges(delta, levels, mode, dist.support)
    total = 0.0
    err_est = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        level = float(quantize(np.array(0.5 * (a + b)), step, spec))
        val, err = integrate.quad(
            lambda x, r=level: (x - r) ** 2 * dist.pdf(x), a, b,
            epsabs=QUAD_ABS_TOL, limit=200,
        )
        total += val
        err_est += err
    if err_est > 1e-6:
        raise NumericalError(f"quadrature error estimate {err_est:.2e} too large at delta={delta}")
    return total


def expected_mse_derivative(delta: float, levels: int, mode: Mode,
                            dist: InputDistribution | None = None) -> float:
    """d/d(delta) of `expected_mse`, as a sum of interval integrals.

    Each reconstruction level r_i = c_i * delta contributes
    -c_i * integral of 2*(x - r_i) pdf over its cell; the boundary terms
    cancel because neighbouring levels are equidistant from the shared
    decision level.  For a symmetric input model the weight-mode sum over
    the positive half is doubled.
    """
    delta = _check_delta(delta)
    dist = dist or default_distribution(mode)
    lo, hi = dist.support
    total = 0.0
    err_est = 0.0

    def term(coeff: float, level: float, a: float, b: float):
        nonlocal total, err_est
        a, b = max(a, lo), min(b, hi)
        if a >= b:
            return
        val, err = integrate.quad(
            lambda x: 2.0 * (x - level) * dist.pdf(x), a, b,
            epsabs=QUAD_ABS_TOL, limit=200,
        )
        total -= coeff * val
        err_est += err

    if mode is Mode.WEIGHT:
        half = levels // 2
        for i in range(1, half):
            term(2 * i - 1, (2 * i - 1) * delta / 2, (i - 1) * delta, i * delta)
        term(levels - 1, (levels - 1) * delta / 2, (half - 1) * delta, hi)
        # the coefficients 2i-1 = 2 * level_i/delta already fold the mirror
        # cells of a symmetric input; for a one-sided input halve them
        if not dist.symmetric:
            total *= 0.5
    else:
        for j in range(1, levels - 1):
            term(j, j * delta, (j - 0.5) * delta, (j + 0.5) * delta)
        term(levels - 1, (levels - 1) * delta, (levels - 1.5) * delta, hi)

    if err_est > 1e-6:
        raise NumericalError(f"quadrature error estimate {err_est:.2e} too large at delta={delta}")
    return total


@functools.lru_cache(maxsize=None)
def _solve_unit_step_default(mode: Mode, levels: int) -> float:
    return _bisect_unit_step(mode, levels, default_distribution(mode))


def _bisect_unit_step(mode: Mode, levels: int, dist: InputDistribution) -> float:
    lo, hi = BRACKET
    flo = expected_mse_derivative(lo, levels, mode, dist)
    fhi = expected_mse_derivative(hi, levels, mode, dist)
    if not (flo < 0 < fhi):
        raise SolverError(
            f"derivative does not change sign on [{lo}, {hi}] for mode={mode.value}, N={levels}"
        )
    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if expected_mse_derivative(mid, levels, mode, dist) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def solve_unit_step(mode: Mode, levels: int, dist: InputDistribution | None = None) -> float:
    """Unit-variance optimal step size: the root of the MSE derivative."""
    QuantSpec(mode, levels)  # validate the (mode, levels) combination
    if dist is None:
        return _solve_unit_step_default(mode, levels)
    return _bisect_unit_step(mode, levels, dist)


def sqnr_db(delta: float, levels: int, mode: Mode, dist: InputDistribution | None = None) -> float:
    """Signal power over quantization MSE, in dB, for the full input.

    Signal power is the variance of the full input model (1 for the
    Gaussian weight model, 1/2 - 1/(2*pi) for the rectified activation
    model); the MSE likewise covers the full input, where the rectified
    zero mass quantizes exactly.
    """
    dist = dist or default_distribution(mode)
    full_mse = expected_mse(delta, levels, mode, dist) * dist.continuous_mass
    if full_mse == 0.0:
        return math.inf
    return 10.0 * math.log10(dist.variance / full_mse)


# published reference constants the solver must reproduce: per (mode, N),
# unit step and optimal SQNR in dB
UNIT_STEP_TARGETS = {
    (Mode.WEIGHT, 2): (1.596, 4.4),
    (Mode.WEIGHT, 4): (0.996, 9.3),
    (Mode.WEIGHT, 8): (0.586, 14.3),
    (Mode.WEIGHT, 16): (0.335, 19.4),
    (Mode.ACTIVATION, 2): (1.224, 5.5),
    (Mode.ACTIVATION, 4): (0.651, 11.6),
    (Mode.ACTIVATION, 8): (0.353, 17.2),
    (Mode.ACTIVATION, 16): (0.193, 22.7),
}


def unit_step_table(level_counts: Iterable[int] = (2, 4, 8, 16)) -> list[dict]:
    """Solved unit steps and SQNR for both modes, as JSON-ready rows."""
    rows = []
    for mode in (Mode.WEIGHT, Mode.ACTIVATION):
        for n in level_counts:
            d = solve_unit_step(mode, n)
            rows.append({
                "mode": mode.value,
                "N": int(n),
                "delta_unit": d,
                "sqnr_db": sqnr_db(d, n, mode),
            })
    return rows


def estimate_weight_scale(w, granularity: Granularity = Granularity.PER_LAYER) -> np.ndarray:
    """Population standard deviation of a weight tensor, per group.

    Per-layer: one scalar over the whole tensor.  Per-kernel: one scalar
    per output channel (axis 0).  Degenerate zero-variance groups fall
    back to SCALE_EPS with a warning.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise QuantError("cannot estimate a scale from an empty tensor")
    if granularity is Granularity.PER_LAYER:
        groups = w.reshape(1, -1)
    else:
        if w.ndim < 1:
            raise QuantError("per-kernel scale needs at least one axis")
        groups = w.reshape(w.shape[0], -1)
    if groups.shape[1] < 2:
        raise QuantError(f"scale estimation needs group size >= 2, got {groups.shape[1]}")
    std = groups.std(axis=1)  # population convention (divide by n)
    if np.any(std <= 0):
        warnings.warn("zero-variance group in weight scale estimation; using epsilon fallback")
        std = np.where(std <= 0, SCALE_EPS, std)
    return float(std[0]) if granularity is Granularity.PER_LAYER else std


def activation_batch_scale(x) -> float:
    """Per-batch activation statistic sqrt(2 * mean(x^2)), zeros included."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise QuantError("cannot estimate a scale from an empty batch")
    return float(np.sqrt(2.0 * np.mean(np.square(x))))


def estimate_activation_scale(batches: Iterable) -> float:
    """Max of `activation_batch_scale` over a stream of calibration batches."""
    best = None
    for batch in batches:
        s = activation_batch_scale(batch)
        best = s if best is None else max(best, s)
    if best is None:
        raise QuantError("activation scale estimation needs at least one batch")
    if best <= 0:
        warnings.warn("all-zero activations during calibration; using epsilon fallback")
        best = SCALE_EPS
    return best


def init_step(mode: Mode, levels: int, scale) -> np.ndarray:
    """Initial step size: unit-variance optimum times the measured scale."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
        raise QuantError(f"scale must be positive and finite, got {scale!r}")
    return solve_unit_step(mode, levels) * scale


def lsq_heuristic_init(samples, bits: int, mode: Mode) -> float:
    """Heuristic baseline init 2*mean(|x|)/sqrt(Q_P).

    Q_P = 2**bits - 1 for activations, 2**(bits-1) - 1 for weights; the
    1-bit weight case has Q_P = 0 and is not supported by this baseline.
    """
    qp = 2 ** bits - 1 if mode is Mode.ACTIVATION else 2 ** (bits - 1) - 1
    if qp <= 0:
        raise QuantError(f"heuristic init is undefined for {bits}-bit {mode.value} quantizers (Q_P = {qp})")
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise QuantError("cannot initialize from an empty sample")
    return float(2.0 * np.mean(np.abs(x)) / math.sqrt(qp))
