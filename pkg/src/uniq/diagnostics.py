"""Training-dynamics instrumentation and the independent test oracles.

`DynamicsRecord` snapshots one quantizer at one point in training: its
step size, the scale of its input, and the empirical SQNR.  Snapshots are
taken at every epoch boundary and densely (every `EARLY_RECORD_INTERVAL`
steps) during the first `EARLY_RECORD_EPOCHS` epochs, where step sizes
move fastest.

Also hosted here, because they exist to check the rest of the toolkit
rather than to train anything: the frozen-offset surrogate (a locally
smooth stand-in for the quantizer whose finite differences define the
reference gradients) and an exhaustive grid search for the optimal step
size (the reference for the analytic solver).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from uniq.quantizers import (
    Mode,
    QuantSpec,
    StepParam,
    quantize,
    round_half_away,
)
from uniq.stepinit import InputDistribution, default_distribution

EARLY_RECORD_EPOCHS = 5
EARLY_RECORD_INTERVAL = 50

# sentinel values for degenerate SQNR measurements
SQNR_INF = math.inf
SQNR_UNDEFINED = math.nan


class OracleUndefinedError(ValueError):
    """Surrogate requested at a rounding tie or clip boundary."""


@dataclass(frozen=True)
class DynamicsRecord:
    layer: str
    epoch: float
    delta: float
    input_std: float
    sqnr_db: float


def input_scale(x, mode: Mode) -> float:
    """The input statistic tracked alongside the step size.

    Weights: population standard deviation.  Activations: the calibration
    quantity sqrt(2*mean(x^2)), zeros included.
    """
    x = np.asarray(x, dtype=np.float64)
    if mode is Mode.WEIGHT:
        return float(x.std())
    return float(np.sqrt(2.0 * np.mean(np.square(x))))


def empirical_sqnr(x, step: StepParam, spec: QuantSpec) -> float:
    """Measured SQNR in dB: sample variance over mean squared error.

    Both statistics run over the full tensor (for activations the exact
    zeros are included; they quantize exactly, mirroring how the analytic
    `sqnr_db` accounts for the rectified zero mass).  Zero signal energy
    returns the undefined sentinel (nan); zero error returns +inf.
    """
    x = np.asarray(x, dtype=np.float64)
    q = quantize(x, step, spec)
    err = float(np.mean(np.square(x - q)))
    sig = float(x.var())
    if sig <= 0.0:
        return SQNR_UNDEFINED
    if err == 0.0:
        return SQNR_INF
    return 10.0 * math.log10(sig / err)


def record_dynamics(model, epoch: float, sample_batch) -> list[DynamicsRecord]:
    """Snapshot every quantizer in the model on one sample batch.

    Runs one capture-mode forward pass (inference statistics, no
    parameter updates) so each activation quantizer sees its input, then
    reads weight quantizers directly from their latent tensors.  Layers
    without a quantizer produce no record.
    """
    records = []
    model.forward(sample_batch, training=False, capture_quant_inputs=True)
    for name, step, spec, latent in model.weight_quantizers():
        records.append(_make_record(name, epoch, step, spec, latent))
    for name, step, spec, captured in model.activation_quantizers():
        if captured is None:
            continue
        records.append(_make_record(name, epoch, step, spec, captured))
    model.clear_captured_inputs()
    return records


def _make_record(name: str, epoch: float, step: StepParam, spec: QuantSpec, x) -> DynamicsRecord:
    return DynamicsRecord(
        layer=name,
        epoch=float(epoch),
        delta=float(np.mean(step.delta)),
        input_std=input_scale(x, spec.mode),
        sqnr_db=empirical_sqnr(x, step, spec),
    )


def ste_surrogate(x0: float, step: StepParam, spec: QuantSpec):
    """Locally smooth stand-in for the quantizer around (x0, delta0).

    The round function is replaced by u + c with the offset
    c = round(u0) - u0 frozen at the evaluation point, and the clip
    branch active at (x0, delta0) is frozen as well.  The returned
    callable f(x, delta) therefore equals the true quantizer output at
    the evaluation point and is smooth in a neighbourhood; its central
    finite differences are the reference for the STE gradients.

    Raises `OracleUndefinedError` at rounding ties and clip boundaries,
    where no branch is well defined.
    """
    x0 = float(x0)
    delta0 = float(step.delta)
    n = spec.levels
    mode = spec.mode
    if mode is Mode.WEIGHT:
        u0 = (x0 + delta0 * (n - 1) / 2) / delta0
    else:
        u0 = x0 / delta0
    if abs(u0 - 0.0) < 1e-9 or abs(u0 - (n - 1)) < 1e-9:
        raise OracleUndefinedError(f"clip boundary at u0={u0}")
    below, above = u0 < 0.0, u0 > (n - 1)
    interior = not (below or above)
    c = 0.0
    if interior:
        if abs(abs(u0 - math.floor(u0)) - 0.5) < 1e-9:
            raise OracleUndefinedError(f"rounding tie at u0={u0}")
        c = float(round_half_away(u0)) - u0

    def f(x: float, delta: float) -> float:
        alpha = delta * (n - 1) / 2
        if mode is Mode.WEIGHT:
            if below:
                return -alpha
            if above:
                return alpha
            u = (x + alpha) / delta
            return (u + c) * delta - alpha
        if below:
            return 0.0
        if above:
            return (n - 1) * delta
        return (x / delta + c) * delta

    return f


def grid_search_step(mode: Mode, levels: int, deltas, samples=None,
                     dist: InputDistribution | None = None) -> float:
    """Exhaustive scan for the MSE-minimizing step size over a grid.

    With `samples`, the MSE is the empirical mean squared error on those
    samples.  Otherwise the MSE under the mode's Gaussian input model is
    evaluated in closed form (Phi/phi antiderivatives per quantizer cell)
    -- deliberately a different integration route than the adaptive
    quadrature used by the solver this function cross-checks.  Never used
    in the init path.
    """
    deltas = np.atleast_1d(np.asarray(deltas, dtype=np.float64))
    if deltas.size == 0:
        raise ValueError("empty step-size grid")
    if samples is not None:
        x = np.asarray(samples, dtype=np.float64).ravel()
        spec = QuantSpec(mode, levels)
        errs = np.empty(deltas.size)
        for i, d in enumerate(deltas):
            q = quantize(x, StepParam(float(d)), spec)
            errs[i] = np.mean(np.square(x - q))
        return float(deltas[np.argmin(errs)])
    dist = dist or default_distribution(mode)
    if dist.kind not in ("std-gaussian", "std-half-gaussian"):
        raise ValueError(f"closed-form grid search supports Gaussian models only, got {dist.kind}")
    errs = _gaussian_mse_closed_form(deltas, levels, mode)
    return float(deltas[np.argmin(errs)])


def _gaussian_mse_closed_form(deltas: np.ndarray, levels: int, mode: Mode) -> np.ndarray:
    """MSE per grid delta via exact Gaussian cell integrals.

    integral over [a,b] of (x-r)^2 phi(x) dx
      = (1 + r^2) * (Phi(b)-Phi(a)) - (b phi(b) - a phi(a)) - 2 r (phi(a)-phi(b))
    evaluated per cell and summed; the conditional half-Gaussian doubles
    the positive-side density, the symmetric weight case doubles the
    positive-side cells.
    """
    d = deltas[:, None]
    if mode is Mode.WEIGHT:
        i = np.arange(1, levels // 2 + 1)[None, :]
        a = (i - 1) * d
        b = np.where(i < levels // 2, i * d, np.inf)
        r = (2 * i - 1) * d / 2
    else:
        j = np.arange(0, levels)[None, :]
        a = np.maximum((j - 0.5) * d, 0.0)
        b = np.where(j < levels - 1, (j + 0.5) * d, np.inf)
        r = j * d
    finite_b = np.where(np.isinf(b), 0.0, b)
    phi_a = np.exp(-0.5 * a * a) / math.sqrt(2 * math.pi)
    phi_b = np.where(np.isinf(b), 0.0, np.exp(-0.5 * finite_b * finite_b) / math.sqrt(2 * math.pi))
    Phi_a = ndtr(a)
    Phi_b = np.where(np.isinf(b), 1.0, ndtr(finite_b))
    i0 = Phi_b - Phi_a
    i1 = phi_a - phi_b
    i2 = i0 - (finite_b * phi_b - a * phi_a)
    cells = i2 - 2 * r * i1 + r * r * i0
    return 2.0 * cells.sum(axis=1)  # both cases: symmetry fold or 2*phi density


CSV_HEADER = "layer,epoch,delta,input_std,sqnr_db"


def emit_csv(records, path, gnuplot: bool = False) -> None:
    """Write dynamics records as CSV: stable order (layer, then time).

    Full-precision floats via repr, UTF-8, LF line endings; re-emitting
    the same log yields a byte-identical file.  With ``gnuplot=True`` a
    companion plotting script is written next to the CSV.
    """
    indexed = sorted(enumerate(records), key=lambda kv: (kv[1].layer, kv[1].epoch, kv[0]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(CSV_HEADER + "\n")
        for _, r in indexed:
            f.write(f"{r.layer},{r.epoch!r},{r.delta!r},{r.input_std!r},{r.sqnr_db!r}\n")
    if gnuplot:
        _emit_gnuplot(records, str(path))


def _emit_gnuplot(records, csv_path: str) -> None:
    layers = sorted({r.layer for r in records})
    lines = [
        "set datafile separator ','",
        "set key outside",
        "set xlabel 'epoch'",
        "set multiplot layout 3,1",
    ]
    for ylabel, col in (("delta", 3), ("input_std", 4), ("sqnr_db", 5)):
        lines.append(f"set ylabel '{ylabel}'")
        plots = ", ".join(
            f"'< grep \"^{layer},\" {csv_path}' using 2:{col} with lines title '{layer}'"
            for layer in layers
        )
        if plots:
            lines.append(f"plot {plots}")
    lines.append("unset multiplot")
    with open(csv_path + ".gp", "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
