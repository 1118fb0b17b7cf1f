"""uniq: quantization-aware training with a learnable symmetric quantizer.

Core pieces: fake-quantization forward/STE-backward primitives
(:mod:`uniq.quantizers`), analytic MSE-optimal step-size initialization
(:mod:`uniq.stepinit`), a small reverse-mode tensor core and layer zoo
(:mod:`uniq.nn`), optimizers and warm-up schedules (:mod:`uniq.optim`),
training-dynamics instrumentation (:mod:`uniq.diagnostics`), and the
experiment harness with the ``uniq`` CLI (:mod:`uniq.harness`).
"""

__version__ = "0.1.0"

from uniq.quantizers import (  # noqa: F401
    Granularity,
    Mode,
    QuantSpec,
    StepParam,
    quantize_activation,
    quantize_weight,
)
