from uniq.nn.tensor import (  # noqa: F401
    StateError,
    StructureError,
    Tensor,
    softmax_cross_entropy,
)
from uniq.nn.layers import (  # noqa: F401
    ActQuant,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    MaxPool2d,
    ReLU,
    WeightQuantizer,
)
from uniq.nn.models import ConfigError, Model, build_model  # noqa: F401
from uniq.nn.checkpoint import (  # noqa: F401
    CheckpointError,
    load_checkpoint,
    load_into_model,
    save_checkpoint,
)
