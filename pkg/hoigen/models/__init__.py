"""Stream verb classifiers.

Modules:
    mlp: Two-headed MLP, uncertainty loss, autograd gradients, SGD step and checkpoints.
    streams: Spatial encoding, the human/object/spatial streams and the training loop.
"""

from .mlp import (
    MlpSpec,
    StreamError,
    StreamNet,
    StreamOutput,
    backward,
    forward,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    uncertainty_loss,
)
from .streams import (
    DEFAULT_EPOCHS,
    DEFAULT_LR,
    HumanStream,
    ObjectStream,
    SpatialStream,
    VerbStream,
    encode_spatial,
    make_stream,
    train_stream,
)

__all__ = [
    "DEFAULT_EPOCHS",
    "DEFAULT_LR",
    "HumanStream",
    "MlpSpec",
    "ObjectStream",
    "SpatialStream",
    "StreamError",
    "StreamNet",
    "StreamOutput",
    "VerbStream",
    "backward",
    "encode_spatial",
    "forward",
    "gradient_check",
    "load_checkpoint",
    "make_stream",
    "save_checkpoint",
    "sgd_step",
    "train_stream",
    "uncertainty_loss",
]
