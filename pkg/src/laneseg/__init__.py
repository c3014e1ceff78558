"""Lane and road segmentation with a GCN + boundary-refinement encoder-decoder.

Everything runs on numpy with hand-written backward passes; the edge service
trains models for remote clients over a small framed TCP protocol.
"""
from .errors import (
    CheckpointError, ConfigError, DataError, DimensionError, InputError,
    LanesegError, NumericError, ProtocolError, RemoteError, StateError, TrainingError,
)
from .network import ModelParams, build_model, forward, backward, predict
from .training import TrainConfig, Sample, class_weights, weighted_loss, adam_step, AdamState, train
from .checkpoint import serialize_model, deserialize_model

__version__ = "0.1.0"
