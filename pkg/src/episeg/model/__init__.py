from .network import (
    EncoderConfig, ForwardResult, ModelConfig, Prediction, UFAContext, decode, encode, encode_pair,
    forward, init_params, kshot_prototype, prototype, seg_loss, total_loss,
)
from .training import (
    SGD, CheckpointError, Model, TrainingDiverged, batch_arrays, derive_seed, infer, init_model,
    load_checkpoint, probe_episode, probe_recon, save_checkpoint, train,
)

__all__ = [
    "EncoderConfig", "ForwardResult", "ModelConfig", "Prediction", "UFAContext", "decode", "encode",
    "encode_pair", "forward", "init_params", "kshot_prototype", "prototype", "seg_loss", "total_loss",
    "SGD", "CheckpointError", "Model", "TrainingDiverged", "batch_arrays", "derive_seed", "infer",
    "init_model", "load_checkpoint", "probe_episode", "probe_recon", "save_checkpoint", "train",
]
