"""Numpy transformer: respiration encoder, spectrogram decoder, CLS classifier."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import PRESETS, ConfigError, ModelConfig, preset
from .model import (Batch, ModelWeights, NNError, bce_loss, classifier_embedding, classifier_forward, classifier_logit,
                    decoder_forward, encoder_forward, init_weights, loss_and_grads, pretrain_loss)
from .optim import OptimizerState, adamw_step, lr_schedule
from .tokens import TokenError, patchify, token_features

__all__ = [
    "Batch", "CheckpointError", "ConfigError", "ModelConfig", "ModelWeights", "NNError", "OptimizerState",
    "PRESETS", "TokenError", "adamw_step", "bce_loss", "classifier_embedding", "classifier_forward", "classifier_logit",
    "decoder_forward", "encoder_forward", "init_weights", "load_checkpoint", "loss_and_grads",
    "lr_schedule", "patchify", "preset", "pretrain_loss", "save_checkpoint", "token_features",
]
