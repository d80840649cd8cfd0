from .model import (ForwardTape, LayerGrads, NlistaLayerParams, NlistaModel,
                    backward, forward, forward_batch, gamma_clip,
                    load_checkpoint, new_layer, save_checkpoint)
from .train import AdamState, TrainConfig, adam_step, train_progressive

__all__ = [
    "AdamState", "ForwardTape", "LayerGrads", "NlistaLayerParams",
    "NlistaModel", "TrainConfig", "adam_step", "backward", "forward",
    "forward_batch", "gamma_clip", "load_checkpoint", "new_layer",
    "save_checkpoint", "train_progressive",
]
