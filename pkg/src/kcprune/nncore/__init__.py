"""Minimal trainable CNN core: graphs, layers, losses, SGD, gradient checks."""

from .graph import LayerSpec, ModelGraph, load_graph, resnet_cifar, save_graph, shipped_arch, tinycnn
from .gradcheck import GradCheckReport, grad_check
from .losses import softmax_cross_entropy
from .model import ModelState, backward, check_state, forward, init_state
from .optim import sgd_step
from .train import TrainConfig, evaluate, train_epoch

__all__ = [
    "LayerSpec", "ModelGraph", "ModelState", "GradCheckReport", "TrainConfig",
    "load_graph", "save_graph", "shipped_arch", "resnet_cifar", "tinycnn",
    "forward", "backward", "init_state", "check_state", "softmax_cross_entropy",
    "sgd_step", "grad_check", "train_epoch", "evaluate",
]
