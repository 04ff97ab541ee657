from sewlab.nn.checkpoint import load_checkpoint, save_checkpoint
from sewlab.nn.layers import Conv2d, Dense, Flatten, Network, ReLU, make_cnn
from sewlab.nn.optim import SGD, Adam, cosine_lr
from sewlab.nn.tensor import Tensor, conv2d, cross_entropy, no_grad, softmax_np
from sewlab.nn.train import TrainConfig, accuracy, fit, train_step

__all__ = [
    "Adam", "Conv2d", "Dense", "Flatten", "Network", "ReLU", "SGD", "Tensor",
    "TrainConfig", "accuracy", "conv2d", "cosine_lr", "cross_entropy", "fit",
    "load_checkpoint", "make_cnn", "no_grad", "save_checkpoint", "softmax_np",
    "train_step",
]
