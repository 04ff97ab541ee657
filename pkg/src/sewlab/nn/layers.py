"""Layers and the sequential classifier."""

import copy

import numpy as np

from sewlab.errors import ShapeError
from sewlab.nn.tensor import Tensor, conv2d, no_grad, softmax_np


def _glorot(rng, shape, fan_in, fan_out, dtype):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape).astype(dtype)


class Layer:
    tag = None
    params = ()

    def out_shape(self, in_shape):
        return in_shape

    def parameters(self):
        return [getattr(self, name) for name in self.params]

    def init(self, rng, dtype):
        pass

    def extents(self):
        """Shape extents written to checkpoints."""
        return ()


class Conv2d(Layer):
    tag = 1
    params = ("weight", "bias")

    def __init__(self, in_ch, out_ch, k=3, dtype=np.float32):
        if k % 2 != 1:
            raise ValueError("kernel size must be odd for 'same' padding")
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.weight = Tensor(np.zeros((out_ch, in_ch, k, k), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype), requires_grad=True)
        # channels removed by pruning; their gradients are held at zero
        self.pruned = np.zeros(out_ch, dtype=bool)

    def init(self, rng, dtype):
        k = self.k
        self.weight.data = _glorot(
            rng, self.weight.shape, self.in_ch * k * k, self.out_ch * k * k, dtype
        )
        self.bias.data = np.zeros(self.out_ch, dtype)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_ch:
            raise ShapeError(f"Conv2d expects {self.in_ch} channels, got {c}")
        return (self.out_ch, h, w)

    def extents(self):
        return (self.out_ch, self.in_ch, self.k, self.k)

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias)

    def prune(self, channels):
        channels = np.asarray(channels, dtype=np.int64)
        self.pruned[channels] = True
        self.weight.data[channels] = 0.0
        self.bias.data[channels] = 0.0

    def mask_grads(self):
        if self.pruned.any():
            self.weight.grad[self.pruned] = 0.0
            self.bias.grad[self.pruned] = 0.0


class Dense(Layer):
    tag = 2
    params = ("weight", "bias")

    def __init__(self, in_f, out_f, dtype=np.float32):
        self.in_f, self.out_f = in_f, out_f
        self.weight = Tensor(np.zeros((out_f, in_f), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_f, dtype), requires_grad=True)

    def init(self, rng, dtype):
        self.weight.data = _glorot(rng, self.weight.shape, self.in_f, self.out_f, dtype)
        self.bias.data = np.zeros(self.out_f, dtype)

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_f,):
            raise ShapeError(f"Dense expects input ({self.in_f},), got {tuple(in_shape)}")
        return (self.out_f,)

    def extents(self):
        return (self.out_f, self.in_f)

    def __call__(self, x):
        return x @ _transpose(self.weight) + self.bias


def _transpose(t):
    out = None

    def backward():
        t.grad += out.grad.T

    out = t._child(t.data.T, (t,), backward)
    return out


class ReLU(Layer):
    tag = 3

    def __call__(self, x):
        return x.relu()


class Flatten(Layer):
    tag = 4

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def __call__(self, x):
        return x.reshape(x.shape[0], -1)


LAYER_TYPES = {cls.tag: cls for cls in (Conv2d, Dense, ReLU, Flatten)}


class Network:
    """Sequential classifier mapping [N, C, H, W] images to k logits."""

    def __init__(self, input_shape, layers, dtype=np.float32):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if len(shape) != 1:
            raise ShapeError(f"network must end in a flat logit vector, got {shape}")
        self.num_classes = shape[0]

    def init(self, seed):
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init(rng, self.dtype)
        return self

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def conv_layers(self):
        return [l for l in self.layers if isinstance(l, Conv2d)]

    def check_input(self, x):
        shape = tuple(x.shape)
        if len(shape) != 4 or shape[1:] != self.input_shape:
            raise ShapeError(
                f"expected batch of shape [N, {', '.join(map(str, self.input_shape))}], "
                f"got {list(shape)}"
            )

    def forward(self, batch):
        if not isinstance(batch, Tensor):
            batch = Tensor(np.asarray(batch, dtype=self.dtype))
        self.check_input(batch)
        h = batch
        for layer in self.layers:
            h = layer(h)
        return h

    __call__ = forward

    def activations(self, x, upto):
        """Output of ``layers[upto]`` (inclusive) as an array, no tape."""
        x = np.asarray(x, dtype=self.dtype)
        self.check_input(x)
        with no_grad():
            h = Tensor(x)
            for layer in self.layers[:upto + 1]:
                h = layer(h)
        return h.data

    def freeze(self):
        """Stop computing parameter gradients (inputs can still get them)."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def logits(self, x, batch_size=512):
        """Logits as an array, no tape."""
        x = np.asarray(x, dtype=self.dtype)
        self.check_input(x)
        outs = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                outs.append(self.forward(x[i:i + batch_size]).data)
        if not outs:
            return np.zeros((0, self.num_classes), self.dtype)
        return np.concatenate(outs)

    def probs(self, x, batch_size=512):
        return softmax_np(self.logits(x, batch_size))

    def predict(self, x, batch_size=512):
        return self.logits(x, batch_size).argmax(axis=1)

    def clone(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        net = self.clone()
        net.dtype = np.dtype(dtype)
        for p in net.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return net

    def state(self):
        return [p.data.copy() for p in self.parameters()]

    def n_params(self):
        return sum(p.data.size for p in self.parameters())

    def __repr__(self):
        names = ", ".join(type(l).__name__ for l in self.layers)
        return f"Network(input={self.input_shape}, k={self.num_classes}, [{names}])"


def make_cnn(input_shape=(3, 16, 16), num_classes=4, channels=(8, 16), k=3,
             seed=0, dtype=np.float32):
    """conv-relu blocks, then flatten and one dense layer."""
    c, h, w = input_shape
    layers = []
    prev = c
    for ch in channels:
        layers += [Conv2d(prev, ch, k, dtype), ReLU()]
        prev = ch
    layers += [Flatten(), Dense(prev * h * w, num_classes, dtype)]
    return Network(input_shape, layers, dtype).init(seed)
