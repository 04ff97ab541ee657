"""A small reverse-mode autodiff tape over numpy arrays."""

from contextlib import contextmanager

import numpy as np

from sewlab import kernels
from sewlab.errors import ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Build no tape inside the block; results carry no parents."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


def _unbroadcast(g, shape):
    # sum out the axes that broadcasting expanded
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def _child(self, data, parents, backward):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.grad = np.zeros_like(out.data)
            out._parents = parents
            out._backward = backward
        return out

    # -- elementwise --------------------------------------------------------

    def __add__(self, other):
        other = _lift(other, self.dtype)
        out = None

        def backward():
            if self.requires_grad:
                self.grad += _unbroadcast(out.grad, self.shape)
            if other.requires_grad:
                other.grad += _unbroadcast(out.grad, other.shape)

        out = self._child(self.data + other.data, (self, other), backward)
        return out

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_lift(other, self.dtype))

    def __rsub__(self, other):
        return _lift(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _lift(other, self.dtype)
        out = None

        def backward():
            if self.requires_grad:
                self.grad += _unbroadcast(out.grad * other.data, self.shape)
            if other.requires_grad:
                other.grad += _unbroadcast(out.grad * self.data, other.shape)

        out = self._child(self.data * other.data, (self, other), backward)
        return out

    __rmul__ = __mul__

    def relu(self):
        mask = self.data > 0
        out = None

        def backward():
            self.grad += out.grad * mask

        out = self._child(self.data * mask, (self,), backward)
        return out

    def abs(self):
        sign = np.sign(self.data)
        out = None

        def backward():
            self.grad += out.grad * sign

        out = self._child(np.abs(self.data), (self,), backward)
        return out

    # -- reductions / shape -------------------------------------------------

    def sum(self):
        out = None

        def backward():
            self.grad += np.broadcast_to(out.grad, self.shape)

        out = self._child(np.asarray(self.data.sum(), dtype=self.dtype), (self,), backward)
        return out

    def mean(self):
        return self.sum() * (1.0 / self.data.size)

    def reshape(self, *shape):
        src = self.shape
        out = None

        def backward():
            self.grad += out.grad.reshape(src)

        out = self._child(self.data.reshape(*shape), (self,), backward)
        return out

    def matmul(self, other):
        out = None

        def backward():
            if self.requires_grad:
                self.grad += out.grad @ other.data.T
            if other.requires_grad:
                other.grad += self.data.T @ out.grad

        out = self._child(self.data @ other.data, (self, other), backward)
        return out

    __matmul__ = matmul

    # -- driver -------------------------------------------------------------

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = (
            np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype)
        )
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()


def _lift(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


# -- fused ops used by the layers ------------------------------------------


def conv2d(x, weight, bias):
    """Stride-1 convolution with zero padding that keeps H and W."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects [N, C, H, W], got {list(x.shape)}")
    o, c, k, _ = weight.shape
    n, cx, h, w = x.shape
    if cx != c:
        raise ShapeError(f"conv2d expects {c} input channels, got {cx}")
    cols = kernels.im2col(x.data, k)
    wmat = weight.data.reshape(o, c * k * k)
    y = cols @ wmat.T + bias.data
    data = np.ascontiguousarray(y.reshape(n, h, w, o).transpose(0, 3, 1, 2))
    out = None

    def backward():
        g = out.grad.transpose(0, 2, 3, 1).reshape(n * h * w, o)
        if weight.requires_grad:
            weight.grad += (g.T @ cols).reshape(weight.shape)
        if bias.requires_grad:
            bias.grad += g.sum(axis=0)
        if x.requires_grad:
            x.grad += kernels.col2im(g @ wmat, x.shape, k)

    out = x._child(data, (x, weight, bias), backward)
    return out


def log_softmax_np(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_np(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; ``labels`` are integer classes."""
    labels = np.asarray(labels, dtype=np.int64)
    b = logits.shape[0]
    logp = log_softmax_np(logits.data)
    loss = -logp[np.arange(b), labels].mean()
    out = None

    def backward():
        g = np.exp(logp)
        g[np.arange(b), labels] -= 1.0
        logits.grad += g * (out.grad / b)

    out = logits._child(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
    return out
