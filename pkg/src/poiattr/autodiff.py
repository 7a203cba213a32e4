"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the attribution model needs are provided. Every op
records its parents and a closure that maps the output gradient to parent
gradients; :meth:`Tensor.backward` walks the graph in reverse topological
order. All arithmetic is float64.
"""

from __future__ import annotations

import numpy as np

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """An array node in the computation graph."""

    __array_priority__ = 100.0

    def __init__(self, data, parents=(), backward=None, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    # -- plumbing ---------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("division by a Tensor is not needed")
        return self * (1.0 / other)

    def __matmul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor(a @ b, (self, other), backward)

    # -- reductions and shape ops -----------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return Tensor(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def __getitem__(self, index):
        shape = self.shape

        def backward(g):
            out = np.zeros(shape)
            np.add.at(out, index, g)
            return (out,)

        return Tensor(self.data[index], (self,), backward)

    # -- elementwise functions --------------------------------------------
    def sin(self):
        x = self.data
        return Tensor(np.sin(x), (self,), lambda g: (g * np.cos(x),))

    def cos(self):
        x = self.data
        return Tensor(np.cos(x), (self,), lambda g: (-g * np.sin(x),))

    def exp(self):
        y = np.exp(self.data)
        return Tensor(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return Tensor(np.log(x), (self,), lambda g: (g / x,))

    def gelu(self):
        """Tanh-approximated GELU; smooth everywhere, unlike ReLU."""
        x = self.data
        u = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
        th = np.tanh(u)
        y = 0.5 * x * (1.0 + th)

        def backward(g):
            du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x**2)
            return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du),)

        return Tensor(y, (self,), backward)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def logsumexp(x, axis=-1, keepdims=False):
    """Max-shifted log-sum-exp of a numpy array."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(x: Tensor, axis=-1):
    z = x.data
    y = z - logsumexp(z, axis=axis, keepdims=True)
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor(y, (x,), backward)


def softmax(x: Tensor, axis=-1):
    z = x.data
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor(p, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(xd.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor(out, (x, gamma, beta), backward)


def dropout(x: Tensor, rate, rng):
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Container that discovers parameters among its attributes.

    Attributes that are grad-requiring leaf tensors, sub-modules, or lists of
    sub-modules are walked in definition order, giving stable dotted names.
    """

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in self.__dict__.items():
            if isinstance(val, Tensor) and val.requires_grad and val._backward is None:
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(prefix + key + "."))
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.update(m.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """``y = x W^T + b`` with ``W`` stored as ``(out, in)``."""

    def __init__(self, d_in, d_out, rng, bias=True, scale=None):
        scale = 1.0 / np.sqrt(d_in) if scale is None else scale
        self.weight = parameter(rng.uniform(-scale, scale, size=(d_out, d_in)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = _as_tensor(x) @ self.weight.transpose(1, 0)
        return y + self.bias if self.bias is not None else y
