"""Minimal fp64 reverse-mode autodiff over numpy arrays.

Only the operations needed by the encoder/gate/tower networks are
implemented. Every tensor is float64; forward values are plain numpy
arrays and the graph is a DAG of backward closures walked in reverse
topological order.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph construction (eval-mode forwards)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev


def _reduce_to_shape(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    # -- graph plumbing -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor; accumulates into .grad."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor with no recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "requires a scalar tensor")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        running = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = running.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if parent is None or not parent.requires_grad:
                    continue
                if id(parent) in running:
                    running[id(parent)] += pg
                else:
                    running[id(parent)] = np.asarray(pg, dtype=np.float64)

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data + other.data

        def backward(g):
            return ((self, _reduce_to_shape(g, self.shape)),
                    (other, _reduce_to_shape(g, other.shape)))

        return Tensor._result(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            return ((self, -g),)
        return Tensor._result(-self.data, (self,), backward)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data * other.data

        def backward(g):
            return ((self, _reduce_to_shape(g * other.data, self.shape)),
                    (other, _reduce_to_shape(g * self.data, other.shape)))

        return Tensor._result(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data @ other.data
        a, b = self.data, other.data

        def backward(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return ((self, _reduce_to_shape(ga, self.shape)),
                    (other, _reduce_to_shape(gb, other.shape)))

        return Tensor._result(out_data, (self, other), backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out_data = self.data.reshape(shape)

        def backward(g):
            return ((self, g.reshape(old)),)

        return Tensor._result(out_data, (self,), backward)

    def transpose(self, axes):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)

        def backward(g):
            return ((self, g.transpose(inv)),)

        return Tensor._result(out_data, (self,), backward)

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def backward(g):
            if axis is None:
                return ((self, np.full(shape, g, dtype=np.float64)
                         if np.ndim(g) == 0 else np.broadcast_to(g, shape).copy()),)
            g2 = g
            if not keepdims:
                g2 = np.expand_dims(g2, axis)
            return ((self, np.broadcast_to(g2, shape).copy()),)

        return Tensor._result(out_data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def select(self, index, axis=0):
        """Pick one slice along an axis (integer index, dimension dropped)."""
        out_data = np.take(self.data, index, axis=axis)
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=np.float64)
            sl = [slice(None)] * len(shape)
            sl[axis] = index
            full[tuple(sl)] = g
            return ((self, full),)

        return Tensor._result(out_data, (self,), backward)


# -- nonlinearities and fused ops ----------------------------------------

def relu(x):
    if not isinstance(x, Tensor):
        return np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    mask = x.data > 0

    def backward(g):
        return ((x, g * mask),)

    return Tensor._result(np.where(mask, x.data, 0.0), (x,), backward)


def softmax_np(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis=-1):
    if not isinstance(x, Tensor):
        return softmax_np(x, axis=axis)
    y = softmax_np(x.data, axis=axis)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((x, y * (g - dot)),)

    return Tensor._result(y, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data if isinstance(gamma, Tensor) else np.asarray(gamma)
    bd = beta.data if isinstance(beta, Tensor) else np.asarray(beta)
    out_data = gd * xhat + bd
    if not (isinstance(x, Tensor) or isinstance(gamma, Tensor) or isinstance(beta, Tensor)):
        return out_data
    x_t = x if isinstance(x, Tensor) else Tensor(x)
    g_t = gamma if isinstance(gamma, Tensor) else Tensor(gamma)
    b_t = beta if isinstance(beta, Tensor) else Tensor(beta)

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return ((x_t, dx), (g_t, dgamma), (b_t, dbeta))

    return Tensor._result(out_data, (x_t, g_t, b_t), backward)


def dropout(x, mask, keep_prob):
    """Inverted dropout with a precomputed 0/1 mask."""
    scale = 1.0 / keep_prob
    if not isinstance(x, Tensor):
        return np.asarray(x, dtype=np.float64) * mask * scale

    def backward(g):
        return ((x, g * mask * scale),)

    return Tensor._result(x.data * mask * scale, (x,), backward)


def cross_entropy(probs, labels, floor=1e-12):
    """Mean negative log-likelihood of the true classes.

    `probs` rows must already be probability vectors (e.g. softmax output);
    entries are clamped at `floor` before the log. `labels` is an int index
    or an int array matching the leading dimension.
    """
    pd = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    scalar_input = pd.ndim == 1
    p2 = pd.reshape(1, -1) if scalar_input else pd
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = p2.shape
    if lab.shape != (n,):
        raise ValueError(f"labels shape {lab.shape} does not match batch {n}")
    if np.any(lab < 0) or np.any(lab >= k):
        raise ValueError(f"label index out of range for {k} classes")
    sums = p2.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ValueError("probabilities do not sum to 1")
    picked = p2[np.arange(n), lab]
    clamped = np.maximum(picked, floor)
    loss = float(-np.log(clamped).mean())
    if not isinstance(probs, Tensor):
        return loss

    def backward(g):
        gp = np.zeros_like(p2)
        live = picked > floor
        gp[np.arange(n), lab] = np.where(live, -1.0 / clamped, 0.0) * (g / n)
        return ((probs, gp.reshape(pd.shape)),)

    return Tensor._result(np.float64(loss), (probs,), backward)


def linear_forward(weights, bias, x):
    """Affine map x @ W + b; operands may be Tensors or arrays."""
    w = weights if isinstance(weights, Tensor) else Tensor(weights)
    b = bias if isinstance(bias, Tensor) else Tensor(bias)
    xt = x if isinstance(x, Tensor) else Tensor(x)
    out = xt @ w + b
    if isinstance(x, Tensor) or isinstance(weights, Tensor) or isinstance(bias, Tensor):
        return out
    return out.data
