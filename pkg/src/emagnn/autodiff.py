"""Dense reverse-mode automatic differentiation on top of numpy.

Every ``Tensor`` wraps a float64 array.  Operations build a DAG of closures;
``Tensor.backward`` walks it once in reverse topological order and
accumulates gradients into every leaf that has ``requires_grad`` set.
"""
from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |x| and faster than exp-based variants
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def _broadcast_op(fn, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return fn(a, b)
    except ValueError as exc:
        raise ShapeError(f"operands could not be broadcast: {a.shape} and {b.shape}") from exc


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph.

    ``_parents`` and ``_backward`` together form the op record: the closure
    pushes ``self.grad`` into the parents' gradients.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._owns_grad = False
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = ""

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self._op or 'leaf'})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)
        self._owns_grad = True

    def _accumulate(self, g: np.ndarray) -> None:
        # the first contribution is borrowed, not copied; it may be shared
        # with a sibling, so it is never written in place
        if self.grad is None:
            self.grad = g if g.shape == self.shape else np.broadcast_to(g, self.shape)
            self._owns_grad = False
        elif self._owns_grad:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owns_grad = True

    def _owned_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
            self._owns_grad = True
        elif not self._owns_grad:
            self.grad = np.array(self.grad, copy=True)
            self._owns_grad = True
        return self.grad

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        out = Tensor(data)
        tracked = tuple(p for p in parents if p.requires_grad)
        if tracked:
            out.requires_grad = True
            out._parents = tracked
            out._op = op
        return out

    # ------------------------------------------------------------ arithmetic
    def __add__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        out = Tensor._make(_broadcast_op(np.add, self.data, other.data), (self, other), "add")
        if out.requires_grad:
            def backward():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(out.grad, other.shape))
            out._backward = backward
        return out

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        out = Tensor._make(_broadcast_op(np.subtract, self.data, other.data), (self, other), "sub")
        if out.requires_grad:
            def backward():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(-out.grad, other.shape))
            out._backward = backward
        return out

    def __rsub__(self, other) -> "Tensor":
        return ensure_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        out = Tensor._make(_broadcast_op(np.multiply, self.data, other.data), (self, other), "mul")
        if out.requires_grad:
            def backward():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad * other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(out.grad * self.data, other.shape))
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        out = Tensor._make(_broadcast_op(np.divide, self.data, other.data), (self, other), "div")
        if out.requires_grad:
            def backward():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad / other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(
                        _unbroadcast(-out.grad * self.data / (other.data * other.data), other.shape)
                    )
            out._backward = backward
        return out

    def __rtruediv__(self, other) -> "Tensor":
        return ensure_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = Tensor._make(self.data ** exponent, (self,), "pow")
        if out.requires_grad:
            def backward():
                self._accumulate(out.grad * exponent * self.data ** (exponent - 1))
            out._backward = backward
        return out

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor._make(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:
            def backward():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.shape))  # read-only view, never mutated
            out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ---------------------------------------------------------------- reshaping
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor._make(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:
            def backward():
                self._accumulate(out.grad.reshape(self.shape))
            out._backward = backward
        return out

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        out = Tensor._make(np.transpose(self.data, axes), (self,), "transpose")
        if out.requires_grad:
            def backward():
                self._accumulate(np.transpose(out.grad, inverse))
            out._backward = backward
        return out

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, index) -> "Tensor":
        if isinstance(index, Tensor):
            raise TypeError("tensor indices are not supported")
        out = Tensor._make(self.data[index], (self,), "getitem")
        if out.requires_grad:
            def backward():
                g = self._owned_grad()
                if _is_fancy(index):
                    np.add.at(g, index, out.grad)
                else:
                    g[index] += out.grad
            out._backward = backward
        return out

    # ----------------------------------------------------------- nonlinearities
    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        value = np.exp(self.data)
        out = Tensor._make(value, (self,), "exp")
        if out.requires_grad:
            def backward():
                self._accumulate(out.grad * value)
            out._backward = backward
        return out

    # ----------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every ``requires_grad`` ancestor.

        Gradients accumulate across calls; zero them explicitly between
        optimisation steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order = _topological_order(self)
        # intermediate buffers are fresh for every call; only leaves accumulate
        for node in order:
            if node._backward is not None:
                node.grad = None
            elif node.grad is not None and not node._owns_grad:
                node.grad = np.array(node.grad, copy=True)
                node._owns_grad = True
        self._accumulate(np.asarray(grad, dtype=np.float64).reshape(self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()
        for node in order:
            if node._backward is not None:
                node.grad = None
            elif node.grad is not None and not node._owns_grad:
                node.grad = np.array(node.grad, copy=True)
                node._owns_grad = True


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def ensure_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ------------------------------------------------------------------ free ops
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics (both operands at least 2-D)."""
    a, b = ensure_tensor(a), ensure_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        value = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    out = Tensor._make(value, (a, b), "matmul")
    if out.requires_grad:
        def backward():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
            if b.requires_grad:
                if b.ndim == 2 and a.ndim > 2:
                    k = a.shape[-1]
                    db = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
                else:
                    db = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
                b._accumulate(db)
        out._backward = backward
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = ensure_tensor(x)
    value = _sigmoid(x.data)
    out = Tensor._make(value, (x,), "sigmoid")
    if out.requires_grad:
        def backward():
            x._accumulate(out.grad * value * (1.0 - value))
        out._backward = backward
    return out


def tanh(x: Tensor) -> Tensor:
    x = ensure_tensor(x)
    value = np.tanh(x.data)
    out = Tensor._make(value, (x,), "tanh")
    if out.requires_grad:
        def backward():
            x._accumulate(out.grad * (1.0 - value * value))
        out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    x = ensure_tensor(x)
    mask = x.data > 0
    out = Tensor._make(np.where(mask, x.data, 0.0), (x,), "relu")
    if out.requires_grad:
        def backward():
            x._accumulate(out.grad * mask)
        out._backward = backward
    return out


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when ``training`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = ensure_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(keep)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = ensure_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor._make(value, (x,), "softmax")
    if out.requires_grad:
        def backward():
            g = out.grad
            x._accumulate(value * (g - np.sum(g * value, axis=axis, keepdims=True)))
        out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    value = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor._make(value, tensors, "concat")
    if out.requires_grad:
        bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
        def backward():
            pieces = np.split(out.grad, bounds, axis=axis)
            for t, g in zip(tensors, pieces):
                if t.requires_grad:
                    t._accumulate(g)
        out._backward = backward
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    value = np.stack([t.data for t in tensors], axis=axis)
    out = Tensor._make(value, tensors, "stack")
    if out.requires_grad:
        def backward():
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t._accumulate(np.take(out.grad, i, axis=axis))
        out._backward = backward
    return out


def gru_sequence(x_proj: Tensor, w_hh: Tensor, b_hh: Tensor) -> Tensor:
    """GRU recurrence from a zero state with hand-written BPTT.

    ``x_proj`` is time-major ``(L, N, 3H)`` holding the input projections for
    the reset, update and candidate gates.  Returns all hidden states
    ``(L, N, H)``.  Gate convention:

        r = sigmoid(x_r + h W_r + b_r)
        z = sigmoid(x_z + h W_z + b_z)
        n = tanh(x_n + r * (h W_n + b_n))
        h' = (1 - z) * n + z * h
    """
    x_proj, w_hh, b_hh = ensure_tensor(x_proj), ensure_tensor(w_hh), ensure_tensor(b_hh)
    L, N, H3 = x_proj.shape
    H = H3 // 3
    if w_hh.shape != (H, H3) or b_hh.shape != (H3,):
        raise ShapeError(f"GRU weights must be ({H}, {H3}) and ({H3},)")
    xs, W, b = x_proj.data, w_hh.data, b_hh.data
    states = np.empty((L, N, H))
    cache = []
    h = np.zeros((N, H))
    for t in range(L):
        gh = b if t == 0 else h @ W + b
        x = xs[t]
        r = _sigmoid(x[:, :H] + gh[..., :H])
        z = _sigmoid(x[:, H:2 * H] + gh[..., H:2 * H])
        ghn = np.broadcast_to(gh[..., 2 * H:], (N, H))
        n = np.tanh(x[:, 2 * H:] + r * ghn)
        h_prev = h
        h = n + z * (h_prev - n)
        states[t] = h
        cache.append((r, z, n, ghn, h_prev))
    out = Tensor._make(states, (x_proj, w_hh, b_hh), "gru_sequence")
    if out.requires_grad:
        def backward():
            d_states = out.grad
            dx = np.empty((L, N, H3))
            dW = np.zeros_like(W)
            db = np.zeros(H3)
            dh_next = np.zeros((N, H))
            for t in range(L - 1, -1, -1):
                r, z, n, ghn, h_prev = cache[t]
                dh = d_states[t] + dh_next
                dn_pre = dh * (1.0 - z) * (1.0 - n * n)
                dz_pre = dh * (h_prev - n) * z * (1.0 - z)
                dr_pre = dn_pre * ghn * r * (1.0 - r)
                dx[t, :, :H] = dr_pre
                dx[t, :, H:2 * H] = dz_pre
                dx[t, :, 2 * H:] = dn_pre
                dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
                db += dgh.sum(axis=0)
                dh_next = dh * z
                if t > 0:
                    dW += h_prev.T @ dgh
                    dh_next += dgh @ W.T
            if x_proj.requires_grad:
                x_proj._accumulate(dx)
            if w_hh.requires_grad:
                w_hh._accumulate(dW)
            if b_hh.requires_grad:
                b_hh._accumulate(db)
        out._backward = backward
    return out


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = pred - ensure_tensor(target)
    return (diff * diff).mean()


# ------------------------------------------------------------ initialisation
def uniform_param(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, name: str = "") -> Tensor:
    """Parameter drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class Adam:
    """Adam with bias correction.  ``t`` counts completed steps."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                label = p.name or f"#{i}"
                raise ValueError(f"parameter {label} has no gradient")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)
