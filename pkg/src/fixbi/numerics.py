"""Dense float64 tensors with reverse-mode autodiff, momentum SGD and LR decay.

Every loss in this package is composed from the handful of differentiable
primitives defined here. Graphs are built dynamically: each operation returns
a new :class:`Tensor` carrying vector-Jacobian closures back to its inputs,
and :func:`backward` replays those closures in reverse topological order.
There is no global state; ``backward`` accumulates gradients into a local map,
so concurrent evaluation on distinct graphs is safe.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

Array = np.ndarray

GradMap = dict[str, Array]
"""Named gradients, one entry per parameter, shapes matching the parameters."""


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


def _as_array(values) -> Array:
    return np.asarray(values, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array node in a dynamically built computation graph.

    ``data`` is stored row-major (C order). Leaves created with
    ``requires_grad=True`` are trainable; operation results record
    ``(parent, vjp)`` pairs consumed by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "_vjps")

    # keep numpy from absorbing us in mixed expressions like `array * tensor`;
    # our reflected operators handle those instead
    __array_ufunc__ = None

    def __init__(self, values, requires_grad: bool = False,
                 _vjps: Iterable[tuple["Tensor", Callable[[Array], Array]]] = ()):
        self.data = _as_array(values)
        self.requires_grad = bool(requires_grad)
        self._vjps = tuple(_vjps)

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction helpers ------------------------------------

    @staticmethod
    def _make(data: Array, vjps) -> "Tensor":
        vjps = [(p, fn) for p, fn in vjps if p.requires_grad]
        return Tensor(data, requires_grad=bool(vjps), _vjps=vjps)

    # -- elementwise arithmetic (numpy broadcasting allowed) ------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = self.data + other.data
        return Tensor._make(out, [
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (other, lambda g: _unbroadcast(g, other.data.shape)),
        ])

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, [(self, lambda g: -g)])

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = self.data - other.data
        return Tensor._make(out, [
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (other, lambda g: _unbroadcast(-g, other.data.shape)),
        ])

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        sd, od = self.data, other.data  # capture forward-time values
        return Tensor._make(sd * od, [
            (self, lambda g: _unbroadcast(g * od, sd.shape)),
            (other, lambda g: _unbroadcast(g * sd, od.shape)),
        ])

    __rmul__ = __mul__

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError("matmul expects two 2-D tensors")
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(
                f"matmul inner dims differ: {self.data.shape} @ {other.data.shape}")
        sd, od = self.data, other.data
        return Tensor._make(sd @ od, [
            (self, lambda g: g @ od.T),
            (other, lambda g: sd.T @ g),
        ])

    def __rmatmul__(self, other) -> "Tensor":
        return as_tensor(other) @ self

    # -- nonlinearities and reductions ----------------------------------

    def relu(self) -> "Tensor":
        mask = self.data > 0.0
        return Tensor._make(np.where(mask, self.data, 0.0),
                            [(self, lambda g: g * mask)])

    def log(self) -> "Tensor":
        # callers guard the domain (see clamp_min); log itself is raw
        sd = self.data
        return Tensor._make(np.log(sd), [(self, lambda g: g / sd)])

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, [(self, lambda g: g * out)])

    def clamp_min(self, lo: float) -> "Tensor":
        """Elementwise ``max(x, lo)``; gradient passes where ``x >= lo``.

        NaN propagates (np.maximum semantics) so a poisoned forward pass
        cannot masquerade as a finite loss.
        """
        mask = self.data >= lo
        return Tensor._make(np.maximum(self.data, lo),
                            [(self, lambda g: g * mask)])

    def sum(self) -> "Tensor":
        shape = self.data.shape
        return Tensor._make(np.asarray(self.data.sum()),
                            [(self, lambda g: np.broadcast_to(g, shape).copy())])

    def mean(self) -> "Tensor":
        n = self.data.size
        if n == 0:
            raise ShapeError("mean() of an empty tensor")
        return self.sum() * (1.0 / n)


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with the bias broadcast over rows."""
    return (as_tensor(x) @ w) + b


def squared_l2(x: Tensor) -> Tensor:
    """Sum of squared entries."""
    x = as_tensor(x)
    return (x * x).sum()


def softmax_t(logits, temperature=1.0) -> Tensor:
    """Row softmax of ``logits / T`` with max-subtraction stabilization.

    ``temperature`` may be a positive float or a scalar Tensor (shape () or
    (1,)), in which case gradients also flow into it.
    """
    z = as_tensor(logits)
    if z.data.ndim != 2 or z.data.shape[1] < 2:
        raise ShapeError(f"softmax_t expects a [B x C] tensor with C >= 2, got {z.shape}")
    t_node = temperature if isinstance(temperature, Tensor) else None
    if t_node is not None:
        if t_node.data.size != 1:
            raise ShapeError("temperature tensor must be scalar")
        t = float(t_node.data.reshape(()))
    else:
        t = float(temperature)
    if not t > 0.0:
        raise ValueError(f"temperature must be positive, got {t}")

    zc = z.data - z.data.max(axis=1, keepdims=True)
    e = np.exp(zc / t)
    y = e / e.sum(axis=1, keepdims=True)

    vjps = []

    def vjp_logits(g: Array) -> Array:
        inner = (g * y).sum(axis=1, keepdims=True)
        return y * (g - inner) / t

    vjps.append((z, vjp_logits))
    if t_node is not None:
        def vjp_temperature(g: Array) -> Array:
            # dy/dT = -y * (zc - sum_k y_k zc_k) / T^2 (shift-invariant in z)
            m = (y * zc).sum(axis=1, keepdims=True)
            val = -(g * y * (zc - m)).sum() / (t * t)
            return np.full(t_node.data.shape, val)

        vjps.append((t_node, vjp_temperature))
    return Tensor._make(y, vjps)


def grl(x: Tensor, grl_lambda: float) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient scaled by -lambda."""
    if grl_lambda < 0.0:
        raise ValueError(f"grl_lambda must be >= 0, got {grl_lambda}")
    x = as_tensor(x)
    return Tensor._make(x.data.copy(), [(x, lambda g: g * (-grl_lambda))])


class ParamSet:
    """Named trainable tensors plus one SGD momentum buffer per parameter.

    Names are unique; momentum buffers always match their parameter's shape.
    Iteration order is insertion order, which keeps training and
    checkpointing deterministic.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._momentum: dict[str, Array] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(values, requires_grad=True)
        self._params[name] = t
        self._momentum[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def momentum(self, name: str) -> Array:
        return self._momentum[name]

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def clone(self) -> "ParamSet":
        """Deep-copy parameter values; momentum buffers start at zero."""
        out = ParamSet()
        for name, t in self._params.items():
            out.add(name, t.data.copy())
        return out

    def value_bytes(self) -> bytes:
        """Concatenated raw bytes of all parameter values, for bit-exact compares."""
        return b"".join(t.data.tobytes() for t in self._params.values())


def backward(loss: Tensor, params: ParamSet) -> GradMap:
    """Exact reverse-mode gradients of a scalar ``loss`` for every parameter.

    Parameters unreachable from ``loss`` get zero gradients. The walk is a
    deterministic reverse topological order, so repeated calls on identical
    graphs produce bit-identical results.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")

    # iterative post-order DFS over grad-requiring ancestry
    topo: list[Tensor] = []
    visited: set[int] = {id(loss)}
    stack: list[tuple[Tensor, int]] = [(loss, 0)]
    while stack:
        node, i = stack.pop()
        while i < len(node._vjps):
            parent = node._vjps[i][0]
            i += 1
            if parent.requires_grad and id(parent) not in visited:
                visited.add(id(parent))
                stack.append((node, i))
                stack.append((parent, 0))
                break
        else:
            topo.append(node)

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node._vjps:
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib

    out: GradMap = {}
    for name, t in params.items():
        g = grads.get(id(t))
        out[name] = np.zeros_like(t.data) if g is None else g.reshape(t.data.shape)
    return out


def sgd_step(params: ParamSet, grads: Mapping[str, Array], lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0) -> ParamSet:
    """Momentum SGD with coupled weight decay, applied in place.

    For each parameter: ``v <- momentum*v + (g + weight_decay*w)`` then
    ``w <- w - lr*v``. Returns the updated set.
    """
    if not lr > 0.0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if weight_decay < 0.0:
        raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
    for name, t in params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != t.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {t.data.shape} for {name!r}")
    for name, t in params.items():
        v = params.momentum(name)
        v *= momentum
        v += grads[name] + weight_decay * t.data
        t.data = t.data - lr * v
    return params


def lr_schedule(lr0: float, progress: float) -> float:
    """Inverse-decay learning rate ``lr0 / (1 + 10 p)^0.75`` for ``p`` in [0, 1]."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must be in [0, 1], got {progress}")
    return lr0 / (1.0 + 10.0 * progress) ** 0.75
