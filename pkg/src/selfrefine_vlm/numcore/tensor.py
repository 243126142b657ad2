"""Dense float64 tensors with an explicit reverse-mode tape.

Every primitive lives on :class:`Tape`.  A tape records an operation only when
one of its inputs requires a gradient, so a tape built with ``record=False``
doubles as a plain numpy evaluator for inference.

Shapes are explicit: binary elementwise ops accept equal shapes or a scalar
operand, and anything else must go through :meth:`Tape.broadcast_to`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ArithmeticError):
    pass


class Tensor:
    """An n-d float64 array, optionally tracked by a :class:`Tape`."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, tape: Tape | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape = tape

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool, tape: Tape | None) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.tape = tape
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    # operator sugar; needs a tape on at least one operand
    def _tape_for(self, other=None) -> Tape:
        if self.tape is not None:
            return self.tape
        if isinstance(other, Tensor) and other.tape is not None:
            return other.tape
        raise RuntimeError("operator syntax needs a tensor bound to a tape; call Tape methods directly")

    def __add__(self, other):
        return self._tape_for(other).add(self, other)

    def __radd__(self, other):
        return self._tape_for(other).add(other, self)

    def __sub__(self, other):
        return self._tape_for(other).sub(self, other)

    def __rsub__(self, other):
        return self._tape_for(other).sub(other, self)

    def __mul__(self, other):
        return self._tape_for(other).mul(self, other)

    def __rmul__(self, other):
        return self._tape_for(other).mul(other, self)

    def __truediv__(self, other):
        return self._tape_for(other).div(self, other)

    def __neg__(self):
        return self._tape_for().neg(self)

    def __matmul__(self, other):
        return self._tape_for(other).matmul(self, other)

    def __getitem__(self, key):
        return self._tape_for().index(self, key)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _is_basic_key(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in items)


class Tape:
    """Records primitive operations for one forward pass.

    ``record=False`` turns the tape into a pure evaluator (nothing is kept).
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    # ------------------------------------------------------------------
    # plumbing
    # ------------------------------------------------------------------
    def constant(self, value) -> Tensor:
        return Tensor(value, requires_grad=False, tape=self)

    def _lift(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.tape is not None and x.tape is not self:
                raise RuntimeError("tensor belongs to a different tape")
            return x
        return Tensor._wrap(np.asarray(x, dtype=np.float64), False, self)

    def _emit(self, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
        needs = self.record and any(t.requires_grad for t in inputs)
        out = Tensor._wrap(data, needs, self)
        if needs:
            self.nodes.append(Node(inputs, out, vjp))
            self._produced.add(id(out))
        return out

    def backward(self, root: Tensor) -> None:
        """Populate ``grad`` on every leaf that requires it.

        Leaf gradients accumulate across calls; call ``zero_grad`` between
        independent passes.
        """
        if root.shape != ():
            raise ShapeError(f"backward needs a scalar root, got shape {list(root.shape)}")
        if root.tape is not self:
            raise RuntimeError("root was not produced on this tape")
        if not root.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in self._produced:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi

    # ------------------------------------------------------------------
    # elementwise
    # ------------------------------------------------------------------
    def _pair(self, a, b, op: str) -> tuple[Tensor, Tensor]:
        a, b = self._lift(a), self._lift(b)
        if a.shape != b.shape and a.shape != () and b.shape != ():
            raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")
        return a, b

    def add(self, a, b) -> Tensor:
        a, b = self._pair(a, b, "add")
        return self._emit(a.data + b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(g, b.shape)))

    def sub(self, a, b) -> Tensor:
        a, b = self._pair(a, b, "sub")
        return self._emit(a.data - b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(-g, b.shape)))

    def mul(self, a, b) -> Tensor:
        a, b = self._pair(a, b, "mul")
        return self._emit(
            a.data * b.data,
            (a, b),
            lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)),
        )

    def div(self, a, b) -> Tensor:
        a, b = self._pair(a, b, "div")
        if np.any(b.data == 0.0):
            raise DomainError("div: division by zero")
        out = a.data / b.data
        return self._emit(
            out,
            (a, b),
            lambda g: (_fit(g / b.data, a.shape), _fit(-g * out / b.data, b.shape)),
        )

    def neg(self, x) -> Tensor:
        x = self._lift(x)
        return self._emit(-x.data, (x,), lambda g: (-g,))

    def exp(self, x) -> Tensor:
        x = self._lift(x)
        with np.errstate(over="ignore"):
            out = np.exp(x.data)
        if not np.all(np.isfinite(out)):
            raise DomainError("exp: overflow (argument too large)")
        return self._emit(out, (x,), lambda g: (g * out,))

    def log(self, x) -> Tensor:
        x = self._lift(x)
        if np.any(x.data <= 0.0):
            raise DomainError("log: argument must be strictly positive")
        return self._emit(np.log(x.data), (x,), lambda g: (g / x.data,))

    def sqrt(self, x) -> Tensor:
        x = self._lift(x)
        if np.any(x.data < 0.0):
            raise DomainError("sqrt: negative argument")
        out = np.sqrt(x.data)
        return self._emit(out, (x,), lambda g: (0.5 * g / out,))

    def tanh(self, x) -> Tensor:
        x = self._lift(x)
        out = np.tanh(x.data)
        return self._emit(out, (x,), lambda g: (g * (1.0 - out * out),))

    def gelu(self, x) -> Tensor:
        # tanh approximation
        x = self._lift(x)
        c = np.sqrt(2.0 / np.pi)
        u = c * (x.data + 0.044715 * x.data**3)
        t = np.tanh(u)
        out = 0.5 * x.data * (1.0 + t)

        def vjp(g):
            du = c * (1.0 + 3 * 0.044715 * x.data**2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

        return self._emit(out, (x,), vjp)

    def masked_fill(self, x, mask: np.ndarray, value: float) -> Tensor:
        x = self._lift(x)
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        out = np.where(mask, value, x.data)
        return self._emit(out, (x,), lambda g: (np.where(mask, 0.0, g),))

    # ------------------------------------------------------------------
    # linear algebra and shape
    # ------------------------------------------------------------------
    def matmul(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul: need rank >= 2, got {list(a.shape)} and {list(b.shape)}")
        if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
            raise ShapeError(f"matmul: shape mismatch {list(a.shape)} vs {list(b.shape)}")
        out = a.data @ b.data

        def vjp(g):
            ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                if b.ndim == 2 and a.ndim > 2:
                    gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = np.swapaxes(a.data, -1, -2) @ g
            return ga, gb

        return self._emit(out, (a, b), vjp)

    def transpose(self, x, axes: Sequence[int] | None = None) -> Tensor:
        x = self._lift(x)
        if axes is None:
            axes = list(range(x.ndim))
            axes[-1], axes[-2] = axes[-2], axes[-1]
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        return self._emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))

    def reshape(self, x, shape: Sequence[int]) -> Tensor:
        x = self._lift(x)
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != x.size or any(s < 0 for s in shape):
            raise ShapeError(f"reshape: cannot view {list(x.shape)} as {list(shape)}")
        src = x.shape
        return self._emit(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(src),))

    def broadcast_to(self, x, shape: Sequence[int]) -> Tensor:
        """Explicit broadcast; the only place implicit numpy expansion is allowed."""
        x = self._lift(x)
        shape = tuple(shape)
        try:
            out = np.broadcast_to(x.data, shape).copy()
        except ValueError:
            raise ShapeError(f"broadcast_to: {list(x.shape)} vs {list(shape)}") from None
        return self._emit(out, (x,), lambda g: (_unbroadcast(g, x.shape),))

    def concat(self, xs: Sequence, axis: int = 0) -> Tensor:
        xs = tuple(self._lift(x) for x in xs)
        ref = xs[0].shape
        ax = axis % len(ref)
        for t in xs[1:]:
            if len(t.shape) != len(ref) or any(
                p != q for i, (p, q) in enumerate(zip(t.shape, ref)) if i != ax
            ):
                raise ShapeError(f"concat: shape mismatch {list(ref)} vs {list(t.shape)}")
        out = np.concatenate([t.data for t in xs], axis=ax)
        cuts = np.cumsum([t.shape[ax] for t in xs])[:-1]
        return self._emit(out, xs, lambda g: tuple(np.split(g, cuts, axis=ax)))

    def index(self, x, key) -> Tensor:
        """``x[key]`` as a copy; fancy keys scatter-add on the way back."""
        x = self._lift(x)
        out = np.array(x.data[key], dtype=np.float64)
        basic = _is_basic_key(key)

        def vjp(g):
            full = np.zeros_like(x.data)
            if basic:
                full[key] += g
            else:
                np.add.at(full, key, g)
            return (full,)

        return self._emit(out, (x,), vjp)

    def embedding(self, table, ids) -> Tensor:
        table = self._lift(table)
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")
        out = table.data[ids]

        def vjp(g):
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            return (full,)

        return self._emit(out, (table,), vjp)

    # ------------------------------------------------------------------
    # reductions and normalisers
    # ------------------------------------------------------------------
    def sum(self, x, axis: int | None = None, keepdims: bool = False) -> Tensor:
        x = self._lift(x)
        out = np.sum(x.data, axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return self._emit(np.asarray(out, dtype=np.float64), (x,), vjp)

    def mean(self, x, axis: int | None = None, keepdims: bool = False) -> Tensor:
        x = self._lift(x)
        n = x.size if axis is None else x.shape[axis]
        if n == 0:
            raise ShapeError("mean of an empty axis")
        return self.mul(self.sum(x, axis, keepdims), 1.0 / n)

    def softmax(self, x) -> Tensor:
        x = self._lift(x)
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
        return self._emit(
            out, (x,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
        )

    def log_softmax(self, x) -> Tensor:
        x = self._lift(x)
        z = x.data - x.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = z - lse
        return self._emit(
            out, (x,), lambda g: (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)
        )

    def layer_norm(self, x, gain, bias, eps: float = 1e-5) -> Tensor:
        x, gain, bias = self._lift(x), self._lift(gain), self._lift(bias)
        d = x.shape[-1]
        if gain.shape != (d,) or bias.shape != (d,):
            raise ShapeError(
                f"layer_norm: feature width {d} vs gain {list(gain.shape)} / bias {list(bias.shape)}"
            )
        mu = x.data.mean(axis=-1, keepdims=True)
        xc = x.data - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        out = xhat * gain.data + bias.data

        def vjp(g):
            lead = g.reshape(-1, d)
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
            return gx, (lead * xhat.reshape(-1, d)).sum(axis=0), lead.sum(axis=0)

        return self._emit(out, (x, gain, bias), vjp)

    # ------------------------------------------------------------------
    # composites kept here because every model module wants them
    # ------------------------------------------------------------------
    def linear(self, x, weight, bias=None) -> Tensor:
        y = self.matmul(x, weight)
        if bias is None:
            return y
        return self.add(y, self.broadcast_to(bias, y.shape))


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def parameter(data) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True)
