"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Values live in float64 numpy arrays. Every primitive that touches a tensor
with ``requires_grad`` appends a node to the active :class:`Tape`;
:func:`backward` replays that tape in reverse and writes ``.grad`` on leaf
tensors. Other modules register their own primitives through
:meth:`Tape.record`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


class DomainError(ValueError):
    """Raised when a primitive is evaluated outside its domain."""


class BackwardError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name", "_produced")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.require(values, np.float64, "C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._produced = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return not self._produced

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, k: int):
        return power(self, k)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of executed primitives."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
        """Attach ``out`` to the tape if any input is on the differentiation path.

        ``backward_fn(upstream)`` must return one gradient (or None) per input.
        """
        if self.enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._produced = True
            self.nodes.append(Node(out, tuple(inputs), backward_fn, op))
        return out


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def _record(op, out_values, inputs, backward_fn) -> Tensor:
    return _TAPE.record(op, Tensor(out_values), inputs, backward_fn)


# --------------------------------------------------------------------------
# broadcasting helpers: equal shapes, scalars, or a trailing-suffix operand
# (bias over a batch of feature rows) are the only accepted patterns


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) <= len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: shape mismatch {sa} vs {sb}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    size = int(np.prod(shape)) if shape else 1
    if size == 1:
        return np.full(shape, g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.values + b.values, (a, b),
                   lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.values - b.values, (a, b),
                   lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("mul", a, b)
    av, bv = a.values, b.values

    def back(g):
        ga = _reduce_to(g * bv, av.shape) if a.requires_grad else None
        gb = _reduce_to(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", av * bv, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.values * c, (a,), lambda g: (g * c,))


def power(a: Tensor, k: int) -> Tensor:
    if int(k) != k or k < 0:
        raise DomainError(f"power needs an integer exponent >= 0, got {k}")
    k = int(k)
    av = a.values
    if k == 0:
        return _record("power", np.ones_like(av), (a,), lambda g: (np.zeros_like(g),))
    return _record("power", av ** k, (a,), lambda g: (g * k * av ** (k - 1),))


def absolute(a: Tensor) -> Tensor:
    av = a.values
    return _record("abs", np.abs(av), (a,), lambda g: (g * np.sign(av),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.values
    if np.any(av <= 0):
        idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(av <= 0)), av.shape))
        raise DomainError(f"log of non-positive value {av[idx]} at index {idx}")
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def relu(a: Tensor) -> Tensor:
    av = a.values
    return _record("relu", np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


# --------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    if a.values.ndim < 2 or b.values.ndim < 2 or sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: shape mismatch {sa} vs {sb}")
    if b.values.ndim > 2 and sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul: batch dims differ {sa} vs {sb}")
    av, bv = a.values, b.values

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bv.ndim == 2:
                gb = av.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _record("matmul", av @ bv, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for x of shape (..., k), w (k, n), b (n,)."""
    if w.values.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: shape mismatch {x.shape} vs {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} vs {(w.shape[1],)}")
    xv, wv = x.values, w.values
    out = xv @ wv
    if b is not None:
        out = out + b.values
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [g @ wv.T if x.requires_grad else None,
                 xv.reshape(-1, xv.shape[-1]).T @ g2 if w.requires_grad else None]
        if b is not None:
            grads.append(g2.sum(axis=0) if b.requires_grad else None)
        return grads

    return _record("linear", out, inputs, back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axis1: int, axis2: int) -> Tensor:
    out = np.ascontiguousarray(np.swapaxes(a.values, axis1, axis2))
    return _record("transpose", out, (a,), lambda g: (np.swapaxes(g, axis1, axis2),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    shapes = [t.shape for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    splits = np.cumsum([s[axis] for s in shapes])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(tensors), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DomainError(f"embedding: id out of range [0, {table.shape[0]})")

    def back(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding", table.values[ids], (table,), back)


# --------------------------------------------------------------------------
# reductions and normalisation


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the primitive name
    shape = a.shape
    return _record("sum", np.asarray(a.values.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _record("mean", np.asarray(a.values.mean()), (a,),
                   lambda g: (np.full(shape, float(g) / n),))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_back(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def softmax(a: Tensor) -> Tensor:
    y = _softmax_np(a.values)
    return _record("softmax", y, (a,), lambda g: (_softmax_back(y, g),))


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to positions where ``mask`` is true.

    ``mask`` is a constant boolean array broadcastable to ``a``; every row
    must keep at least one position.
    """
    keep = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    z = np.where(keep, a.values, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record("masked_softmax", y, (a,), lambda g: (_softmax_back(y, g),))


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    xv = x.values
    d = xv.shape[-1]
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.values
    if beta is not None:
        out = out + beta.values
    inputs = tuple(t for t in (x, gamma, beta) if t is not None)

    def back(g):
        gx_hat = g * gamma.values if gamma is not None else g
        gx = None
        if x.requires_grad:
            gx = inv / d * (d * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append(_reduce_to(g * xhat, gamma.shape) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(_reduce_to(g, beta.shape) if beta.requires_grad else None)
        return grads

    return _record("layer_norm", out, inputs, back)


def mean_pool(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Average (batch, seq, features) over the sequence axis, skipping masked-out steps."""
    if x.values.ndim != 3:
        raise ShapeError(f"mean_pool expects (batch, seq, features), got {x.shape}")
    b, t, _ = x.shape
    w = np.ones((b, t)) if mask is None else np.asarray(mask, dtype=np.float64)
    if w.shape != (b, t):
        raise ShapeError(f"mean_pool: mask shape {w.shape} vs {(b, t)}")
    w = w / w.sum(axis=1, keepdims=True)
    out = np.einsum("bt,btd->bd", w, x.values)
    return _record("mean_pool", out, (x,), lambda g: (w[:, :, None] * g[:, None, :],))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.values.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return _record("cross_entropy", np.asarray(loss), (logits,), back)


# --------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Replay the tape in reverse; leaf tensors receive ``d loss / d leaf``.

    Leaves reached by the tape get a fresh gradient (zeros when the loss does
    not depend on them). The tape is cleared afterwards.
    """
    tape = tape or _TAPE
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise BackwardError("tape is empty: run a new forward pass before calling backward")
    if not loss.requires_grad:
        raise BackwardError("loss is not connected to any trainable tensor")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        for t in node.inputs:
            if t.requires_grad and t.is_leaf:
                leaves.setdefault(id(t), t)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.zeros(t.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
    tape.clear()


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_index: tuple | None = None
    message: str = ""


def gradient_check(f: Callable[[], Tensor], x: Tensor | Iterable[Tensor], eps: float = 1e-5,
                   tol: float = 1e-5, skip: Callable[[int, tuple], bool] | None = None
                   ) -> GradCheckReport:
    """Compare analytic gradients of a scalar ``f()`` with central differences.

    ``f`` takes no arguments and must read the tensors in ``x`` (mutated in
    place here). The relative error per coordinate divides by
    ``max(1, |analytic|, |numeric|)``. ``skip(k, index)`` can exclude
    coordinates of the k-th tensor, e.g. near a kink.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    params = [x] if isinstance(x, Tensor) else list(x)
    for p in params:
        p.requires_grad = True
    _TAPE.clear()
    loss = f()
    backward(loss)
    analytic = [np.array(p.grad, copy=True) for p in params]
    worst, worst_idx = 0.0, None
    with no_grad():
        for k, p in enumerate(params):
            flat = p.values.reshape(-1)
            for i in range(flat.size):
                idx = (k,) + tuple(int(j) for j in np.unravel_index(i, p.shape))
                if skip is not None and skip(k, idx[1:]):
                    continue
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = analytic[k].reshape(-1)[i]
                if not (np.isfinite(num) and np.isfinite(ana)):
                    return GradCheckReport(float("inf"), False, idx,
                                           f"non-finite gradient at {idx}: analytic={ana}, numeric={num}")
                err = abs(ana - num) / max(1.0, abs(ana), abs(num))
                if err > worst:
                    worst, worst_idx = err, idx
    return GradCheckReport(worst, worst <= tol, worst_idx)
