"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: each operation stores its parent tensors and a
closure mapping the output gradient to parent gradients.  ``backward`` walks
the graph once in reverse topological order and accumulates gradients on leaf
tensors (those constructed with ``requires_grad=True``).

Conventions the rest of the package relies on:

* all in-memory arithmetic is float64; checkpoints downcast to float32 on
  disk only,
* masks are additive: 0.0 keeps a position, ``MASK_DROP`` (-1e9) drops it,
* every matrix-style op treats the last two axes as the matrix and lets any
  leading axes broadcast, so the same code path serves a single ``s x d``
  sequence and a batch stacked as ``B x s x d``,
* randomness flows through :class:`RngStream`, a counter-based splittable
  source: any draw is reproducible from ``(seed, counter)`` alone,
  independent of batch composition or call history elsewhere.

Thread-safety: tensors and streams are plain mutable objects.  Forward and
backward passes on distinct graphs may run on distinct threads, but a single
graph (and gradient accumulation into its leaves) must stay on one thread.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateRowError,
    DimensionError,
)

MASK_DROP = -1.0e9
# Anything at or below this threshold counts as dropped when masks are
# combined additively (pad + quadrant can stack to -2e9).
_MASK_DROP_LIMIT = -1.0e8

_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    """A float64 array plus optional autodiff bookkeeping.

    ``grad`` is populated on leaves only, and accumulates across backward
    calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._consumed = False

    @classmethod
    def _wrap(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t._consumed = False
        if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = parents
            t._backward = backward
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward = None
        return t

    # -- conveniences ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic --------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        if isinstance(b, (int, float)):
            out = a.data + b
            return Tensor._wrap(out, (a,), lambda g: (g,))
        b = Tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    ash, bsh = a.data.shape, b.data.shape
    return Tensor._wrap(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data - b
        return Tensor._wrap(out, (a,), lambda g: (g,))
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    ash, bsh = a.data.shape, b.data.shape
    return Tensor._wrap(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        if isinstance(b, (int, float)):
            c = float(b)
            out = a.data * c
            return Tensor._wrap(out, (a,), lambda g: (g * c,))
        b = Tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    ad, bd = a.data, b.data
    return Tensor._wrap(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes; leading axes broadcast."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for {ad.shape} x {bd.shape}")
    out = np.matmul(ad, bd)

    def back(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return ga, gb

    return Tensor._wrap(out, (a, b), back)


def transpose(x: Tensor) -> Tensor:
    """Swap the trailing two axes."""
    if x.data.ndim < 2:
        raise DimensionError(f"transpose: need at least 2 axes, got shape {x.data.shape}")
    return Tensor._wrap(x.data.swapaxes(-1, -2), (x,), lambda g: (g.swapaxes(-1, -2),))


def swap_axes(x: Tensor, a: int, b: int) -> Tensor:
    return Tensor._wrap(x.data.swapaxes(a, b), (x,), lambda g: (g.swapaxes(a, b),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.data.shape
    return Tensor._wrap(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = -2) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._wrap(out, tuple(parts), back)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start:stop)`` along one axis."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.data.shape

    def back(g):
        buf = np.zeros(shape, dtype=np.float64)
        buf[idx] = g
        return (buf,)

    return Tensor._wrap(x.data[idx], (x,), back)


def permute_rows(x: Tensor, order: np.ndarray) -> Tensor:
    """Reorder rows (axis -2) by ``order``, which must be a permutation.

    ``order`` has shape ``x.shape[:-2] + (s,)`` (or broadcasts to it); the
    backward pass applies the inverse permutation, so no scatter-add is
    needed.
    """
    order = np.asarray(order)
    out = np.take_along_axis(x.data, order[..., None], axis=-2)
    inverse = np.argsort(order, axis=-1)

    def back(g):
        return (np.take_along_axis(g, inverse[..., None], axis=-2),)

    return Tensor._wrap(out, (x,), back)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (V x e) at integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    out = table.data[ids]
    vshape = table.data.shape

    def back(g):
        buf = np.zeros(vshape, dtype=np.float64)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, vshape[-1]))
        return (buf,)

    return Tensor._wrap(out, (table,), back)


# -- nonlinearities ----------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return Tensor._wrap(out, (x,), lambda g: (g * (out > 0.0),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return Tensor._wrap(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._wrap(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Evaluate from the side that keeps exp() bounded.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- reductions --------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._wrap(np.asarray(out), (x,), back)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- composite primitives ----------------------------------------------------


def masked_softmax_rows(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax (last axis) after adding ``mask``.

    ``mask`` is a constant additive array broadcastable against ``logits``:
    0.0 keeps an entry, anything at or below -1e8 drops it (the canonical
    drop value is ``MASK_DROP``).  Row maxima are subtracted before
    exponentiation, so dropped entries underflow to exactly 0.0.

    Raises :class:`DegenerateRowError` when some row has no kept entry and
    :class:`DimensionError` when the mask does not broadcast.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0.0) | (mask <= _MASK_DROP_LIMIT)):
        raise ContractError("masked_softmax_rows: mask entries must be 0 or <= -1e8")
    if np.any(np.all(mask <= _MASK_DROP_LIMIT, axis=-1)):
        raise DegenerateRowError("masked_softmax_rows: a row has every key masked")
    try:
        shifted = logits.data + mask
    except ValueError:
        raise DimensionError(
            f"masked_softmax_rows: mask {mask.shape} does not broadcast to logits {logits.data.shape}"
        )
    shifted -= shifted.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    weights /= weights.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * weights).sum(axis=-1, keepdims=True)
        return (weights * (g - dot),)

    return Tensor._wrap(weights, (logits,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.data.shape} / bias {bias.data.shape} must be ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv

    def back(g):
        lead = tuple(range(g.ndim - 1))
        gbias = g.sum(axis=lead)
        ggain = (g * normed).sum(axis=lead)
        gn = g * gain.data
        # d/dx of (x - mu) * inv with mu, inv functions of x.
        gvar = (gn * centered).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
        gmu = (-inv) * gn.sum(axis=-1, keepdims=True)
        gx = gn * inv + gvar * (2.0 / d) * centered + gmu / d
        return gx, ggain, gbias

    return Tensor._wrap(normed * gain.data + bias.data, (x, gain, bias), back)


def dropout(x: Tensor, p: float, rng: "RngStream", train: bool) -> Tensor:
    """Inverted dropout: scale kept entries by 1/(1-p) at train time.

    Identity when ``train`` is false or ``p == 0``, so evaluation and
    gradient checks see a deterministic network.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout: p must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return Tensor._wrap(x.data * keep, (x,), lambda g: (g * keep,))


# -- backward ----------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``root``.

    Gradients accumulate (+=) into ``.grad`` of every reachable leaf.
    Calling backward twice on the same output is rejected; build a fresh
    graph (or a fresh loss) instead.
    """
    if root.data.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.data.shape}")
    if root._consumed:
        raise ContractError("backward: already called on this output; rebuild the graph")
    root._consumed = True
    if not root.requires_grad:
        return

    order: list[Tensor] = []
    visited = {id(root)}
    stack: list[tuple[Tensor, Iterable[Tensor]]] = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        nxt = None
        for p in it:
            if p.requires_grad and id(p) not in visited:
                nxt = p
                break
        if nxt is None:
            order.append(node)
            stack.pop()
        else:
            visited.add(id(nxt))
            stack.append((nxt, iter(nxt._parents)))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            held = grads.get(id(parent))
            grads[id(parent)] = pg if held is None else held + pg


def finite_diff_grad(f: Callable[[], float], params: Sequence[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``f()`` w.r.t. each tensor in ``params``.

    ``f`` must be a pure function of the current parameter values.  Entries
    are perturbed one at a time and restored bitwise.  This is the
    independent oracle the analytic backward pass is checked against.
    """

    def evaluate() -> float:
        with no_grad():
            out = f()
        return float(out.data) if isinstance(out, Tensor) else float(out)

    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * eps)
        grads.append(g.reshape(p.data.shape))
    return grads


# -- randomness --------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & _MASK64
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngStream:
    """Counter-based splittable random source.

    Each draw keys a fresh Philox generator with ``(seed, counter)`` and
    bumps the counter, so identical ``(seed, counter)`` pairs give identical
    sequences on every platform.  ``child`` derives an independent stream
    from an integer or string label; deriving the same label twice gives the
    same stream, which is what makes per-sample randomness independent of
    batch composition.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        if not isinstance(seed, (int, np.integer)):
            raise ConfigurationError(f"RngStream seed must be an integer, got {type(seed).__name__}")
        self.seed = int(seed) & _MASK64
        self.counter = int(counter) & _MASK64

    def child(self, label) -> "RngStream":
        mixed = _splitmix64(self.seed ^ _splitmix64(_label_to_int(label)))
        return RngStream(mixed)

    def _gen(self) -> np.random.Generator:
        key = np.array([self.seed, self.counter], dtype=np.uint64)
        self.counter = (self.counter + 1) & _MASK64
        return np.random.Generator(np.random.Philox(key=key))

    def generator(self) -> np.random.Generator:
        """A standalone numpy Generator keyed by the next counter value.

        For code that makes many small draws (data synthesis) a single
        long-lived generator is cheaper than one stream call per draw; the
        stream advances once, so later stream draws stay independent.
        """
        return self._gen()

    def random(self, shape=()) -> np.ndarray:
        """Uniform draws in [0, 1)."""
        return self._gen().random(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen().uniform(low, high, shape)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen().permutation(n)

    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)


def glorot_uniform(rng: RngStream, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    """Zero-mean uniform init with bound sqrt(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-bound, bound, shape)
