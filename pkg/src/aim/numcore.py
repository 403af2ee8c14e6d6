"""Dense float64 tensors with reverse-mode autodiff.

Small tape-per-forward engine: every op that sees a grad-requiring input
records a node with a backward closure.  Graphs are built fresh on each
forward pass and consumed by ``backward``; tensors are immutable by
convention once created.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Dict, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation precondition was violated."""


class DegenerateRowError(ContractError):
    """A softmax row has no visible keys."""


# Debug-mode finite check after every op (creation always checks).
debug_checks = False

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor contains NaN/Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._bwd: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() on non-scalar tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


GradientMap = Dict[str, Tensor]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], bwd: Callable) -> Tensor:
    if debug_checks and not np.all(np.isfinite(data)):
        raise ContractError("op produced NaN/Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._parents = ()
    out._bwd = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    else:
        out.requires_grad = False
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad down to the given (broadcast-source) shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    return add(a, scale(_as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(data, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _make(a.data * c, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (g.T,)

    return _make(a.data.T, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=0)

    def bwd(g):
        grads = []
        off = 0
        for n in sizes:
            grads.append(g[off:off + n])
            off += n
        return tuple(grads)

    return _make(data, parts, bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def bwd(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _make(a.data[start:stop].copy(), (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def bwd(g):
        return (np.full(shape, float(g)),)

    return _make(np.asarray(a.data.sum()), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _make(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _make(np.log(ad), (a,), bwd)


def softmax_masked(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax restricted to visible keys; masked entries exactly 0.

    mask is a boolean query x key array of the same shape as logits.
    Stabilization subtracts the per-row max over visible entries only.
    """
    logits = _as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ShapeError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    if not mask.any(axis=-1).all():
        raise DegenerateRowError("softmax row with zero visible keys")
    z = np.where(mask, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    e = np.where(mask, e, 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (logits,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm gain/bias must match last dim of x")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def bwd(g):
        # grads through xhat = (x - mu) * inv
        gxhat = g * gd
        gx = inv * (gxhat
                    - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), bwd)


def backward(loss: Tensor, params: Dict[str, Tensor] | None = None) -> GradientMap:
    """Reverse-mode sweep from a scalar loss.

    Returns gradients for every named requires_grad leaf reached from the
    loss.  If ``params`` is given, parameters off the path get exact zeros.
    The recorded graph is released afterwards.
    """
    if loss.data.size != 1:
        raise ContractError("backward expects a scalar loss")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        if node._bwd is None:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._bwd(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
        node._parents = ()
        node._bwd = None

    out: GradientMap = {}
    for node in topo:
        if node._parents == () and node.requires_grad and node.name is not None:
            g = grads.get(id(node))
            if g is not None:
                out[node.name] = Tensor(g)
    if params is not None:
        for name, p in params.items():
            if name not in out:
                out[name] = Tensor(np.zeros_like(p.data))
            if out[name].shape != p.shape:
                raise ContractError(f"gradient shape mismatch for {name}")
    return out


def grad_check(f: Callable[[], Tensor], params: Dict[str, Tensor],
               h: float = 1e-5, n_samples: int = 5,
               rng: np.random.Generator | None = None) -> Dict[str, float]:
    """Compare autodiff gradients against central finite differences.

    f must be deterministic and close over ``params``.  Samples up to
    n_samples entries per parameter block; returns the max relative error
    per block (denominator floored at 1e-6).
    """
    rng = rng or np.random.default_rng(0)
    grads = backward(f(), params)
    report: Dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idxs = range(n) if n <= n_samples else rng.choice(n, size=n_samples, replace=False)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            ad = grads[name].data.reshape(-1)[i]
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-6)
            worst = max(worst, rel)
        report[name] = worst
    return report
