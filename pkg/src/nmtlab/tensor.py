"""Dense float32 arrays with recorded-operation reverse-mode differentiation.

Every forward op checks its output for NaN/Inf and records just enough of the
computation graph to run reverse accumulation from a scalar loss. The graph is
the tape: each output tensor keeps references to its parents and a closure
computing their gradients.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np


class NumericsError(RuntimeError):
    """A forward op produced NaN or Inf."""


# Recording state is thread-local: evaluation threads entering no_grad() must
# not disturb each other (decoding parallelises across sentences).
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation/decoding paths)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def default_dtype(dtype):
    """Override the storage dtype (float32 in production; finite-difference
    oracles switch to float64 so round-off does not drown the comparison)."""
    prev = _dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype())
        self.requires_grad = requires_grad
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    # Operator sugar for the common binary ops.
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by op {op!r}")


def _tracked(parents) -> bool:
    return _grad_enabled() and any(p.requires_grad or p._parents for p in parents)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _tracked(parents):
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a gradient back to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(data, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * np.float32(c)

    def backward(g):
        return (g * np.float32(c),)

    return _result(data, (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _result(data, (a,), backward, "relu")


def softmax_lastdim(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _result(data, (a,), backward, "softmax_lastdim")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.float32(eps))
    normed = centered * inv_std
    data = normed * gain.data + bias.data
    n = x.data.shape[-1]

    def backward(g):
        g_normed = g * gain.data
        # d/dx of (x - mean) * inv_std with mean/var both functions of x
        gx = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).sum(axis=-1, keepdims=True) / n
        )
        g_gain = _unbroadcast(g * normed, gain.shape)
        g_bias = _unbroadcast(g, bias.shape)
        return gx.astype(x.data.dtype), g_gain, g_bias

    return _result(data, (x, gain, bias), backward, "layer_norm")


def embedding_gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer `ids`; gradient scatter-adds back."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"ids out of range [0, {table.shape[0]}) for embedding_gather"
        )
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _result(data, (table,), backward, "embedding_gather")


def dropout(a: Tensor, p: float, seed: int, train: bool) -> Tensor:
    """Zero entries with probability p and rescale survivors by 1/(1-p).

    Identity in eval mode. The mask is a pure function of `seed`.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = (rng.random(a.shape) >= p).astype(np.float32) / np.float32(1.0 - p)
    data = a.data * keep

    def backward(g):
        return (g * keep,)

    return _result(data, (a,), backward, "dropout")


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tuple(tensors), backward, "concat")


def transpose_lastdims(a: Tensor) -> Tensor:
    data = np.swapaxes(a.data, -1, -2)

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _result(data, (a,), backward, "transpose_lastdims")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(data, (a,), backward, "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(data, (a,), backward, "reshape")


def tsum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _result(data, (a,), backward, "sum")


def cross_entropy_with_label_mask(
    logits: Tensor,
    targets: np.ndarray,
    mask: np.ndarray,
    label_smoothing: float = 0.0,
) -> Tensor:
    """Masked mean cross-entropy over the last-dim class axis.

    `targets` holds class indices shaped like logits minus the class axis;
    `mask` (same shape, float or bool) selects the positions that count.
    With smoothing s the target distribution puts 1-s on the true class and
    s/(V-1) on every other class.
    """
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    targets = np.asarray(targets)
    maskf = np.asarray(mask, dtype=np.float32)
    if maskf.sum() == 0:
        raise ValueError("cross entropy needs at least one unmasked position")
    v = logits.shape[-1]
    flat_logits = logits.data.reshape(-1, v)
    flat_targets = targets.reshape(-1)
    flat_mask = maskf.reshape(-1)

    shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsumexp

    s = np.float32(label_smoothing)
    n = np.arange(flat_targets.shape[0])
    target_logp = logp[n, flat_targets]
    if label_smoothing > 0.0:
        other = (logp.sum(axis=-1) - target_logp) / np.float32(v - 1)
        per_pos = -((1.0 - s) * target_logp + s * other)
    else:
        per_pos = -target_logp
    denom = flat_mask.sum()
    data = np.asarray((per_pos * flat_mask).sum() / denom, dtype=flat_logits.dtype)

    def backward(g):
        # dloss/dlogits = (softmax - q) * mask / denom, q the smoothed target
        probs = np.exp(logp)
        q = np.full_like(probs, s / np.float32(v - 1) if v > 1 else 0.0)
        q[n, flat_targets] = 1.0 - s
        grad = (probs - q) * (flat_mask / denom)[:, None]
        return ((g * grad).reshape(logits.shape).astype(logits.data.dtype),)

    return _result(data, (logits,), backward, "cross_entropy_with_label_mask")


# ---------------------------------------------------------------------------
# Reverse accumulation
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Run reverse accumulation from a scalar loss.

    Returns gradients for every requires_grad leaf reachable from `loss`,
    and stores each on the leaf's `.grad`.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")

    # Iterative topological sort: children after all their parents.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        elif node.requires_grad:
            if g.shape != node.shape:
                raise AssertionError(
                    f"gradient shape {g.shape} != leaf shape {node.shape}"
                )
            node.grad = Tensor(g)
            leaf_grads[node] = node.grad
    return leaf_grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates and the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
) -> None:
    """One Adam update with bias correction, in place on `params`.

    Parameters without an entry in `grads` are left untouched (their moments
    do not advance either), which is what keeps frozen weights bit-identical.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
