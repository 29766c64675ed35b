"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op accepts an optional leading batch axis on top of the single-sample
shapes (``conv2d`` takes ``[C, H, W]`` or ``[N, C, H, W]``, ``linear`` takes
``[in]`` or ``[N, in]``). Apart from that and the bias add there is no
broadcasting.
"""

from __future__ import annotations

from collections.abc import Iterator, MutableMapping
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from canonkit.errors import ConfigError, ContractError, DimensionError

LOG_CLAMP = 1e-12
NORM_CLAMP = 1e-12


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    # arithmetic sugar; all of these route through the functional ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use mul with a reciprocal")
        return scale(self, 1.0 / float(other))

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward_fn, op=op)
    return Tensor(data, op=op)


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Intermediate nodes receive no ``grad``; calling twice without zeroing
    accumulates.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --------------------------------------------------------------------------
# elementwise and structural ops
# --------------------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    # bias add: b matches the trailing axis of a
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return _make(
            a.data + b.data, (a, b),
            lambda g: (g, g.reshape(-1, b.shape[0]).sum(axis=0)), "add",
        )
    raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, clamp: float = LOG_CLAMP) -> Tensor:
    """Natural log of ``max(a, clamp)``; zero gradient where the clamp is active."""
    safe = np.maximum(a.data, clamp)
    live = a.data >= clamp
    return _make(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape

    def _bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), _bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis), 1.0 / float(n))


def take(a: Tensor, index) -> Tensor:
    """Differentiable ``a[index]`` (basic or advanced indexing)."""
    shape = a.shape

    def _bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.asarray(a.data[index]), (a,), _bw, "take")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise DimensionError(f"stack: shape mismatch {first} vs {t.shape}")

    def _bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, _bw, "stack")


def permute(a: Tensor, forward: Callable[[np.ndarray], np.ndarray], adjoint: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Apply a fixed index permutation ``forward``; ``adjoint`` must be its inverse."""
    return _make(np.ascontiguousarray(forward(a.data)), (a,), lambda g: (adjoint(g),), "permute")


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product for operands with identical leading axes (>= 2-D)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def _bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, (a, b), _bw, "matmul")


def dot(a: Tensor, v: Tensor) -> Tensor:
    """Contract the last axis of ``a`` with the vector ``v``: ``[..., d] . [d] -> [...]``."""
    a, v = as_tensor(a), as_tensor(v)
    if v.ndim != 1 or a.shape[-1] != v.shape[0]:
        raise DimensionError(f"dot: incompatible shapes {a.shape} . {v.shape}")

    def _bw(g):
        ga = g[..., None] * v.data
        gv = (g[..., None] * a.data).reshape(-1, v.shape[0]).sum(axis=0)
        return ga, gv

    return _make(a.data @ v.data, (a, v), _bw, "dot")


def linear(W: Tensor, b: Tensor, x: Tensor) -> Tensor:
    """``y = W x + b`` for ``x`` of shape ``[in]`` or ``[N, in]``."""
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1:] != (W.shape[1],) or x.ndim > 2:
        raise DimensionError(f"linear: W{W.shape} b{b.shape} x{x.shape} do not conform")
    single = x.ndim == 1
    xd = x.data[None] if single else x.data
    out = xd @ W.data.T + b.data

    def _bw(g):
        g2 = g[None] if single else g
        gx = g2 @ W.data
        return g2.T @ xd, g2.sum(axis=0), (gx[0] if single else gx)

    return _make(out[0] if single else out, (W, b, x), _bw, "linear")


def _conv_core(xd: np.ndarray, Kd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Same-padded correlation of ``xd [N, C, H, W]`` with ``Kd [O, C, k, k]``.

    Works on the zero-padded channels-last grid flattened to rows: kernel tap
    (di, dj) is a fixed row offset ``di * Wp + dj``, so the patch matrix is a
    strided view. Rows index padded-grid anchors; anchors outside the valid
    ``H x W`` region are computed and discarded.

    Returns the output ``[N, O, H, W]`` and the patch matrix ``[L, k*k*C]``.
    """
    N, C, H, W = xd.shape
    O, k = Kd.shape[0], Kd.shape[2]
    p = (k - 1) // 2
    Hp, Wp = H + 2 * p, W + 2 * p
    xp = np.zeros((N, Hp, Wp, C))
    xp[:, p:p + H, p:p + W, :] = xd.transpose(0, 2, 3, 1)
    flat = xp.reshape(-1)
    L = N * Hp * Wp - ((k - 1) * Wp + k - 1)
    st = flat.strides[0]
    cols = as_strided(flat, shape=(L, k, k * C), strides=(C * st, Wp * C * st, st)).reshape(L, k * k * C)
    out = np.zeros((N * Hp * Wp, O))
    out[:L] = cols @ Kd.transpose(0, 2, 3, 1).reshape(O, -1).T
    out = np.ascontiguousarray(out.reshape(N, Hp, Wp, O)[:, :H, :W].transpose(0, 3, 1, 2))
    return out, cols


def conv2d(K: Tensor, x: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' cross-correlation with zero padding ``(k - 1) / 2``.

    ``K`` is ``[outC, inC, k, k]`` with odd ``k``; ``x`` is ``[inC, H, W]`` or
    ``[N, inC, H, W]``. An optional per-output-channel bias is added.
    """
    if K.ndim != 4 or K.shape[2] != K.shape[3]:
        raise DimensionError(f"conv2d: kernel must be [outC, inC, k, k], got {K.shape}")
    k = K.shape[2]
    if k % 2 == 0:
        raise ConfigError(f"conv2d: kernel size must be odd, got {k}")
    single = x.ndim == 3
    if x.ndim not in (3, 4) or x.shape[-3] != K.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {K.shape}")
    if b is not None and b.shape != (K.shape[0],):
        raise DimensionError(f"conv2d: bias {b.shape} does not match {K.shape[0]} channels")
    xd = x.data[None] if single else x.data
    N, C, H, W = xd.shape
    outC = K.shape[0]
    p = (k - 1) // 2
    Hp, Wp = H + 2 * p, W + 2 * p
    out, cols = _conv_core(xd, K.data)
    if b is not None:
        out += b.data[:, None, None]

    def _bw(g):
        g4 = g[None] if single else g
        gp = np.zeros((N, Hp, Wp, outC))
        gp[:, :H, :W, :] = g4.transpose(0, 2, 3, 1)
        gp = gp.reshape(-1, outC)[:cols.shape[0]]
        gK = (gp.T @ cols).reshape(outC, k, k, C).transpose(0, 3, 1, 2)
        grads = [gK, None]
        if x.requires_grad:
            # adjoint of a same-padded correlation: correlate with the flipped,
            # channel-swapped kernel
            gx, _ = _conv_core(g4, K.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            grads[1] = gx[0] if single else gx
        if b is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    parents = (K, x) if b is None else (K, x, b)
    return _make(out[0] if single else out, parents, _bw, "conv2d")


def global_mean_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: ``[C, H, W] -> [C]`` or ``[N, C, H, W] -> [N, C]``."""
    if x.ndim not in (3, 4) or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise DimensionError(f"global_mean_pool: need [.., C, H, W] with H, W >= 1, got {x.shape}")
    H, W = x.shape[-2:]
    shape = x.shape
    inv = 1.0 / (H * W)
    return _make(
        x.data.mean(axis=(-2, -1)), (x,),
        lambda g: (np.broadcast_to(g[..., None, None] * inv, shape).copy(),), "global_mean_pool",
    )


def l2_normalize(x: Tensor, clamp: float = NORM_CLAMP) -> Tensor:
    """Normalize along the last axis; the norm is clamped below at ``clamp``."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    live = norm >= clamp
    n = np.maximum(norm, clamp)
    y = x.data / n

    def _bw(g):
        radial = np.where(live, (g * y).sum(axis=-1, keepdims=True), 0.0)
        return ((g - radial * y) / n,)

    return _make(y, (x,), _bw, "l2_normalize")


# --------------------------------------------------------------------------
# probabilities and losses
# --------------------------------------------------------------------------


def softmax(z: Tensor, tau: float = 1.0) -> Tensor:
    """Tempered softmax along the last axis with max-subtraction."""
    if not tau > 0:
        raise ConfigError(f"softmax temperature must be positive, got {tau}")
    s = z.data / tau
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / tau,)

    return _make(p, (z,), _bw, "softmax")


def cross_entropy(probs: Tensor, target) -> Tensor:
    """``-log(probs[target])`` with the probability clamped at 1e-12.

    With ``probs`` of shape ``[N, n]`` and ``target`` an int array of length N,
    returns the batch mean.
    """
    n = probs.shape[-1]
    t = np.asarray(target)
    if np.any(t < 0) or np.any(t >= n):
        raise IndexError(f"cross_entropy: target {target} out of range for {n} classes")
    if probs.ndim == 1:
        if t.ndim != 0:
            raise DimensionError("cross_entropy: single distribution needs a scalar target")
        return scale(log(take(probs, int(t))), -1.0)
    rows = np.arange(probs.shape[0])
    return scale(mean(log(take(probs, (rows, t)))), -1.0)


# --------------------------------------------------------------------------
# parameters and optimizer
# --------------------------------------------------------------------------


class Parameters(MutableMapping):
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, items: dict[str, Tensor] | None = None):
        self._store: dict[str, Tensor] = {}
        for name, t in (items or {}).items():
            self[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __setitem__(self, name: str, value) -> None:
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._store[name] = t

    def __delitem__(self, name: str) -> None:
        del self._store[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._store))

    def __len__(self) -> int:
        return len(self._store)

    def count(self) -> int:
        return int(np.sum([t.data.size for t in self._store.values()]))

    def zero_grad(self) -> None:
        for t in self._store.values():
            t.grad = None

    def copy(self) -> Parameters:
        return Parameters({k: Tensor(v.data.copy()) for k, v in self.items()})

    def __repr__(self) -> str:
        body = ", ".join(f"{k}: {tuple(v.shape)}" for k, v in self.items())
        return f"Parameters({body})"


class Adam:
    """Adam with bias correction over one or more ``Parameters`` collections."""

    def __init__(self, params: Parameters | Sequence[Parameters], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        groups = [params] if isinstance(params, Parameters) else list(params)
        self.tensors = [p[name] for p in groups for name in p]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for t, m, v in zip(self.tensors, self.m, self.v):
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data = t.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(opt: Adam) -> None:
    opt.step()
