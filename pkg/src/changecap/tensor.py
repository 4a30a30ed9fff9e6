"""Dense float64 tensors with reverse-mode automatic differentiation.

Small by design: every array is a row-major numpy float64 buffer, every
operation records its parents plus a vector-Jacobian-product closure, and
``backward`` walks the recorded graph in exact reverse topological order.
Determinism is a contract here — identical seeds and inputs give bitwise
identical outputs, and the backward traversal order is fixed, so gradients
are bitwise reproducible as well.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .rng import SplitMix64, normals


class ShapeError(ValueError):
    """Raised when shapes are invalid or incompatible for an operation."""


class InvalidTargetError(ValueError):
    """Raised when a classification target id lies outside [0, V)."""


class EmptyLossError(ValueError):
    """Raised when a loss would average over zero positions."""


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Tensors produced by operations keep references to their inputs and a
    backward rule; leaf tensors (parameters, data) have neither. ``grad``
    accumulates additively across ``backward`` calls until reset to None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"


def make_op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap an op result into the graph.

    ``vjp(grad_out)`` must return one gradient array (or None) per parent,
    each shaped like the parent. Modules outside this file use this hook to
    define their own differentiable primitives.
    """
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# construction

def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if len(dims) == 0:
        raise ShapeError("shape must have at least one dimension")
    for d in dims:
        if d < 1:
            raise ShapeError(f"all dimensions must be >= 1, got {list(dims)}")
    return dims


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape)), requires_grad)


def constant(shape: Sequence[int], value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_check_shape(shape), float(value)), requires_grad)


def seeded_normal(shape: Sequence[int], sigma: float, seed: int, requires_grad: bool = False) -> Tensor:
    """N(0, sigma^2) fill from the SplitMix64/Box-Muller stream for ``seed``.

    Bitwise deterministic in (seed, shape, sigma).
    """
    dims = _check_shape(shape)
    n = int(np.prod(dims))
    data = normals(n, SplitMix64(seed)) * float(sigma)
    return Tensor(data.reshape(dims), requires_grad)


# ---------------------------------------------------------------------------
# elementwise

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(x: Tensor, y: Tensor) -> Tensor:
    try:
        data = x.data + y.data
    except ValueError as exc:
        raise ShapeError(f"add: shapes {x.shape} and {y.shape} do not broadcast") from exc
    xs, ys = x.shape, y.shape

    def vjp(g):
        return _unbroadcast(g, xs), _unbroadcast(g, ys)

    return make_op(data, (x, y), vjp)


def mul(x: Tensor, y: Tensor) -> Tensor:
    try:
        data = x.data * y.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {x.shape} and {y.shape} do not broadcast") from exc
    xd, yd = x.data, y.data

    def vjp(g):
        return _unbroadcast(g * yd, xd.shape), _unbroadcast(g * xd, yd.shape)

    return make_op(data, (x, y), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is defined as 0
    return make_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    xd = x.data
    u = _GELU_K * (xd + _GELU_A * xd**3)
    t = np.tanh(u)
    data = 0.5 * xd * (1.0 + t)

    def vjp(g):
        du = _GELU_K * (1.0 + 3.0 * _GELU_A * xd**2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * du
        return (g * d,)

    return make_op(data, (x,), vjp)


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries as a shape-[1] scalar tensor."""
    data = np.array([x.data.sum()])
    xs = x.shape
    return make_op(data, (x,), lambda g: (np.full(xs, g.reshape(-1)[0]),))


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    dims = _check_shape(shape)
    if int(np.prod(dims)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {list(dims)}")
    xs = x.shape
    return make_op(x.data.reshape(dims), (x,), lambda g: (g.reshape(xs),))


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2d needs a 2-d tensor, got shape {x.shape}")
    return make_op(np.ascontiguousarray(x.data.T), (x,), lambda g: (np.ascontiguousarray(g.T),))


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from exc
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return make_op(data, parts, vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    xs = x.shape

    def vjp(g):
        full = np.zeros(xs)
        full[index] = g
        return (full,)

    return make_op(np.ascontiguousarray(x.data[index]), (x,), vjp)


def take_rows(x: Tensor, rows: Sequence[int]) -> Tensor:
    """Gather rows of a 2-d tensor; backward scatter-adds (rows may repeat)."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-d tensor, got shape {x.shape}")
    idx = np.asarray(rows, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take_rows needs a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {x.shape[0]} rows")
    xs = x.shape

    def vjp(g):
        full = np.zeros(xs)
        np.add.at(full, idx, g)
        return (full,)

    return make_op(x.data[idx].copy(), (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return make_op(ad @ bd, (a, b), vjp)


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of x[C_in,H,W] with w[C_out,C_in,k,k] plus bias.

    Output spatial dims are H' = H + 2*padding - k + 1 (same for W').
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be [C,H,W], got {x.shape}")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d kernel must be [C_out,C_in,k,k], got {w.shape}")
    c_out, c_in, k, _ = w.shape
    if k % 2 != 1:
        raise ShapeError(f"conv2d kernel size must be odd, got {k}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, kernel expects {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d bias must be [{c_out}], got {b.shape}")
    if padding < 0:
        raise ShapeError("conv2d padding must be >= 0")
    _, h, wd = x.shape
    h_out = h + 2 * padding - k + 1
    w_out = wd + 2 * padding - k + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: output dims {h_out}x{w_out} not positive")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # windows[c, i, j, di, dj] = xp[c, i+di, j+dj]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    data = np.einsum("cijkl,ockl->oij", windows, w.data, optimize=True) + b.data[:, None, None]

    wd_data = w.data

    def vjp(g):
        gw = np.einsum("cijkl,oij->ockl", windows, g, optimize=True)
        gb = g.sum(axis=(1, 2))
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                # w[:, :, di, dj] is [C_out, C_in]; contract over C_out
                gxp[:, di : di + h_out, dj : dj + w_out] += np.tensordot(
                    wd_data[:, :, di, dj], g, axes=([0], [0])
                )
        gx = gxp[:, padding : padding + h, padding : padding + wd] if padding else gxp
        return np.ascontiguousarray(gx), gw, gb

    return make_op(data, (x, w, b), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each slice along the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be [{d}], got {gain.shape} and {bias.shape}")
    if eps <= 0:
        raise ShapeError("layer_norm eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    gd = gain.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        dxhat = g * gd
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias

    return make_op(data, (x, gain, bias), vjp)


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention with a causal mask.

    Position t attends to positions <= t only; attention rows sum to 1.
    """
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 2:
        raise ShapeError(f"causal_attention needs equal [T,d] shapes, got {q.shape}, {k.shape}, {v.shape}")
    t, dh = q.shape
    inv_sqrt = 1.0 / math.sqrt(dh)
    logits = (q.data @ k.data.T) * inv_sqrt
    visible = np.tril(np.ones((t, t), dtype=bool))
    logits = np.where(visible, logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=1, keepdims=True)
    data = attn @ v.data
    qd, kd, vd = q.data, k.data, v.data

    def vjp(g):
        gv = attn.T @ g
        g_attn = g @ vd.T
        g_logits = attn * (g_attn - (g_attn * attn).sum(axis=1, keepdims=True))
        gq = (g_logits @ kd) * inv_sqrt
        gk = (g_logits.T @ qd) * inv_sqrt
        return gq, gk, gv

    return make_op(data, (q, k, v), vjp)


IGNORE_INDEX = -100


def cross_entropy(logits: Tensor, targets: Sequence[int], ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-softmax over positions whose target is not ignored."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy logits must be [T,V], got {logits.shape}")
    t, v = logits.shape
    ids = np.asarray(list(targets), dtype=np.int64)
    if ids.shape != (t,):
        raise ShapeError(f"cross_entropy: {t} positions but {ids.size} targets")
    live = ids != ignore_index
    if not live.any():
        raise EmptyLossError("cross_entropy: every position is ignored")
    bad = live & ((ids < 0) | (ids >= v))
    if bad.any():
        raise InvalidTargetError(f"cross_entropy: target {int(ids[bad][0])} outside [0, {v})")

    rows = logits.data[live]
    picked = ids[live]
    m = rows.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(rows - m).sum(axis=1))
    losses = lse - rows[np.arange(rows.shape[0]), picked]
    n_live = int(live.sum())
    data = np.array([losses.sum() / n_live])

    def vjp(g):
        soft = np.exp(rows - m)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(rows.shape[0]), picked] -= 1.0
        full = np.zeros((t, v))
        full[live] = soft * (g.reshape(-1)[0] / n_live)
        return (full,)

    return make_op(data, (logits,), vjp)


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dTensor into ``grad`` for every requires_grad tensor
    reachable from ``loss``. Repeated calls accumulate additively."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flows:
                flows[key] = flows[key] + pg
            else:
                flows[key] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# gradient verification oracle

def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    max_coords_per_param: int | None = None,
    seed: int = 0,
    coord_sets: Sequence[Sequence[int] | None] | None = None,
) -> float:
    """Compare backward() against central finite differences of ``f``.

    ``f`` must be deterministic, scalar-valued and recompute from the current
    ``data`` of ``params``. Returns the max over checked coordinates of
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

    By default every coordinate is probed; ``max_coords_per_param`` samples a
    seeded subset instead, and ``coord_sets`` (aligned with ``params``, None
    entries fall back to the default) restricts a parameter to explicitly
    listed flat coordinates — e.g. to skip structurally uninvolved ones.
    """
    params = list(params)
    zero_grads(params)
    backward(f())
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for pi, (p, grad) in enumerate(zip(params, analytic)):
        n = p.data.size
        explicit = coord_sets[pi] if coord_sets is not None else None
        pool = list(explicit) if explicit is not None else list(range(n))
        if max_coords_per_param is not None and len(pool) > max_coords_per_param:
            rng = SplitMix64((seed << 8) + pi)
            chosen: list[int] = []
            taken = set()
            while len(chosen) < max_coords_per_param:
                c = rng.next_below(len(pool))
                if c not in taken:
                    taken.add(c)
                    chosen.append(pool[c])
            coords = chosen
        else:
            coords = pool
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = f().item()
            flat[c] = orig - h
            f_minus = f().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = gflat[c]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > worst:
                worst = rel
    return worst
