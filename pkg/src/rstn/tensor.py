"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Only the operators needed by the segmentation networks are provided:
pointwise arithmetic, ``relu``/``sigmoid``, sum/mean reductions, a
size-preserving 2D convolution, 2x average pooling, 2x nearest-neighbour
upsampling, and rectangular crop/embed.  Each operation records a closure
computing the vector-Jacobian product; :meth:`Tensor.backward` replays them
in reverse topological order.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Tensor:
    """A float64 array that participates in a computation graph.

    Parameters
    ----------
    data : array_like
        Values; always copied to a contiguous float64 array.
    requires_grad : bool
        Leaf tensors with ``requires_grad=True`` are parameters; their
        ``grad`` is populated by :meth:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "node_id")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = "leaf"):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op
        self.node_id = next(_ids)

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph ----------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Back-propagate from this scalar through the graph that produced it."""
        if self.data.size != 1 or self.data.ndim not in (0, 1):
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = topological_order(self)
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None and node.requires_grad:
                node._backward(node.grad)
        # intermediates drop their gradients; only leaves keep them
        for node in order:
            if node._parents:
                node.grad = None

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, float(value)))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), _parents=tuple(parents), _op=op)
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Return every node reachable from ``root``, inputs before consumers.

    Iterative DFS so deep unrolled graphs do not hit the recursion limit.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.node_id not in seen:
                stack.append((parent, False))
    return order


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


# -- pointwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    out = _make(a.data + b.data, (a, b), "add")

    def _bw(g):
        a._accumulate(g)
        b._accumulate(g)

    out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out = _make(-a.data, (a,), "neg")
    out._backward = lambda g: a._accumulate(-g)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _make(a.data * c, (a,), "scale")
    out._backward = lambda g: a._accumulate(g * c)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    out = _make(a.data * b.data, (a, b), "mul")

    def _bw(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    out._backward = _bw
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    out = _make(a.data / b.data, (a, b), "div")

    def _bw(g):
        a._accumulate(g / b.data)
        b._accumulate(-g * a.data / (b.data * b.data))

    out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = _make(np.where(mask, a.data, 0.0), (a,), "relu")
    out._backward = lambda g: a._accumulate(g * mask)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = _make(s, (a,), "sigmoid")
    out._backward = lambda g: a._accumulate(g * s * (1.0 - s))
    return out


def elementwise(kind: str, *args: Tensor) -> Tensor:
    """Dispatch one of ``mul``, ``add``, ``relu``, ``sigmoid`` by name."""
    table = {"mul": (mul, 2), "add": (add, 2), "relu": (relu, 1), "sigmoid": (sigmoid, 1)}
    if kind not in table:
        raise ValueError(f"unknown elementwise op {kind!r}")
    fn, arity = table[kind]
    if len(args) != arity:
        raise ValueError(f"{kind} takes {arity} operand(s), got {len(args)}")
    return fn(*args)


# -- reductions -----------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    out = _make(np.array(a.data.sum()), (a,), "sum")
    out._backward = lambda g: a._accumulate(np.broadcast_to(g, a.shape))
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out = _make(np.array(a.data.sum() / n), (a,), "mean")
    out._backward = lambda g: a._accumulate(np.broadcast_to(g / n, a.shape))
    return out


# -- convolution ----------------------------------------------------------

def _conv_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' cross-correlation. x: (N,C,H,W), w: (O,C,k,k)."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    if k == 1:
        return np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x, optimize=True), None
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N,C,H,W,k,k)
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * h * wd)
    out = w.reshape(o, c * k * k) @ cols
    return out.reshape(o, n, h, wd).transpose(1, 0, 2, 3), cols


def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return _conv_forward(x, w)[0]


def conv2d_array(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Graph-free forward of :func:`conv2d_same` on plain arrays (inference path)."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    out = _conv(x, w)
    if b is not None:
        out = out + b[None, :, None, None]
    return out[0] if squeeze else out


def conv2d_same(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Size-preserving 2D convolution with zero padding of width ``(k-1)/2``.

    ``x`` is ``(Cin, H, W)`` or batched ``(N, Cin, H, W)``; ``w`` is
    ``(Cout, Cin, k, k)`` with odd ``k``; ``b`` is ``(Cout,)``.
    """
    if w.data.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d_same: kernel must be (Cout,Cin,k,k) with odd k, got {w.shape}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d_same: input channels {x.shape} do not match kernel {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d_same: bias shape {b.shape} does not match Cout={w.shape[0]}")
    k = w.shape[2]
    n, c, h, wd = xd.shape
    o = w.shape[0]
    out, cols = _conv_forward(xd, w.data)
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    result = _make(out[0] if squeeze else out, parents, "conv2d")

    def _bw(g):
        g4 = g[None] if squeeze else g
        if b is not None and b.requires_grad:
            b._accumulate(g4.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gm = g4.transpose(1, 0, 2, 3).reshape(o, n * h * wd)
            if cols is None:
                gw = np.einsum("on,cn->oc", gm, xd.transpose(1, 0, 2, 3).reshape(c, -1), optimize=True)
                w._accumulate(gw.reshape(w.shape))
            else:
                w._accumulate((gm @ cols.T).reshape(w.shape))
        if x.requires_grad:
            # adjoint of 'same' correlation is 'same' correlation with the flipped, transposed kernel
            wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _conv(g4, wt)
            x._accumulate(gx[0] if squeeze else gx)

    result._backward = _bw
    return result


# -- resampling -----------------------------------------------------------

def _pool_pad(h: int) -> int:
    return h % 2


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling over the last two axes; odd extents are edge-replicated to even."""
    d = x.data
    h, w = d.shape[-2:]
    ph, pw = _pool_pad(h), _pool_pad(w)
    pad = [(0, 0)] * (d.ndim - 2) + [(0, ph), (0, pw)]
    dp = np.pad(d, pad, mode="edge") if (ph or pw) else d
    H2, W2 = dp.shape[-2] // 2, dp.shape[-1] // 2
    v = dp.reshape(dp.shape[:-2] + (H2, 2, W2, 2))
    out = _make(v.mean(axis=(-3, -1)), (x,), "avgpool2")

    def _bw(g):
        gu = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        if ph:
            gu[..., h - 1, :] += gu[..., h, :]
            gu = gu[..., :h, :]
        if pw:
            gu[..., :, w - 1] += gu[..., :, w]
            gu = gu[..., :, :w]
        x._accumulate(gu)

    out._backward = _bw
    return out


def upsample2(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour 2x upsampling, cropped to ``size`` (the pre-pooling extent)."""
    d = x.data
    h, w = size
    if not (2 * d.shape[-2] >= h > 2 * d.shape[-2] - 2 and 2 * d.shape[-1] >= w > 2 * d.shape[-1] - 2):
        raise ShapeError(f"upsample2: cannot map {d.shape[-2:]} to {size}")
    up = np.repeat(np.repeat(d, 2, axis=-2), 2, axis=-1)[..., :h, :w]
    out = _make(up, (x,), "upsample2")
    H2, W2 = d.shape[-2:]

    def _bw(g):
        pad = [(0, 0)] * (g.ndim - 2) + [(0, 2 * H2 - h), (0, 2 * W2 - w)]
        gp = np.pad(g, pad)
        x._accumulate(gp.reshape(g.shape[:-2] + (H2, 2, W2, 2)).sum(axis=(-3, -1)))

    out._backward = _bw
    return out


# -- rectangular windows --------------------------------------------------

def crop2d(x: Tensor, r0: int, c0: int, r1: int, c1: int) -> Tensor:
    """Inclusive crop ``[r0..r1] x [c0..c1]`` of the last two axes."""
    h, w = x.shape[-2:]
    if not (0 <= r0 <= r1 < h and 0 <= c0 <= c1 < w):
        raise ShapeError(f"crop2d: box {(r0, c0, r1, c1)} outside extent {(h, w)}")
    out = _make(x.data[..., r0:r1 + 1, c0:c1 + 1].copy(), (x,), "crop2d")

    def _bw(g):
        gx = np.zeros(x.shape)
        gx[..., r0:r1 + 1, c0:c1 + 1] = g
        x._accumulate(gx)

    out._backward = _bw
    return out


def embed2d(x: Tensor, size: tuple[int, int], r0: int, c0: int) -> Tensor:
    """Place ``x`` into a zero canvas of spatial ``size`` with its corner at (r0, c0)."""
    h, w = x.shape[-2:]
    H, W = size
    if r0 < 0 or c0 < 0 or r0 + h > H or c0 + w > W:
        raise ShapeError(f"embed2d: {x.shape[-2:]} at {(r0, c0)} does not fit {size}")
    canvas = np.zeros(x.shape[:-2] + (H, W))
    canvas[..., r0:r0 + h, c0:c0 + w] = x.data
    out = _make(canvas, (x,), "embed2d")
    out._backward = lambda g: x._accumulate(g[..., r0:r0 + h, c0:c0 + w])
    return out


# -- gradient oracle ------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int = 0
    worst: tuple | None = None

    def __float__(self) -> float:
        return self.max_rel_error


def check_gradients(
    loss_fn: Callable[[], Tensor],
    parameters: Iterable[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar.  Only tensors with ``requires_grad`` are checked; at
    most ``max_coords`` randomly sampled coordinates per tensor.  The error
    for one coordinate is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.

    Central differences on an O(1) loss carry roughly ``eps/step`` ~ 1e-11
    of rounding noise, so gradients far below ``floor`` are compared in
    absolute terms instead of amplifying that noise into a huge ratio.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = [p for p in parameters if p.requires_grad]
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise ValueError("check_gradients: parameters must be finite")
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn().item()
            flat[i] = orig - step
            fm = loss_fn().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                skipped += 1
                logger.warning("non-finite loss at perturbed coordinate %d of parameter %d", i, pi)
                continue
            numeric = (fp - fm) / (2 * step)
            a = analytic[pi].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if err > worst:
                worst, worst_at = err, (pi, int(i), float(a), float(numeric))
    return GradCheckResult(worst, checked, skipped, worst_at)


# -- optimizer ------------------------------------------------------------

@dataclass
class SGD:
    """SGD with classical momentum: ``v <- m*v - lr*g``; ``p <- p + v``.

    With ``clip_norm`` set, the gradients passed to one :meth:`step` call
    are rescaled together so their L2 norm does not exceed it; call
    :meth:`step` once per parameter group to clip groups independently.
    Velocity buffers are keyed by tensor identity.
    """

    lr: float = 1e-4
    momentum: float = 0.9
    clip_norm: float | None = None
    velocity: dict[int, np.ndarray] = field(default_factory=dict)
    rejected: int = 0
    last_norm: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def step(self, params: Sequence[Tensor]) -> None:
        usable = []
        for p in params:
            if p.grad is None:
                continue
            if p.grad.shape != p.shape:
                raise ShapeError(f"gradient shape {p.grad.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(p.grad)):
                self.rejected += 1
                logger.warning("non-finite gradient on %r; update skipped", p)
                continue
            usable.append(p)
        self.last_norm = float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in usable)))
        factor = 1.0
        if self.clip_norm is not None and self.last_norm > self.clip_norm:
            factor = self.clip_norm / self.last_norm
        for p in usable:
            v = self.velocity.get(id(p))
            if v is None:
                v = self.velocity[id(p)] = np.zeros(p.shape)
            v *= self.momentum
            v -= self.lr * (p.grad * factor)
            p.data += v

    def zero_grad(self, params: Sequence[Tensor]) -> None:
        for p in params:
            p.grad = None


def sgd_step(params: Sequence[Tensor], state: SGD) -> SGD:
    """Apply one momentum update in place and return the (mutated) state."""
    state.step(params)
    return state
