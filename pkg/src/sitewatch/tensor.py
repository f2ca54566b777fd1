"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations record themselves on the active :class:`GradientTape` (entered
with ``with GradientTape() as tape:``) whenever at least one input is a
trainable parameter or the output of an earlier recorded operation.
Outside a tape every op is a plain numpy computation.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "GradientTape",
    "conv2d",
    "activation",
    "relu",
    "sigmoid",
    "pool_or_resample",
    "maxpool2",
    "upsample_nearest2",
    "global_avg",
    "add",
    "mul",
    "sum_all",
    "reshape",
    "transpose",
    "concat",
    "custom_op",
    "backward",
    "finite_diff_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """Float64 array plus the bookkeeping needed to differentiate through it.

    ``name`` and ``requires_grad`` mark a trainable leaf (a model parameter).
    Parameters are the only tensors whose ``data`` is ever replaced in place
    (by the optimizer); every op produces a fresh array.
    """

    __slots__ = ("data", "name", "requires_grad", "_node")

    def __init__(self, data, name: Optional[str] = None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.name = name
        self.requires_grad = requires_grad
        self._node: Optional[tuple[int, int]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


@dataclass
class _Node:
    op: str
    parents: tuple[Tensor, ...]
    vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    shape: tuple[int, ...]
    attrs: dict = field(default_factory=dict)


_local = threading.local()
_tape_ids = iter(range(1, 1 << 62))


def _active_tape() -> Optional["GradientTape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradientTape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is a topological order, so
    walking them in reverse visits each node after every consumer of it.
    A tape belongs to the thread that created it.
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: list[_Node] = []
        self._leaves: dict[int, int] = {}
        self._leaf_tensors: list[Tensor] = []

    def __enter__(self) -> "GradientTape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def index_of(self, t: Tensor) -> Optional[int]:
        if t._node is not None and t._node[0] == self.id:
            return t._node[1]
        if t.requires_grad:
            idx = self._leaves.get(id(t))
            if idx is None:
                idx = len(self.nodes)
                self.nodes.append(_Node("leaf", (), None, t.shape))
                self._leaves[id(t)] = idx
                self._leaf_tensors.append(t)
            return idx
        return None

    def tracked(self, t: Tensor) -> bool:
        return t.requires_grad or (t._node is not None and t._node[0] == self.id)

    def record(self, out: Tensor, parents: Sequence[Tensor], vjp, op: str, **attrs) -> None:
        for p in parents:
            self.index_of(p)
        out._node = (self.id, len(self.nodes))
        self.nodes.append(_Node(op, tuple(parents), vjp, out.shape, attrs))

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaf_tensors)


def custom_op(out_data: np.ndarray, parents: Sequence[Tensor], vjp, op: str, **attrs) -> Tensor:
    """Wrap ``out_data`` as a Tensor and register it on the active tape.

    ``vjp(g)`` maps the upstream gradient to one gradient (or None) per parent.
    """
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(tape.tracked(p) for p in parents):
        tape.record(out, parents, vjp, op, **attrs)
    return out


# ---------------------------------------------------------------------------
# convolution

def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix with rows (n, y, x) and columns ordered (i, j, c)."""
    n, c = x.shape[:2]
    xh = x.transpose(0, 2, 3, 1)
    if pad:
        xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xh[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    d = dcols.reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += d[:, :, :, i, j, :]
    return dxp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ci} (kernel {kernel.shape})")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output extent {ho}x{wo} from input {h}x{w}, kernel {kh}x{kw}")

    cols = _im2col(x.data, kh, kw, stride, pad, ho, wo)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (gmat.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        db = gmat.sum(axis=0)
        dx = _col2im(gmat @ wmat, x.shape, kh, kw, stride, pad, ho, wo)
        return dx, dw, db

    return custom_op(np.ascontiguousarray(out), (x, kernel, bias), vjp, "conv2d", stride=stride, pad=pad)


# ---------------------------------------------------------------------------
# elementwise

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return custom_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)
    return custom_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return custom_op(np.array([x.data.sum()]), (x,), lambda g: (np.full(shape, g[0]),), "sum")


# ---------------------------------------------------------------------------
# pooling / resampling

def maxpool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h < 2 or w < 2 or h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def vjp(g):
        d = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(d, idx, g[..., None], axis=-1)
        return (d.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return custom_op(out, (x,), vjp, "maxpool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return custom_op(out, (x,), vjp, "upsample_nearest2")


def global_avg(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return custom_op(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),), "global_avg")


def pool_or_resample(x: Tensor, kind: str) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"{kind} expects NCHW input, got shape {x.shape}")
    if kind == "maxpool2":
        return maxpool2(x)
    if kind == "upsample_nearest2":
        return upsample_nearest2(x)
    if kind == "global_avg":
        return global_avg(x)
    raise ValueError(f"unknown pooling kind {kind!r}")


# ---------------------------------------------------------------------------
# layout

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {old} -> {tuple(shape)}: {exc}") from None
    return custom_op(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                     lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(xs)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(np.concatenate([t.data for t in xs], axis=axis), xs, vjp, "concat")


# ---------------------------------------------------------------------------
# differentiation

def backward(tape: GradientTape, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> dict[str, Tensor]:
    """Gradients of a scalar ``loss`` with respect to named parameters.

    Every parameter the tape has seen, plus any passed in ``params``, gets an
    entry; parameters with no path to the loss get zeros. The tape itself is
    left untouched, so replaying it gives identical results.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None or loss._node[0] != tape.id:
        raise ValueError("loss was not produced on this tape")

    root = loss._node[1]
    pending: dict[int, np.ndarray] = {root: np.ones(loss.shape)}
    leaf_grads: dict[int, np.ndarray] = {}
    for idx in range(root, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.vjp is None:
            leaf_grads[idx] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not tape.tracked(parent):
                continue
            pidx = tape.index_of(parent)
            prev = pending.get(pidx)
            pending[pidx] = pg if prev is None else prev + pg

    out: dict[str, Tensor] = {}
    wanted = list(tape.leaves)
    if params is not None:
        seen = {id(t) for t in wanted}
        wanted.extend(t for t in params if id(t) not in seen)
    for i, t in enumerate(wanted):
        key = t.name if t.name is not None else f"param{i}"
        idx = tape._leaves.get(id(t))
        g = leaf_grads.get(idx) if idx is not None else None
        out[key] = Tensor(np.zeros(t.shape) if g is None else g.reshape(t.shape))
    return out


@dataclass
class GradCheckReport:
    """Outcome of a central-difference gradient comparison.

    ``per_param`` holds, per named tensor, ``|a-b| / max(|a|, |b|, 1e-12)``
    with the norms taken over the checked entries of that tensor.
    """

    per_param: dict[str, float]
    per_param_elementwise: dict[str, float]
    checked: int
    excluded: int

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)


def finite_diff_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
    kink_tol: float = 1e-3,
) -> GradCheckReport:
    """Compare ``backward`` against central differences ``(f(p+h)-f(p-h))/2h``.

    Entries where the one-sided slopes disagree by more than ``kink_tol``
    (relative) straddle a non-differentiable point such as relu at 0 and are
    excluded. ``max_entries`` caps the entries sampled per parameter.
    """
    with GradientTape() as tape:
        loss = fn(params)
    grads = backward(tape, loss, params.values())
    f0 = fn(params).item()

    rng = np.random.default_rng(seed)
    per_param, per_elem = {}, {}
    checked = excluded = 0
    for key, p in params.items():
        name = p.name if p.name is not None else key
        analytic = grads[name].data.reshape(-1)
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a_vals, n_vals = [], []
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(params).item()
            flat[i] = orig - h
            fm = fn(params).item()
            flat[i] = orig
            fwd, bwd = (fp - f0) / h, (f0 - fm) / h
            if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1e-6):
                excluded += 1
                continue
            a_vals.append(analytic[i])
            n_vals.append((fp - fm) / (2 * h))
        checked += len(a_vals)
        a, b = np.array(a_vals), np.array(n_vals)
        if a.size == 0:
            per_param[name] = per_elem[name] = 0.0
            continue
        denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
        per_param[name] = float(np.linalg.norm(a - b) / denom)
        per_elem[name] = float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)))
    return GradCheckReport(per_param, per_elem, checked, excluded)
