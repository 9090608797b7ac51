"""Dense tensors with a reverse-mode differentiation tape.

Values are plain numpy arrays (rank <= 4). A :class:`Var` wraps a value and,
when it was produced under a :class:`Tape`, the id of the node that recorded
it. Operations on operands that carry no tape are evaluated eagerly and
produce constants, so the same model code runs with or without recording.

Broadcasting is deliberately limited to scalar-vs-tensor and equal shapes;
anything else goes through :func:`expand`, whose backward rule sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tape",
    "Var",
    "as_var",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "log",
    "exp",
    "relu",
    "sigmoid",
    "softplus",
    "sqrt",
    "elementwise",
    "reduce",
    "sum",
    "mean",
    "reshape",
    "expand",
    "standardize",
    "channel_affine",
    "transpose",
    "slice_axis",
    "concat",
    "conv2d",
    "resize_bilinear",
    "sort_desc_detached",
    "sort_rows_desc_detached",
    "backward",
    "grad_check",
    "ShapeError",
]

MAX_RANK = 4


class ShapeError(ValueError):
    pass


class Var:
    """A value, optionally tied to a node on a tape."""

    __slots__ = ("value", "tape", "node")
    __array_priority__ = 100

    def __init__(self, value, tape: Tape | None = None, node: int | None = None):
        value = np.asarray(value, dtype=np.float64) if not isinstance(value, np.ndarray) else value
        if value.ndim > MAX_RANK:
            raise ShapeError(f"rank {value.ndim} exceeds {MAX_RANK}")
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def detach(self) -> Var:
        return Var(self.value)

    def __repr__(self):
        where = f"node={self.node}" if self.node is not None else "const"
        return f"Var(shape={self.shape}, {where})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731


@dataclass
class _Node:
    parents: tuple[int | None, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]
    param: bool = False


@dataclass
class Tape:
    """Ordered record of operations. Confined to one thread."""

    nodes: list[_Node] = field(default_factory=list)

    def variable(self, value, param: bool = True) -> Var:
        """Register a leaf. Only leaves marked ``param`` receive gradients."""
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node((), None, value.shape, param))
        return Var(value, self, len(self.nodes) - 1)

    def record(self, value: np.ndarray, parents: Sequence[Var], rule) -> Var:
        ids = tuple(p.node if p.tape is self else None for p in parents)
        self.nodes.append(_Node(ids, rule, value.shape))
        return Var(value, self, len(self.nodes) - 1)

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        return backward(loss)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def _tape_of(*vs: Var) -> Tape | None:
    tape = None
    for v in vs:
        if v.tape is None:
            continue
        if tape is None:
            tape = v.tape
        elif v.tape is not tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _make(value: np.ndarray, parents: Sequence[Var], rule) -> Var:
    tape = _tape_of(*parents)
    if tape is None:
        return Var(value)
    return tape.record(value, parents, rule)


def custom_op(value, parents: Sequence, rule) -> Var:
    """Record a fused op: ``rule(g)`` returns one gradient (or None) per parent."""
    return _make(np.asarray(value, dtype=np.float64), [as_var(p) for p in parents], rule)


# ---------------------------------------------------------------- elementwise


def _check_pair(a: Var, b: Var, name: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary(a, b, name, fwd, da, db) -> Var:
    a, b = as_var(a), as_var(b)
    _check_pair(a, b, name)
    av, bv = a.value, b.value
    out = fwd(av, bv)

    def rule(g):
        return (_unbroadcast(da(g, av, bv, out), av.shape),
                _unbroadcast(db(g, av, bv, out), bv.shape))

    return _make(out, (a, b), rule)


def add(a, b) -> Var:
    return _binary(a, b, "add", np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Var:
    return _binary(a, b, "sub", np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Var:
    return _binary(a, b, "mul", np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Var:
    return _binary(a, b, "div", np.divide,
                   lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * o / y)


def _unary(a, fwd, dfn) -> Var:
    a = as_var(a)
    av = a.value
    out = fwd(av)
    return _make(out, (a,), lambda g: (dfn(g, av, out),))


def neg(a) -> Var:
    return _unary(a, np.negative, lambda g, x, o: -g)


def log(a) -> Var:
    return _unary(a, np.log, lambda g, x, o: g / x)


def exp(a) -> Var:
    return _unary(a, np.exp, lambda g, x, o: g * o)


def relu(a) -> Var:
    # subgradient at 0 is 0
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, o: g * (x > 0))


def sigmoid(a) -> Var:
    return _unary(a, expit, lambda g, x, o: g * o * (1.0 - o))


def softplus(a) -> Var:
    """log(1 + e^x) evaluated without overflow."""
    return _unary(a, lambda x: np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))),
                  lambda g, x, o: g * expit(x))


def sqrt(a) -> Var:
    return _unary(a, np.sqrt, lambda g, x, o: g * 0.5 / o)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "neg": neg, "log": log, "exp": exp, "relu": relu, "sigmoid": sigmoid,
    "softplus": softplus, "sqrt": sqrt,
}


def elementwise(op: str, a, b=None) -> Var:
    """Dispatch by name; binary ops require ``b``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


# ----------------------------------------------------------------- reductions


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op: str, a, axes=None, keep: bool = False) -> Var:
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    a = as_var(a)
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.value.sum(axis=axes, keepdims=keep)
    if op == "mean":
        out = out / count
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    shape = a.shape

    def rule(g):
        g = np.broadcast_to(g.reshape(kept), shape)
        return (g / count if op == "mean" else g.copy(),)

    return _make(np.asarray(out), (a,), rule)


def sum(a, axes=None, keep: bool = False) -> Var:  # noqa: A001
    return reduce("sum", a, axes, keep)


def mean(a, axes=None, keep: bool = False) -> Var:
    return reduce("mean", a, axes, keep)


# ------------------------------------------------------------------ structure


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    out = a.value.reshape(shape)
    if out.ndim > MAX_RANK:
        raise ShapeError(f"rank {out.ndim} exceeds {MAX_RANK}")
    return _make(out, (a,), lambda g: (g.reshape(old),))


def expand(a, shape) -> Var:
    """Broadcast size-1 axes of ``a`` up to ``shape`` (same rank required)."""
    a = as_var(a)
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    out = np.broadcast_to(a.value, shape)
    return _make(out, (a,), lambda g: (g.sum(axis=axes, keepdims=True),))


def transpose(a, axes) -> Var:
    a = as_var(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.value.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def slice_axis(a, axis: int, start: int, stop: int) -> Var:
    a = as_var(a)
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(a.value[idx], (a,), rule)


def concat(parts: Sequence, axis: int) -> Var:
    parts = [as_var(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ------------------------------------------------------------- normalization


def standardize(a, axes, eps: float) -> tuple[Var, np.ndarray, np.ndarray]:
    """(a - mean) / sqrt(var + eps) over ``axes`` with biased variance.

    Returns the standardized Var plus the (kept-dims) mean and variance values.
    """
    a = as_var(a)
    axes = _norm_axes(axes, a.ndim)
    mu = a.value.mean(axis=axes, keepdims=True)
    xc = a.value - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def rule(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * out).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _make(out, (a,), rule), mu, var


def channel_affine(x, scale, shift) -> Var:
    """x * scale[c] + shift[c] for an NCHW ``x`` and rank-1 ``scale``/``shift``."""
    x, scale, shift = as_var(x), as_var(scale), as_var(shift)
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"channel_affine: {x.shape} with scale {scale.shape}, shift {shift.shape}")
    sv = scale.value.reshape(1, c, 1, 1)
    xv = x.value
    out = xv * sv + shift.value.reshape(1, c, 1, 1)

    def rule(g):
        return g * sv, (g * xv).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(out, (x, scale, shift), rule)


# -------------------------------------------------------------- convolution


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Var:
    """Cross-correlation of an NCHW input with a (Cout, Cin, kh, kw) kernel."""
    x, weight = as_var(x), as_var(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 operands, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if kh == kw == 1 and stride == 1 and padding == 0:
        return _pointwise_conv(x, weight, bias)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output size degenerate for input {x.shape}, kernel {weight.shape}")

    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.value
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride,
                                                          : (wo - 1) * stride + 1 : stride]
    # one contiguous im2col matrix, rows (n, i, j), columns (cin, di, dj), reused by backward
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wm = weight.value.reshape(cout, cin * kh * kw)
    out = (cols @ wm.T).reshape(n, ho, wo, cout)
    parents = [x, weight]
    if bias is not None:
        bias = as_var(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
        out = out + bias.value
        parents.append(bias)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    xshape, pshape = x.shape, xp.shape

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ wm).reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros(pshape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                    j : j + stride * (wo - 1) + 1 : stride] += gcols[..., i, j]
        gx = gxp[:, :, padding : padding + xshape[2], padding : padding + xshape[3]] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make(out, parents, rule)


def _pointwise_conv(x: Var, weight: Var, bias: Var | None) -> Var:
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    wm = weight.value.reshape(cout, cin)
    xv = x.value
    out = np.matmul(wm, xv.reshape(n, cin, h * w)).reshape(n, cout, h, w)
    parents = [x, weight]
    if bias is not None:
        bias = as_var(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
        out = out + bias.value.reshape(1, cout, 1, 1)
        parents.append(bias)

    def rule(g):
        g3 = g.reshape(n, cout, h * w)
        gx = np.matmul(wm.T, g3).reshape(x.shape)
        gw = np.tensordot(g3, xv.reshape(n, cin, h * w), axes=([0, 2], [0, 2])).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return grads

    return _make(out, parents, rule)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel centres, edge-clamped (align_corners=False convention)
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(x, size: tuple[int, int]) -> Var:
    x = as_var(x)
    n, c, h, w = x.shape
    ah = _interp_matrix(size[0], h)
    aw = _interp_matrix(size[1], w)
    out = np.einsum("ih,nchw,jw->ncij", ah, x.value, aw, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", ah, g, aw, optimize=True),))


# ---------------------------------------------------------------------- sort


def stable_desc_order(values: np.ndarray) -> np.ndarray:
    """Indices sorting a rank-1 array in decreasing order, ties by index."""
    values = np.asarray(values)
    order = np.argsort(-values, kind="quicksort")
    ranked = values[order]
    if ranked.size > 1 and np.any(ranked[1:] == ranked[:-1]):
        run = np.concatenate(([0], np.cumsum(ranked[1:] != ranked[:-1])))
        order = order[np.argsort(run * values.size + order)]
    return order


def sort_rows_desc_detached(m) -> tuple[Var, np.ndarray]:
    """Sort each row of a rank-2 value in decreasing order.

    The permutation is a constant of the backward pass: gradients flow to the
    gathered entries, never through the ordering decision. Ties keep their
    original index order.
    """
    m = as_var(m)
    if m.ndim != 2:
        raise ShapeError(f"expected rank-2 input, got {m.shape}")
    perm = np.stack([stable_desc_order(row) for row in m.value]) if m.shape[0] else np.zeros(m.shape, int)
    out = np.take_along_axis(m.value, perm, axis=1)

    def rule(g):
        full = np.empty_like(g)
        np.put_along_axis(full, perm, g, axis=1)
        return (full,)

    return _make(out, (m,), rule), perm


def sort_desc_detached(m) -> tuple[Var, np.ndarray]:
    """Rank-1 version of :func:`sort_rows_desc_detached` (0-based permutation)."""
    m = as_var(m)
    if m.ndim != 1:
        raise ShapeError(f"expected rank-1 input, got {m.shape}")
    rows, perm = sort_rows_desc_detached(reshape(m, (1, m.shape[0])))
    return reshape(rows, (m.shape[0],)), perm[0]


# ------------------------------------------------------------------ backward


def backward(loss: Var) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf marked as a parameter."""
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or not tape.nodes:
        raise ValueError("loss is not recorded on a tape")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    out: dict[int, np.ndarray] = {}
    for nid in range(loss.node, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward is None:
            if node.param:
                out[nid] = g
            continue
        for pid, pg in zip(node.parents, node.backward(g)):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.asarray(pg, dtype=np.float64)
    return out


def grad_check(f: Callable[[Var], Var], x, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a Var to a scalar Var and must also accept constant Vars.
    The relative error per entry is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    xv = tape.variable(x)
    y = f(xv)
    analytic = backward(y).get(xv.node, np.zeros_like(x))
    if not np.all(np.isfinite(analytic)):
        bad = np.unravel_index(np.argmax(~np.isfinite(analytic)), x.shape)
        raise FloatingPointError(f"non-finite analytic gradient at index {bad}")
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Var(x.copy())).value)
        flat[i] = orig - eps
        fm = float(f(Var(x.copy())).value)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at index {np.unravel_index(i, x.shape)}")
        numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0

