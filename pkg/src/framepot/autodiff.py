"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every operation of a forward computation as an
append-only list of nodes; ``gradient`` walks the recorded nodes in
reverse order exactly once.  Backward rules are themselves written in
terms of taped primitives, so a gradient is an ordinary taped value and
can be differentiated again (the force term of the training loss needs
d(dE/dx)/dparams).

Tapes are built per forward pass and discarded after backward.  A Tape
is single-threaded; distinct Tapes may run concurrently, and the arrays
inside nodes are never mutated once recorded.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "DiffError",
    "ShapeMismatchError",
    "NonFiniteError",
    "gradient",
    "forward_op",
]

# Number of leading value columns used to break ties when segment_sum
# canonicalizes addend order (see segment_sum).
_CANONICAL_KEY_COLS = 8


class DiffError(ValueError):
    """Base class for tape/gradient usage errors."""


class ShapeMismatchError(DiffError):
    """Inputs to a primitive have incompatible shapes."""

    def __init__(self, op: str, shape_a, shape_b):
        self.op = op
        self.shapes = (tuple(shape_a), tuple(shape_b))
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")


class NonFiniteError(FloatingPointError):
    """An op produced NaN or inf; carries the first offending op id."""

    def __init__(self, op: str, node_index: int):
        self.op = op
        self.node_index = node_index
        super().__init__(f"non-finite values produced by op {op!r} (tape node {node_index})")


class Tensor:
    """One node on a tape: an immutable float64 array plus its provenance."""

    __slots__ = ("data", "tape", "index", "parents", "vjp", "op")

    def __init__(self, data, tape, index, parents, vjp, op):
        self.data = data
        self.tape = tape
        self.index = index
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, index={self.index})"

    # Arithmetic sugar; plain numbers and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _wrap(self.tape, other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(self.tape, other))

    def __rsub__(self, other):
        return sub(_wrap(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _wrap(self.tape, other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(self.tape, other))

    def __rtruediv__(self, other):
        return div(_wrap(self.tape, other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(self.tape, other))

    def __pow__(self, p):
        return power(self, p)


class Tape:
    """Append-only record of one forward (and backward) computation."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Tensor] = []
        self.check_finite = check_finite

    def constant(self, value) -> Tensor:
        """Record an input/constant leaf node."""
        data = np.ascontiguousarray(np.asarray(value, dtype=np.float64))
        return self._record("constant", data, (), None, check=False)

    def release(self):
        """Drop the node list so tensors free by refcount, not gc.

        Tensors hold the tape and the tape's node list holds every tensor,
        a cycle only the garbage collector could reclaim; with multi-GB
        tapes the collection lag is an out-of-memory risk. Call once the
        wanted outputs have been copied out; the tape must not be reused.
        """
        self.nodes.clear()

    # `leaf` reads better at call sites that will be differentiated.
    leaf = constant

    def _record(self, op, data, parents, vjp, check=True) -> Tensor:
        index = len(self.nodes)
        # A plain sum propagates any NaN/Inf to the scalar, so one pass
        # detects non-finite entries without materialising a bool mask.
        if check and self.check_finite and not np.isfinite(np.sum(data)):
            raise NonFiniteError(op, index)
        node = Tensor(data, self, index, parents, vjp, op)
        self.nodes.append(node)
        return node


def _wrap(tape: Tape, value) -> Tensor:
    if isinstance(value, Tensor):
        if value.tape is not tape:
            raise DiffError("operands live on different tapes")
        return value
    return tape.constant(value)


def _broadcast_check(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


def _sum_to_shape(g: Tensor, shape) -> Tensor:
    """Reduce a broadcast gradient back to the parent's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = sum_(g, axis=keep, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# arithmetic primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    b = _wrap(a.tape, b)
    _broadcast_check("add", a, b)

    def vjp(g):
        return ((a, _sum_to_shape(g, a.shape)), (b, _sum_to_shape(g, b.shape)))

    return a.tape._record("add", a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    b = _wrap(a.tape, b)
    _broadcast_check("sub", a, b)

    def vjp(g):
        return ((a, _sum_to_shape(g, a.shape)), (b, _sum_to_shape(neg(g), b.shape)))

    return a.tape._record("sub", a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = _wrap(a.tape, b)
    _broadcast_check("mul", a, b)

    def vjp(g):
        return ((a, _sum_to_shape(mul(g, b), a.shape)), (b, _sum_to_shape(mul(g, a), b.shape)))

    return a.tape._record("mul", a.data * b.data, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    b = _wrap(a.tape, b)
    _broadcast_check("div", a, b)

    def vjp(g):
        ga = _sum_to_shape(div(g, b), a.shape)
        gb = _sum_to_shape(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ((a, ga), (b, gb))

    return a.tape._record("div", a.data / b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return ((a, neg(g)),)

    return a.tape._record("neg", -a.data, (a,), vjp)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def vjp(g):
        return ((a, mul(g, mul_const(power(a, p - 1.0), p))),)

    return a.tape._record("power", a.data ** p, (a,), vjp)


def mul_const(a: Tensor, c: float) -> Tensor:
    """Scale by a python float without allocating a constant node."""
    c = float(c)

    def vjp(g):
        return ((a, mul_const(g, c)),)

    return a.tape._record("mul_const", a.data * c, (a,), vjp)


def abs_(a: Tensor) -> Tensor:
    # Subgradient: sign(a) with sign(0) = 0, treated as locally constant.
    def vjp(g):
        return ((a, mul(g, a.tape.constant(np.sign(a.data)))),)

    return a.tape._record("abs", np.abs(a.data), (a,), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    # Subgradient: pass-through strictly inside (lo, hi), zero on the plateaus.
    def vjp(g):
        inside = (a.data > lo) & (a.data < hi)
        return ((a, mul(g, a.tape.constant(inside.astype(np.float64)))),)

    return a.tape._record("clip", np.clip(a.data, lo, hi), (a,), vjp)


# ---------------------------------------------------------------------------
# elementwise transcendental primitives

def exp(a: Tensor) -> Tensor:
    out = a.tape._record("exp", np.exp(a.data), (a,), None)

    def vjp(g):
        return ((a, mul(g, out)),)

    out.vjp = vjp
    return out


def log(a: Tensor) -> Tensor:
    def vjp(g):
        return ((a, div(g, a)),)

    return a.tape._record("log", np.log(a.data), (a,), vjp)


def sin(a: Tensor) -> Tensor:
    def vjp(g):
        return ((a, mul(g, cos(a))),)

    return a.tape._record("sin", np.sin(a.data), (a,), vjp)


def cos(a: Tensor) -> Tensor:
    def vjp(g):
        return ((a, neg(mul(g, sin(a)))),)

    return a.tape._record("cos", np.cos(a.data), (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    out = a.tape._record("tanh", np.tanh(a.data), (a,), None)

    def vjp(g):
        return ((a, mul(g, sub(a.tape.constant(1.0), mul(out, out)))),)

    out.vjp = vjp
    return out


def sqrt(a: Tensor) -> Tensor:
    out = a.tape._record("sqrt", np.sqrt(a.data), (a,), None)

    def vjp(g):
        return ((a, div(mul_const(g, 0.5), out)),)

    out.vjp = vjp
    return out


def sigmoid(a: Tensor) -> Tensor:
    # Stable logistic; backward reuses the forward value.
    val = np.empty_like(a.data)
    pos = a.data >= 0
    val[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ea = np.exp(a.data[~pos])
    val[~pos] = ea / (1.0 + ea)
    out = a.tape._record("sigmoid", val, (a,), None)

    def vjp(g):
        return ((a, mul(g, mul(out, sub(a.tape.constant(1.0), out)))),)

    out.vjp = vjp
    return out


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), recorded as one node; backward recomputes sigmoid."""
    sig = np.empty_like(a.data)
    pos = a.data >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ea = np.exp(a.data[~pos])
    sig[~pos] = ea / (1.0 + ea)
    out = a.tape._record("silu", a.data * sig, (a,), None)

    def vjp(g):
        s = sigmoid(a)
        # d silu = s + x*s*(1-s) = s*(1 + x*(1-s))
        one = a.tape.constant(1.0)
        return ((a, mul(g, mul(s, add(one, mul(a, sub(one, s)))))),)

    out.vjp = vjp
    return out


def stop_gradient(a: Tensor) -> Tensor:
    return a.tape._record("stop_gradient", a.data, (), None, check=False)


# ---------------------------------------------------------------------------
# shape primitives

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def vjp(g):
        return ((a, reshape(g, a.shape)),)

    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, shape) from None
    return a.tape._record("reshape", data, (a,), vjp, check=False)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return ((a, transpose(g, inverse)),)

    # A strided view is enough: matmul and elementwise consumers handle it.
    return a.tape._record("transpose", a.data.transpose(axes), (a,), vjp, check=False)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def vjp(g):
        return ((a, _sum_to_shape(g, a.shape)),)

    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeMismatchError("broadcast", a.shape, shape) from None
    return a.tape._record("broadcast", data, (a,), vjp, check=False)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return ((a, broadcast_to(reshape(g, (1,) * a.ndim), a.shape)),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
        if keepdims:
            return ((a, broadcast_to(g, a.shape)),)
        kept = [1 if i in axes else n for i, n in enumerate(a.shape)]
        return ((a, broadcast_to(reshape(g, kept), a.shape)),)

    return a.tape._record("sum", np.asarray(data, dtype=np.float64), (a,), vjp, check=False)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return mul_const(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    tape = parts[0].tape
    base = list(parts[0].shape)
    ax = axis % parts[0].ndim
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or any(other[i] != base[i] for i in range(len(base)) if i != ax):
            raise ShapeMismatchError("concat", parts[0].shape, p.shape)
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            (p, slice_axis(g, ax, int(offsets[k]), int(offsets[k + 1])))
            for k, p in enumerate(parts)
        )

    data = np.ascontiguousarray(np.concatenate([p.data for p in parts], axis=ax))
    return tape._record("concat", data, tuple(parts), vjp, check=False)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    index = tuple(slice(None) if i != ax else slice(start, stop) for i in range(a.ndim))

    def vjp(g):
        pads = []
        if start > 0:
            before = list(a.shape)
            before[ax] = start
            pads.append(a.tape.constant(np.zeros(before)))
        pads.append(g)
        if stop < a.shape[ax]:
            after = list(a.shape)
            after[ax] = a.shape[ax] - stop
            pads.append(a.tape.constant(np.zeros(after)))
        return ((a, concat(pads, axis=ax) if len(pads) > 1 else pads[0]),)

    return a.tape._record("slice", np.ascontiguousarray(a.data[index]), (a,), vjp, check=False)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = _wrap(a.tape, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)

    def vjp(g):
        return ((a, matmul(g, transpose(b))), (b, matmul(transpose(a), g)))

    return a.tape._record("matmul", a.data @ b.data, (a, b), vjp)


def norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along one axis; backward uses v/|v| (no smoothing)."""
    data = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=keepdims))
    out = a.tape._record("norm", np.asarray(data, dtype=np.float64), (a,), None, check=False)
    ax = axis % a.ndim

    def vjp(g):
        if keepdims:
            g_kd, out_kd = g, out
        else:
            kept = [1 if i == ax else n for i, n in enumerate(a.shape)]
            g_kd = reshape(g, kept)
            out_kd = reshape(out, kept)
        return ((a, div(mul(g_kd, a), out_kd)),)

    out.vjp = vjp
    return out


def cross(a: Tensor, b: Tensor) -> Tensor:
    b = _wrap(a.tape, b)
    if a.shape != b.shape or a.shape[-1] != 3:
        raise ShapeMismatchError("cross", a.shape, b.shape)

    def vjp(g):
        return ((a, cross(b, g)), (b, cross(g, a)))

    return a.tape._record("cross", np.cross(a.data, b.data), (a, b), vjp)


def dot(a: Tensor, b: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Row-wise dot product, composed from mul and sum."""
    return sum_(mul(a, b), axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# indexing and aggregation

def gather(a: Tensor, idx) -> Tensor:
    """Select rows a[idx] along axis 0."""
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[0]

    def vjp(g):
        return ((a, scatter_add(g, idx, n)),)

    return a.tape._record("gather", np.ascontiguousarray(a.data[idx]), (a,), vjp, check=False)


def scatter_add(values: Tensor, idx, n: int) -> Tensor:
    """out[i] = sum of values rows with idx == i; inverse of gather."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, idx, values.data)

    def vjp(g):
        return ((values, gather(g, idx)),)

    return values.tape._record("scatter_add", out, (values,), vjp, check=False)


def segment_sum(values: Tensor, segments, num_segments: int, canonical: bool = True) -> Tensor:
    """Sum rows of ``values`` into ``num_segments`` buckets.

    With ``canonical=True`` the addends of each bucket are accumulated in
    an order sorted by their own leading values, which is independent of
    input labelling — relabeling atoms then reproduces bit-identical sums.
    """
    segments = np.asarray(segments, dtype=np.intp)
    if values.shape[0] != segments.shape[0]:
        raise ShapeMismatchError("segment_sum", values.shape, segments.shape)
    trailing = int(np.prod(values.shape[1:], dtype=np.intp)) if values.data.ndim > 1 else 1
    flat = values.data.reshape(values.shape[0], trailing)
    if canonical and flat.shape[0] > 1:
        ncols = min(_CANONICAL_KEY_COLS, flat.shape[1])
        keys = tuple(flat[:, c] for c in reversed(range(ncols))) + (segments,)
        order = np.lexsort(keys)
        out = np.zeros((num_segments,) + values.shape[1:])
        np.add.at(out, segments[order], values.data[order])
    else:
        out = np.zeros((num_segments,) + values.shape[1:])
        np.add.at(out, segments, values.data)

    def vjp(g):
        return ((values, gather(g, segments)),)

    return values.tape._record("segment_sum", out, (values,), vjp, check=False)


def canonical_sum(values: Tensor, axis: int = 0) -> Tensor:
    """Order-canonical total along axis 0 (label-independent accumulation)."""
    if axis != 0:
        raise DiffError("canonical_sum reduces axis 0 only")
    seg = np.zeros(values.shape[0], dtype=np.intp)
    total = segment_sum(values, seg, 1, canonical=True)
    return reshape(total, values.shape[1:])


# ---------------------------------------------------------------------------
# rotary pair rotation

def rotate_pairs(a: Tensor, angles: Tensor) -> Tensor:
    """Rotate channel pairs (a[..., 2k], a[..., 2k+1]) by angles[..., k].

    The rotation is the complex multiplication (x + iy) * e^{i angle}, so
    each pair's norm is preserved exactly up to round-off.
    """
    angles = _wrap(a.tape, angles)
    if a.shape[-1] % 2 != 0 or angles.shape != a.shape[:-1] + (a.shape[-1] // 2,):
        raise ShapeMismatchError("rotate_pairs", a.shape, angles.shape)
    c = np.cos(angles.data)
    s = np.sin(angles.data)
    x = a.data[..., 0::2]
    y = a.data[..., 1::2]
    data = np.empty_like(a.data)
    data[..., 0::2] = c * x - s * y
    data[..., 1::2] = s * x + c * y
    out = a.tape._record("rotate_pairs", data, (a, angles), None)

    def vjp(g):
        # Inverse rotation of the upstream gradient.
        ga = rotate_pairs(g, neg(angles))
        # d out / d angle is the input rotated by angle + pi/2.
        quarter = add(angles, a.tape.constant(np.pi / 2.0))
        rot90 = rotate_pairs(a, quarter)
        prod = mul(g, rot90)
        pairs = reshape(prod, prod.shape[:-1] + (prod.shape[-1] // 2, 2))
        gangles = sum_(pairs, axis=-1)
        return ((a, ga), (angles, gangles))

    out.vjp = vjp
    return out


# ---------------------------------------------------------------------------
# gradients

def gradient(output: Tensor, wrt):
    """Reverse-mode gradients of a scalar ``output`` w.r.t. ``wrt`` nodes.

    ``wrt`` may be a Tensor or a sequence of Tensors; the result matches
    that structure.  Nodes with no path to the output get exact zeros.
    Returned gradients are taped Tensors and can be differentiated again.
    """
    single = isinstance(wrt, Tensor)
    wrt_list: list[Tensor] = [wrt] if single else list(wrt)
    if output.size != 1:
        raise DiffError(f"gradient requires a scalar output, got shape {output.shape}")
    tape = output.tape
    for w in wrt_list:
        if w.tape is not tape:
            raise DiffError("wrt node is not on the output's tape")

    top = output.index
    # Nodes that (transitively) depend on some wrt node.
    depends = np.zeros(top + 1, dtype=bool)
    for w in wrt_list:
        if w.index <= top:
            depends[w.index] = True
    nodes = tape.nodes
    start = min((w.index for w in wrt_list), default=top)
    for idx in range(start, top + 1):
        if depends[idx]:
            continue
        for p in nodes[idx].parents:
            if depends[p.index]:
                depends[idx] = True
                break
    # Nodes the output (transitively) reads.
    needed = np.zeros(top + 1, dtype=bool)
    needed[top] = True
    for idx in range(top, -1, -1):
        if needed[idx]:
            for p in nodes[idx].parents:
                needed[p.index] = True

    wrt_indices = {w.index for w in wrt_list}
    results: dict[int, Tensor] = {}
    grads: dict[int, Tensor] = {top: tape.constant(np.ones_like(output.data))}
    for idx in range(top, -1, -1):
        g = grads.pop(idx, None)
        if g is None or not (needed[idx] and depends[idx]):
            continue
        if idx in wrt_indices:
            results[idx] = g
        node = nodes[idx]
        if node.vjp is None:
            continue
        for parent, contribution in node.vjp(g):
            if contribution is None or not depends[parent.index]:
                continue
            held = grads.get(parent.index)
            grads[parent.index] = contribution if held is None else add(held, contribution)

    out = []
    for w in wrt_list:
        g = results.get(w.index)
        if g is None:
            g = tape.constant(np.zeros_like(w.data))
        elif g.shape != w.shape:
            g = reshape(g, w.shape)
        out.append(g)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# generic primitive dispatch

_PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "sum": sum_,
    "broadcast": broadcast_to,
    "concat": lambda *parts, axis=0: concat(parts, axis=axis),
    "gather": gather,
    "scatter_add": scatter_add,
    "segment_sum": segment_sum,
    "exp": exp,
    "log": log,
    "sin": sin,
    "cos": cos,
    "tanh": tanh,
    "sqrt": sqrt,
    "power": power,
    "abs": abs_,
    "norm": norm,
    "cross": cross,
    "dot": dot,
    "sigmoid": sigmoid,
    "silu": silu,
    "rotate_pairs": rotate_pairs,
    "reshape": reshape,
    "transpose": transpose,
    "slice": slice_axis,
    "stop_gradient": stop_gradient,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Run a primitive by name; the op is recorded on the inputs' tape."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise DiffError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)
