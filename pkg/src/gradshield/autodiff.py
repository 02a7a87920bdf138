"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Every gradient produced by :meth:`Tape.gradient` is itself a node on the
tape, so functions of gradients (e.g. squared input-gradient norms) can be
differentiated again. Tensors are plain ``numpy.ndarray`` values marked
read-only once recorded.

Broadcasting is limited to identical shapes or tensor-with-scalar (shape
``()``); everything else goes through explicit ops such as ``bias_add`` and
``broadcast_axis``.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class UnknownNodeError(KeyError):
    pass


def _freeze(value, copy: bool = True) -> np.ndarray:
    arr = np.array(value, dtype=np.float64) if copy else np.asarray(value, dtype=np.float64)
    arr.flags.writeable = False
    return arr


class Node:
    """One recorded value on a :class:`Tape`."""

    __slots__ = ("tape", "id", "op", "inputs", "attrs", "value", "requires_grad", "name")

    def __init__(self, tape, id, op, inputs, attrs, value, requires_grad, name=None):
        self.tape = tape
        self.id = id
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            if other.tape is not self.tape:
                raise ValueError("nodes belong to different tapes")
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))


# --------------------------------------------------------------------------
# op registry


class Op:
    differentiable = True

    def check(self, attrs, *shapes):
        pass

    def forward(self, attrs, *xs):
        raise NotImplementedError

    def vjp(self, node: Node, g: Node, i: int) -> Node:
        raise NotImplementedError


OPS: dict[str, Op] = {}


def register(name: str):
    def deco(cls):
        OPS[name] = cls()
        return cls

    return deco


def _mismatch(op, *shapes):
    return ShapeError(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


def _check_elementwise(op, a, b):
    if a != b and a != () and b != ():
        raise _mismatch(op, a, b)


def _unbroadcast(g: Node, shape: tuple) -> Node:
    if shape == () and g.shape != ():
        return sum(g)
    return g


@register("add")
class _Add(Op):
    def check(self, attrs, a, b):
        _check_elementwise("add", a, b)

    def forward(self, attrs, a, b):
        return a + b

    def vjp(self, node, g, i):
        return _unbroadcast(g, node.inputs[i].shape)


@register("sub")
class _Sub(Op):
    def check(self, attrs, a, b):
        _check_elementwise("sub", a, b)

    def forward(self, attrs, a, b):
        return a - b

    def vjp(self, node, g, i):
        return _unbroadcast(g if i == 0 else neg(g), node.inputs[i].shape)


@register("mul")
class _Mul(Op):
    def check(self, attrs, a, b):
        _check_elementwise("mul", a, b)

    def forward(self, attrs, a, b):
        return a * b

    def vjp(self, node, g, i):
        other = node.inputs[1 - i]
        return _unbroadcast(mul(g, other), node.inputs[i].shape)


@register("div")
class _Div(Op):
    def check(self, attrs, a, b):
        _check_elementwise("div", a, b)

    def forward(self, attrs, a, b):
        return a / b

    def vjp(self, node, g, i):
        a, b = node.inputs
        if i == 0:
            return _unbroadcast(div(g, b), a.shape)
        return _unbroadcast(neg(div(mul(g, node), b)), b.shape)


@register("neg")
class _Neg(Op):
    def forward(self, attrs, a):
        return -a

    def vjp(self, node, g, i):
        return neg(g)


@register("exp")
class _Exp(Op):
    def forward(self, attrs, a):
        return np.exp(a)

    def vjp(self, node, g, i):
        return mul(g, node)


@register("log")
class _Log(Op):
    def forward(self, attrs, a):
        return np.log(a)

    def vjp(self, node, g, i):
        return div(g, node.inputs[0])


@register("sigmoid")
class _Sigmoid(Op):
    def forward(self, attrs, a):
        # split by sign so neither branch overflows
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    def vjp(self, node, g, i):
        return mul(g, mul(node, sub(node.tape.constant(1.0), node)))


@register("softplus")
class _Softplus(Op):
    def forward(self, attrs, a):
        return np.logaddexp(0.0, a)

    def vjp(self, node, g, i):
        return mul(g, sigmoid(node.inputs[0]))


@register("relu")
class _Relu(Op):
    def forward(self, attrs, a):
        return np.maximum(a, 0.0)

    def vjp(self, node, g, i):
        return mul(g, step(node.inputs[0]))


@register("clamp_min")
class _ClampMin(Op):
    def forward(self, attrs, a):
        return np.maximum(a, attrs["lo"])

    def vjp(self, node, g, i):
        return mul(g, step(node.inputs[0], node.attrs["lo"]))


@register("step")
class _Step(Op):
    """Indicator ``x > threshold``; derivative zero everywhere it exists."""

    differentiable = False

    def forward(self, attrs, a):
        return (a > attrs["threshold"]).astype(np.float64)


@register("sign")
class _Sign(Op):
    differentiable = False

    def forward(self, attrs, a):
        return np.sign(a)


@register("max_axis")
class _MaxAxis(Op):
    """Non-differentiable reduction, used only as a stability shift."""

    differentiable = False

    def check(self, attrs, a):
        if not -len(a) <= attrs["axis"] < len(a):
            raise ShapeError(f"max_axis: axis {attrs['axis']} out of range for {tuple(a)}")

    def forward(self, attrs, a):
        return a.max(axis=attrs["axis"])


@register("matmul")
class _Matmul(Op):
    def check(self, attrs, a, b):
        if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
            raise _mismatch("matmul", a, b)

    def forward(self, attrs, a, b):
        return a @ b

    def vjp(self, node, g, i):
        a, b = node.inputs
        if i == 0:
            return matmul(g, transpose(b))
        return matmul(transpose(a), g)


@register("transpose")
class _Transpose(Op):
    def check(self, attrs, a):
        if len(a) != 2:
            raise ShapeError(f"transpose: expected a matrix, got {tuple(a)}")

    def forward(self, attrs, a):
        return a.T

    def vjp(self, node, g, i):
        return transpose(g)


@register("reshape")
class _Reshape(Op):
    def check(self, attrs, a):
        if math.prod(a) != math.prod(attrs["shape"]):
            raise ShapeError(f"reshape: cannot reshape {tuple(a)} to {attrs['shape']}")

    def forward(self, attrs, a):
        return a.reshape(attrs["shape"])

    def vjp(self, node, g, i):
        return reshape(g, node.inputs[0].shape)


@register("sum")
class _Sum(Op):
    def check(self, attrs, a):
        axis = attrs["axis"]
        if axis is not None and not 0 <= axis < len(a):
            raise ShapeError(f"sum: axis {axis} out of range for {tuple(a)}")

    def forward(self, attrs, a):
        return np.asarray(a.sum(axis=attrs["axis"]))

    def vjp(self, node, g, i):
        shape = node.inputs[0].shape
        axis = node.attrs["axis"]
        if axis is None:
            return fill(g, shape)
        return broadcast_axis(g, axis, shape[axis])


@register("fill")
class _Fill(Op):
    def check(self, attrs, a):
        if a != ():
            raise ShapeError(f"fill: expected a scalar, got {tuple(a)}")

    def forward(self, attrs, a):
        return np.full(attrs["shape"], float(a))

    def vjp(self, node, g, i):
        return sum(g)


@register("broadcast_axis")
class _BroadcastAxis(Op):
    """Insert ``axis`` and repeat the input ``size`` times along it."""

    def check(self, attrs, a):
        if not 0 <= attrs["axis"] <= len(a):
            raise ShapeError(f"broadcast_axis: axis {attrs['axis']} out of range for {tuple(a)}")

    def forward(self, attrs, a):
        axis = attrs["axis"]
        expanded = np.expand_dims(a, axis)
        shape = list(expanded.shape)
        shape[axis] = attrs["size"]
        return np.broadcast_to(expanded, shape)

    def vjp(self, node, g, i):
        return sum(g, axis=node.attrs["axis"])


@register("bias_add")
class _BiasAdd(Op):
    def check(self, attrs, x, b):
        if len(b) != 1 or len(x) < 1 or x[-1] != b[0]:
            raise _mismatch("bias_add", x, b)

    def forward(self, attrs, x, b):
        return x + b

    def vjp(self, node, g, i):
        if i == 0:
            return g
        k = node.inputs[1].shape[0]
        return sum(reshape(g, (-1, k)), axis=0)


def _gather_flat(a: np.ndarray, idx: np.ndarray) -> np.ndarray:
    padded = np.append(a.ravel(), 0.0)
    return padded[idx]


def _scatter_flat(g: np.ndarray, idx: np.ndarray, size: int) -> np.ndarray:
    # padding slots (-1) land in an extra bin that is trimmed off
    flat = np.bincount(np.where(idx < 0, size, idx).ravel(), weights=g.ravel(), minlength=size + 1)
    return flat[:size]


@register("gather")
class _Gather(Op):
    """``out[j] = a.flat[idx[j]]``, with ``idx == -1`` yielding 0."""

    def check(self, attrs, a):
        idx = attrs["idx"]
        if idx.size and idx.max() >= math.prod(a):
            raise ShapeError(f"gather: index {idx.max()} out of range for {tuple(a)}")

    def forward(self, attrs, a):
        return _gather_flat(a, attrs["idx"])

    def vjp(self, node, g, i):
        return scatter_add(g, node.attrs["idx"], node.inputs[0].shape)


@register("scatter_add")
class _ScatterAdd(Op):
    """Adjoint of gather: accumulate ``g`` into a zero array of ``shape``."""

    def check(self, attrs, g):
        if tuple(g) != attrs["idx"].shape:
            raise _mismatch("scatter_add", g, attrs["idx"].shape)

    def forward(self, attrs, g):
        shape = attrs["shape"]
        return _scatter_flat(g, attrs["idx"], math.prod(shape)).reshape(shape)

    def vjp(self, node, g, i):
        return gather(g, node.attrs["idx"])


def _pool_windows(a: np.ndarray, size: int) -> list[np.ndarray]:
    """Strided views of each window offset, (N, OH, OW, C) each; ragged edges dropped."""
    oh, ow = a.shape[1] // size, a.shape[2] // size
    return [
        a[:, dy : dy + oh * size : size, dx : dx + ow * size : size, :]
        for dy in range(size)
        for dx in range(size)
    ]


@register("maxpool")
class _MaxPool(Op):
    def check(self, attrs, a):
        if len(a) != 4 or a[1] < attrs["size"] or a[2] < attrs["size"]:
            raise ShapeError(f"maxpool: expected (N,H,W,C) of at least pool size, got {tuple(a)}")

    def forward(self, attrs, a):
        wins = _pool_windows(a, attrs["size"])
        out = wins[0].copy()
        for w in wins[1:]:
            np.maximum(out, w, out=out)
        return out

    def vjp(self, node, g, i):
        a = node.inputs[0]
        mask = a.tape.record("pool_mask", [a], size=node.attrs["size"])
        return a.tape.record("pool_scatter", [g, mask], size=node.attrs["size"], shape=a.shape)


@register("pool_mask")
class _PoolMask(Op):
    """Stacked (size*size, N, OH, OW, C) indicator of each window's first maximum."""

    differentiable = False

    def forward(self, attrs, a):
        wins = _pool_windows(a, attrs["size"])
        best = wins[0].copy()
        for w in wins[1:]:
            np.maximum(best, w, out=best)
        taken = np.zeros(best.shape, dtype=bool)
        mask = np.zeros((len(wins),) + best.shape)
        for j, w in enumerate(wins):
            hit = (w == best) & ~taken
            mask[j] = hit
            taken |= hit
        return mask


@register("pool_scatter")
class _PoolScatter(Op):
    """Route pooled values back to their window winners; linear in input 0."""

    def forward(self, attrs, g, mask):
        size = attrs["size"]
        out = np.zeros(attrs["shape"])
        for j, view in enumerate(_pool_windows(out, size)):
            np.multiply(mask[j], g, out=view)
        return out

    def vjp(self, node, g, i):
        mask = node.inputs[1]
        return g.tape.record("pool_gather", [g, mask], size=node.attrs["size"])


@register("pool_gather")
class _PoolGather(Op):
    """Adjoint of pool_scatter: read each window's winner."""

    def forward(self, attrs, a, mask):
        wins = _pool_windows(a, attrs["size"])
        out = mask[0] * wins[0]
        for j in range(1, len(wins)):
            out += mask[j] * wins[j]
        return out

    def vjp(self, node, g, i):
        a, mask = node.inputs
        return g.tape.record("pool_scatter", [g, mask], size=node.attrs["size"], shape=a.shape)


def _patch_geometry(shape, k, padding):
    n, h, w, c = shape
    pad = (k - 1) // 2 if padding == "same" else 0
    return n, h, w, c, pad, h + 2 * pad - k + 1, w + 2 * pad - k + 1


@register("patches")
class _Patches(Op):
    """im2col: (N, H, W, C) -> (N*OH*OW, k*k*C), rows ordered (ky, kx, c)."""

    def check(self, attrs, a):
        if len(a) != 4:
            raise ShapeError(f"patches: expected (N,H,W,C), got {tuple(a)}")
        *_, oh, ow = _patch_geometry(a, attrs["k"], attrs["padding"])
        if oh < 1 or ow < 1:
            raise ShapeError(f"patches: kernel {attrs['k']} too large for {tuple(a)}")

    def forward(self, attrs, a):
        k = attrs["k"]
        n, h, w, c, pad, oh, ow = _patch_geometry(a.shape, k, attrs["padding"])
        if pad:
            a = np.pad(a, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(a, (k, k), axis=(1, 2))
        return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, k * k * c)

    def vjp(self, node, g, i):
        a = node.inputs[0]
        return g.tape.record("patches_adjoint", [g], k=node.attrs["k"], padding=node.attrs["padding"], shape=a.shape)


@register("patches_adjoint")
class _PatchesAdjoint(Op):
    """col2im: sum every patch row back onto the image it was cut from."""

    def forward(self, attrs, g):
        k = attrs["k"]
        n, h, w, c, pad, oh, ow = _patch_geometry(attrs["shape"], k, attrs["padding"])
        cols = g.reshape(n, oh, ow, k, k, c)
        out = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
        for dy in range(k):
            for dx in range(k):
                out[:, dy : dy + oh, dx : dx + ow, :] += cols[:, :, :, dy, dx, :]
        return out[:, pad : pad + h, pad : pad + w, :]

    def vjp(self, node, g, i):
        return g.tape.record("patches", [g], k=node.attrs["k"], padding=node.attrs["padding"])


# --------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of nodes plus a name -> node registry for variables."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.variables: dict[str, Node] = {}

    def _append(self, op, inputs, attrs, value, requires_grad, name=None) -> Node:
        node = Node(self, len(self.nodes), op, tuple(inputs), attrs, value, requires_grad, name)
        self.nodes.append(node)
        return node

    def variable(self, name: str, value) -> Node:
        if name in self.variables:
            raise ValueError(f"variable {name!r} already registered")
        node = self._append("variable", (), {}, _freeze(value), True, name)
        self.variables[name] = node
        return node

    def constant(self, value) -> Node:
        return self._append("constant", (), {}, _freeze(value), False)

    def record(self, op: str, inputs: Sequence[Node], **attrs) -> Node:
        try:
            impl = OPS[op]
        except KeyError:
            raise ValueError(f"unknown op {op!r}") from None
        for node in inputs:
            if node.tape is not self:
                raise ValueError(f"{op}: input node {node.id} belongs to another tape")
        impl.check(attrs, *(n.shape for n in inputs))
        value = _freeze(impl.forward(attrs, *(n.value for n in inputs)), copy=False)
        requires_grad = impl.differentiable and any(n.requires_grad for n in inputs)
        return self._append(op, inputs, attrs, value, requires_grad)

    def release(self) -> None:
        """Drop every recorded node so memory is freed without waiting for the cycle collector."""
        self.nodes.clear()
        self.variables.clear()

    def node(self, node_id: int) -> Node:
        if not 0 <= node_id < len(self.nodes):
            raise UnknownNodeError(f"no node with id {node_id} on this tape")
        return self.nodes[node_id]

    def gradient(self, scalar: Node, wrt: Sequence[Node | int]) -> list[Node]:
        """Return recorded nodes holding d(scalar)/d(w) for each ``w`` in ``wrt``."""
        if scalar.tape is not self:
            raise ValueError("scalar belongs to another tape")
        if scalar.shape != ():
            raise ShapeError(f"gradient: source must be a scalar, got shape {scalar.shape}")
        targets = [self.node(w) if isinstance(w, int) else self.node(w.id) for w in wrt]
        target_ids = {t.id for t in targets}

        # nodes whose value depends on a target; only these need adjoints
        relevant = set()
        for node in self.nodes[: scalar.id + 1]:
            if node.id in target_ids or (
                node.requires_grad and any(inp.id in relevant for inp in node.inputs)
            ):
                relevant.add(node.id)

        grads: dict[int, Node] = {}
        if scalar.id in relevant:
            grads[scalar.id] = self.constant(1.0)
        for node in reversed(self.nodes[: scalar.id + 1]):
            g = grads.get(node.id)
            if g is None or not node.inputs:
                continue
            impl = OPS[node.op]
            for i, inp in enumerate(node.inputs):
                if inp.id not in relevant:
                    continue
                gi = impl.vjp(node, g, i)
                prev = grads.get(inp.id)
                grads[inp.id] = gi if prev is None else add(prev, gi)

        out = []
        for t in targets:
            g = grads.get(t.id)
            out.append(g if g is not None else self.constant(np.zeros(t.shape)))
        return out

    def replay(self, overrides: Mapping[str, np.ndarray] | None = None, upto: Node | None = None) -> list[np.ndarray]:
        """Recompute every node from the variables forward.

        ``overrides`` replaces named variable values; the tape itself is not
        modified. Returns the recomputed values indexed by node id.
        """
        overrides = overrides or {}
        unknown = set(overrides) - set(self.variables)
        if unknown:
            raise UnknownNodeError(f"unknown variables: {sorted(unknown)}")
        stop = len(self.nodes) if upto is None else upto.id + 1
        values: list[np.ndarray] = []
        for node in self.nodes[:stop]:
            if node.op == "variable":
                v = overrides.get(node.name)
                values.append(node.value if v is None else np.asarray(v, dtype=np.float64))
            elif node.op == "constant":
                values.append(node.value)
            else:
                values.append(OPS[node.op].forward(node.attrs, *(values[i.id] for i in node.inputs)))
        return values


# --------------------------------------------------------------------------
# functional surface


def _tape_of(*nodes) -> Tape:
    for n in nodes:
        if isinstance(n, Node):
            return n.tape
    raise TypeError("at least one argument must be a Node")


def _as_node(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _binary(op):
    def f(a, b):
        tape = _tape_of(a, b)
        return tape.record(op, [_as_node(tape, a), _as_node(tape, b)])

    f.__name__ = op
    return f


add = _binary("add")
sub = _binary("sub")
mul = _binary("mul")
div = _binary("div")
matmul = _binary("matmul")
bias_add = _binary("bias_add")


def neg(a: Node) -> Node:
    return a.tape.record("neg", [a])


def exp(a: Node) -> Node:
    return a.tape.record("exp", [a])


def log(a: Node) -> Node:
    return a.tape.record("log", [a])


def sigmoid(a: Node) -> Node:
    return a.tape.record("sigmoid", [a])


def softplus(a: Node) -> Node:
    return a.tape.record("softplus", [a])


def relu(a: Node) -> Node:
    return a.tape.record("relu", [a])


def clamp_min(a: Node, lo: float) -> Node:
    return a.tape.record("clamp_min", [a], lo=float(lo))


def step(a: Node, threshold: float = 0.0) -> Node:
    return a.tape.record("step", [a], threshold=float(threshold))


def sign(a: Node) -> Node:
    return a.tape.record("sign", [a])


def max_axis(a: Node, axis: int) -> Node:
    return a.tape.record("max_axis", [a], axis=axis)


def transpose(a: Node) -> Node:
    return a.tape.record("transpose", [a])


def reshape(a: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = math.prod(s for s in shape if s != -1)
        shape = tuple(a.value.size // known if s == -1 else s for s in shape)
    return a.tape.record("reshape", [a], shape=shape)


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001
    return a.tape.record("sum", [a], axis=axis)


def fill(a: Node, shape) -> Node:
    return a.tape.record("fill", [a], shape=tuple(shape))


def broadcast_axis(a: Node, axis: int, size: int) -> Node:
    return a.tape.record("broadcast_axis", [a], axis=axis, size=int(size))


def gather(a: Node, idx: np.ndarray) -> Node:
    return a.tape.record("gather", [a], idx=np.asarray(idx, dtype=np.int64))


def scatter_add(g: Node, idx: np.ndarray, shape) -> Node:
    return g.tape.record("scatter_add", [g], idx=np.asarray(idx, dtype=np.int64), shape=tuple(shape))


def maxpool(a: Node, size: int = 2) -> Node:
    return a.tape.record("maxpool", [a], size=int(size))


def patches(a: Node, k: int, padding: str = "valid") -> Node:
    return a.tape.record("patches", [a], k=int(k), padding=padding)


def dot(a: Node, b: Node) -> Node:
    return sum(mul(a, b))


def sum_squares(a: Node) -> Node:
    return sum(mul(a, a))


def softmax(z: Node) -> Node:
    return exp(log_softmax(z))


def log_softmax(z: Node) -> Node:
    """Row-wise log softmax of an (N, K) node, shifted by the row max."""
    k = z.shape[1]
    shifted = sub(z, broadcast_axis(max_axis(z, 1), 1, k))
    lse = log(sum(exp(shifted), axis=1))
    return sub(shifted, broadcast_axis(lse, 1, k))
