"""Dense float64 tensors with a recorded tape and reverse-mode differentiation.

Every primitive's vector-Jacobian product is itself written in primitives, so a
backward pass run with ``create_graph=True`` is appended to the same tape and
can be differentiated again (used by the cosine regulariser).

Usage::

    with Tape() as tape:
        y = tanh(matmul(x, w))
        loss = mean(square(y))
    grads = backward(tape, loss, store)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's rule."""


class NumericOverflowError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class OracleInvalidError(RuntimeError):
    """The function handed to the finite-difference oracle is not deterministic."""


# --------------------------------------------------------------------------
# tensors and tapes

_ACTIVE: List["Tape"] = []


class Tensor:
    """A dense row-major float64 array, optionally tied to a tape node."""

    __slots__ = ("data", "requires_grad", "tape", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.tape: Optional[Tape] = None
        self.node: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # sugar used by the vjp rules and loss code
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return divide(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, float(value)))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


@dataclass
class Node:
    op: "Primitive"
    inputs: Tuple[int, ...]
    attrs: dict
    value: np.ndarray
    out: Optional[Tensor] = None


@dataclass
class Tape:
    """Append-only record of primitive applications, topologically ordered.

    Leaves (tensors with ``requires_grad``) get a node the first time they are
    consumed on this tape; their node has no inputs and a ``None`` op.
    """

    nodes: List[Node] = field(default_factory=list)
    leaves: Dict[int, int] = field(default_factory=dict)
    recording: bool = True

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def leaf_node(self, t: Tensor) -> int:
        key = id(t)
        nid = self.leaves.get(key)
        if nid is None or self.nodes[nid].out is not t:
            nid = len(self.nodes)
            self.nodes.append(Node(None, (), {}, t.data, t))
            self.leaves[key] = nid
        return nid

    def node_of(self, t: Tensor) -> Optional[int]:
        if t.tape is self:
            return t.node
        if t.requires_grad:
            return self.leaf_node(t)
        return None

    def replay(self, overrides: Optional[Dict[int, np.ndarray]] = None) -> List[np.ndarray]:
        """Re-execute every node in order; ``overrides`` replaces leaf values.

        Inputs that were untracked constants are taken from the saved attrs.
        """
        overrides = overrides or {}
        values: List[np.ndarray] = []
        for nid, node in enumerate(self.nodes):
            if node.op is None:
                values.append(np.asarray(overrides.get(nid, node.value), dtype=np.float64))
                continue
            args = [values[i] if i >= 0 else node.attrs["_const"][-i - 1] for i in node.inputs]
            values.append(node.op.forward(*args, **_public(node.attrs)))
        return values


def _public(attrs: dict) -> dict:
    return {k: v for k, v in attrs.items() if not k.startswith("_")}


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


class no_record:
    """Temporarily stop the active tape from recording."""

    def __enter__(self):
        self.tape = active_tape()
        if self.tape is not None:
            self.prev = self.tape.recording
            self.tape.recording = False
        return self

    def __exit__(self, *exc):
        if self.tape is not None:
            self.tape.recording = self.prev
        return False


# --------------------------------------------------------------------------
# primitives


class Primitive:
    name = "primitive"

    def check(self, *shapes, **attrs):
        pass

    def forward(self, *arrays, **attrs) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, g: Tensor, inputs: Sequence[Tensor], out: Tensor, **attrs) -> Sequence[Optional[Tensor]]:
        raise NotImplementedError


def apply(op: Primitive, *inputs: Tensor, **attrs) -> Tensor:
    op.check(*[t.shape for t in inputs], **attrs)
    with np.errstate(all="ignore"):
        value = op.forward(*[t.data for t in inputs], **attrs)
    if not np.all(np.isfinite(value)):
        raise NumericOverflowError(f"{op.name} produced a non-finite value")
    out = Tensor(value)
    tape = active_tape()
    if tape is None or not tape.recording:
        return out
    ids = []
    consts = []
    tracked = False
    for t in inputs:
        nid = tape.node_of(t)
        if nid is None:
            consts.append(t.data)
            ids.append(-len(consts))
        else:
            tracked = True
            ids.append(nid)
    if not tracked:
        return out
    node_attrs = dict(attrs)
    if consts:
        node_attrs["_const"] = consts
    node_attrs["_inputs"] = inputs
    out.tape = tape
    out.node = len(tape.nodes)
    tape.nodes.append(Node(op, tuple(ids), node_attrs, value, out))
    return out


def _shape_error(op: str, a, b, rule: str):
    raise ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)} ({rule})")


class _MatMul(Primitive):
    name = "matmul"

    def check(self, a, b):
        if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
            _shape_error(self.name, a, b, "expects (m,k) @ (k,n)")

    def forward(self, a, b):
        return a @ b

    def vjp(self, g, inputs, out):
        a, b = inputs
        return matmul(g, transpose(b)), matmul(transpose(a), g)


class _Transpose(Primitive):
    name = "transpose"

    def check(self, a):
        if len(a) != 2:
            raise ShapeError(f"transpose: expects a matrix, got shape {tuple(a)}")

    def forward(self, a):
        return np.ascontiguousarray(a.T)

    def vjp(self, g, inputs, out):
        return (transpose(g),)


class _Add(Primitive):
    """Same-shape add, or a rank-1 bias added to every row of a matrix."""

    name = "add"

    def check(self, a, b):
        if tuple(a) == tuple(b):
            return
        if len(a) == 2 and len(b) == 1 and a[1] == b[0]:
            return
        _shape_error(self.name, a, b, "same shape or (m,n) + (n,)")

    def forward(self, a, b):
        return a + b

    def vjp(self, g, inputs, out):
        a, b = inputs
        if a.shape == b.shape:
            return g, g
        return g, sum_rows(g)


class _Sub(Primitive):
    name = "sub"

    def check(self, a, b):
        if tuple(a) != tuple(b):
            _shape_error(self.name, a, b, "same shape")

    def forward(self, a, b):
        return a - b

    def vjp(self, g, inputs, out):
        return g, scale(g, -1.0)


class _Multiply(Primitive):
    name = "multiply"

    def check(self, a, b):
        if tuple(a) != tuple(b):
            _shape_error(self.name, a, b, "same shape")

    def forward(self, a, b):
        return a * b

    def vjp(self, g, inputs, out):
        a, b = inputs
        return multiply(g, b), multiply(g, a)


class _Divide(Primitive):
    name = "divide"

    def check(self, a, b):
        if tuple(a) != tuple(b):
            _shape_error(self.name, a, b, "same shape")

    def forward(self, a, b):
        return a / b

    def vjp(self, g, inputs, out):
        a, b = inputs
        ga = divide(g, b)
        return ga, scale(multiply(ga, out), -1.0)


class _Scale(Primitive):
    name = "scale"

    def forward(self, a, c):
        return a * c

    def vjp(self, g, inputs, out, c):
        return (scale(g, c),)


class _Tanh(Primitive):
    name = "tanh"

    def forward(self, a):
        return np.tanh(a)

    def vjp(self, g, inputs, out):
        return (sub(g, multiply(g, square(out))),)


class _Relu(Primitive):
    name = "relu"

    def forward(self, a):
        return np.maximum(a, 0.0)

    def vjp(self, g, inputs, out):
        # subgradient at 0 is 0
        mask = Tensor((inputs[0].data > 0).astype(np.float64))
        return (multiply(g, mask),)


class _Exp(Primitive):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def vjp(self, g, inputs, out):
        return (multiply(g, out),)


class _Log(Primitive):
    name = "log"

    def forward(self, a):
        return np.log(a)

    def vjp(self, g, inputs, out):
        return (divide(g, inputs[0]),)


class _Square(Primitive):
    name = "square"

    def forward(self, a):
        return a * a

    def vjp(self, g, inputs, out):
        return (scale(multiply(g, inputs[0]), 2.0),)


class _Sum(Primitive):
    name = "sum"

    def forward(self, a):
        return np.asarray(a.sum())

    def vjp(self, g, inputs, out):
        return (expand(g, inputs[0].shape),)


class _Mean(Primitive):
    name = "mean"

    def forward(self, a):
        return np.asarray(a.mean())

    def vjp(self, g, inputs, out):
        return (scale(expand(g, inputs[0].shape), 1.0 / inputs[0].size),)


class _Expand(Primitive):
    """Broadcast a scalar to ``shape``."""

    name = "expand"

    def check(self, a, shape):
        if len(a) != 0:
            raise ShapeError(f"expand: expects a scalar, got shape {tuple(a)}")

    def forward(self, a, shape):
        return np.full(shape, float(a))

    def vjp(self, g, inputs, out, shape):
        return (sum_(g),)


class _SumRows(Primitive):
    """(m, n) -> (n,) by summing over rows."""

    name = "sum_rows"

    def check(self, a):
        if len(a) != 2:
            raise ShapeError(f"sum_rows: expects a matrix, got shape {tuple(a)}")

    def forward(self, a):
        return a.sum(axis=0)

    def vjp(self, g, inputs, out):
        return (tile_rows(g, inputs[0].shape[0]),)


class _TileRows(Primitive):
    """(n,) -> (m, n) by repeating the vector as every row."""

    name = "tile_rows"

    def check(self, a, m):
        if len(a) != 1:
            raise ShapeError(f"tile_rows: expects a vector, got shape {tuple(a)}")

    def forward(self, a, m):
        return np.tile(a, (m, 1))

    def vjp(self, g, inputs, out, m):
        return (sum_rows(g),)


class _SumCols(Primitive):
    """(m, n) -> (m,) by summing within each row."""

    name = "sum_cols"

    def check(self, a):
        if len(a) != 2:
            raise ShapeError(f"sum_cols: expects a matrix, got shape {tuple(a)}")

    def forward(self, a):
        return a.sum(axis=1)

    def vjp(self, g, inputs, out):
        return (tile_cols(g, inputs[0].shape[1]),)


class _TileCols(Primitive):
    """(m,) -> (m, n) by repeating each entry across its row."""

    name = "tile_cols"

    def check(self, a, n):
        if len(a) != 1:
            raise ShapeError(f"tile_cols: expects a vector, got shape {tuple(a)}")

    def forward(self, a, n):
        return np.repeat(a[:, None], n, axis=1)

    def vjp(self, g, inputs, out, n):
        return (sum_cols(g),)


class _Softmax(Primitive):
    name = "softmax"

    def check(self, a):
        if len(a) != 2:
            raise ShapeError(f"softmax: expects (m, classes), got shape {tuple(a)}")

    def forward(self, a):
        z = a - a.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def vjp(self, g, inputs, out):
        inner = tile_cols(sum_cols(multiply(g, out)), out.shape[1])
        return (multiply(out, sub(g, inner)),)


class _L1Distance(Primitive):
    """Mean absolute difference over all entries."""

    name = "l1_distance"

    def check(self, a, b):
        if tuple(a) != tuple(b):
            _shape_error(self.name, a, b, "same shape")

    def forward(self, a, b):
        return np.asarray(np.abs(a - b).mean())

    def vjp(self, g, inputs, out):
        a, b = inputs
        # sign is piecewise constant: no second-order contribution
        sgn = Tensor(np.sign(a.data - b.data) / a.size)
        ga = multiply(expand(g, a.shape), sgn)
        return ga, scale(ga, -1.0)


class _SoftmaxCrossEntropy(Primitive):
    """Mean over rows of -log softmax(logits)[label]."""

    name = "softmax_cross_entropy"

    def check(self, a, labels):
        if len(a) != 2 or a[1] < 2:
            raise ShapeError(f"softmax_cross_entropy: expects (m, classes>=2) logits, got shape {tuple(a)}")
        if labels.shape != (a[0],):
            _shape_error(self.name, a, labels.shape, "labels must be (m,)")

    def forward(self, a, labels):
        z = a - a.max(axis=1, keepdims=True)
        logz = np.log(np.exp(z).sum(axis=1))
        picked = z[np.arange(a.shape[0]), labels]
        return np.asarray((logz - picked).mean())

    def vjp(self, g, inputs, out, labels):
        a = inputs[0]
        m, c = a.shape
        onehot = np.zeros((m, c))
        onehot[np.arange(m), labels] = 1.0
        diff = sub(softmax(a), Tensor(onehot))
        return (scale(multiply(expand(g, a.shape), diff), 1.0 / m),)


class _TakeRows(Primitive):
    """Select rows ``idx`` of a matrix (repeats allowed)."""

    name = "take_rows"

    def check(self, a, idx):
        if len(a) != 2:
            raise ShapeError(f"take_rows: expects a matrix, got shape {tuple(a)}")

    def forward(self, a, idx):
        return a[idx]

    def vjp(self, g, inputs, out, idx):
        return (scatter_rows(g, idx, inputs[0].shape[0]),)


class _ScatterRows(Primitive):
    """Adjoint of take_rows: add row ``j`` of the input into output row ``idx[j]``."""

    name = "scatter_rows"

    def check(self, a, idx, m):
        if len(a) != 2 or a[0] != len(idx):
            raise ShapeError(f"scatter_rows: shape {tuple(a)} does not match {len(idx)} indices")

    def forward(self, a, idx, m):
        out = np.zeros((m, a.shape[1]))
        np.add.at(out, idx, a)
        return out

    def vjp(self, g, inputs, out, idx, m):
        return (take_rows(g, idx),)


_matmul = _MatMul()
_transpose = _Transpose()
_add = _Add()
_sub = _Sub()
_multiply = _Multiply()
_divide = _Divide()
_scale = _Scale()
_tanh = _Tanh()
_relu = _Relu()
_exp = _Exp()
_log = _Log()
_square = _Square()
_sum = _Sum()
_mean = _Mean()
_expand = _Expand()
_sum_rows = _SumRows()
_tile_rows = _TileRows()
_sum_cols = _SumCols()
_tile_cols = _TileCols()
_softmax = _Softmax()
_l1 = _L1Distance()
_sce = _SoftmaxCrossEntropy()
_take_rows = _TakeRows()
_scatter_rows = _ScatterRows()


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply(_matmul, a, b)


def transpose(a: Tensor) -> Tensor:
    return apply(_transpose, a)


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply(_add, a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply(_sub, a, b)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    return apply(_multiply, a, b)


def divide(a: Tensor, b: Tensor) -> Tensor:
    return apply(_divide, a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return apply(_scale, a, c=float(c))


def tanh(a: Tensor) -> Tensor:
    return apply(_tanh, a)


def relu(a: Tensor) -> Tensor:
    return apply(_relu, a)


def exp(a: Tensor) -> Tensor:
    return apply(_exp, a)


def log(a: Tensor) -> Tensor:
    return apply(_log, a)


def square(a: Tensor) -> Tensor:
    return apply(_square, a)


def sum_(a: Tensor) -> Tensor:
    return apply(_sum, a)


def mean(a: Tensor) -> Tensor:
    return apply(_mean, a)


def expand(a: Tensor, shape) -> Tensor:
    return apply(_expand, a, shape=tuple(shape))


def sum_rows(a: Tensor) -> Tensor:
    return apply(_sum_rows, a)


def tile_rows(a: Tensor, m: int) -> Tensor:
    return apply(_tile_rows, a, m=int(m))


def sum_cols(a: Tensor) -> Tensor:
    return apply(_sum_cols, a)


def tile_cols(a: Tensor, n: int) -> Tensor:
    return apply(_tile_cols, a, n=int(n))


def take_rows(a: Tensor, idx) -> Tensor:
    return apply(_take_rows, a, idx=np.asarray(idx, dtype=np.int64))


def scatter_rows(a: Tensor, idx, m: int) -> Tensor:
    return apply(_scatter_rows, a, idx=np.asarray(idx, dtype=np.int64), m=int(m))


def softmax(a: Tensor) -> Tensor:
    return apply(_softmax, a)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    return apply(_l1, a, b)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        raise ValueError("softmax_cross_entropy: labels must be integer class indices")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError(f"softmax_cross_entropy: label out of range for {logits.shape[-1]} classes")
    return apply(_sce, logits, labels=labels)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum_(multiply(a, b))


PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "multiply": multiply,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "mean": mean,
    "square": square,
    "l1_distance": l1_distance,
    "softmax_cross_entropy": softmax_cross_entropy,
}


def forward_primitive(op: str, *inputs, **attrs) -> Tensor:
    """Apply a primitive by name; tensors are recorded on the active tape."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}; choose from {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **attrs)


# --------------------------------------------------------------------------
# reverse mode


def backward(
    tape: Tape,
    output: Tensor,
    wrt,
    create_graph: bool = False,
) -> Dict:
    """Gradients of scalar ``output`` with respect to ``wrt``.

    ``wrt`` is a :class:`ParameterStore` (result keyed by path) or a sequence
    of tensors (result keyed by position). Parameters that never reached the
    output get an all-zero gradient. With ``create_graph`` the backward pass is
    recorded on ``tape`` and the returned tensors are differentiable.
    """
    if output.size != 1 or output.data.ndim != 0:
        raise ValueError(f"backward: output must be a scalar, got shape {output.shape}")

    if isinstance(wrt, ParameterStore):
        keys = list(wrt.paths())
        targets = [wrt[p] for p in keys]
    else:
        targets = list(wrt)
        keys = list(range(len(targets)))

    if output.tape is not tape:
        return {k: Tensor(np.zeros(t.shape)) for k, t in zip(keys, targets)}

    wanted = _wanted(tape, targets)
    grads: Dict[int, Tensor] = {output.node: Tensor(np.ones(()))}
    prev = tape.recording
    _ACTIVE.append(tape)
    tape.recording = create_graph
    try:
        for nid in range(output.node, -1, -1):
            g = grads.get(nid) if nid in wanted else grads.pop(nid, None)
            if g is None:
                continue
            node = tape.nodes[nid]
            if node.op is None:
                continue
            contribs = node.op.vjp(g, node.attrs["_inputs"], node.out, **_public(node.attrs))
            for src, c in zip(node.inputs, contribs):
                if src < 0 or c is None:
                    continue
                grads[src] = add(grads[src], c) if src in grads else c
    finally:
        tape.recording = prev
        _ACTIVE.pop()

    out = {}
    for k, t in zip(keys, targets):
        nid = _lookup(tape, t)
        g = grads.get(nid) if nid is not None else None
        out[k] = g if g is not None else Tensor(np.zeros(t.shape))
    return out


def _lookup(tape: Tape, t: Tensor) -> Optional[int]:
    if t.tape is tape:
        return t.node
    nid = tape.leaves.get(id(t))
    if nid is not None and tape.nodes[nid].out is t:
        return nid
    return None


def _wanted(tape: Tape, targets) -> set:
    return {nid for nid in (_lookup(tape, t) for t in targets) if nid is not None}


# --------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named parameter tensors, flattened in lexicographic path order."""

    def __init__(self, params: Optional[Dict[str, np.ndarray]] = None):
        self._params: Dict[str, Tensor] = {}
        for path, value in (params or {}).items():
            self[path] = value

    def __setitem__(self, path: str, value):
        data = value.data if isinstance(value, Tensor) else value
        self._params[path] = Tensor(np.array(data, dtype=np.float64), requires_grad=True)

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path):
        return path in self._params

    def __len__(self):
        return len(self._params)

    def paths(self, prefix: str = "") -> List[str]:
        return sorted(p for p in self._params if p.startswith(prefix))

    def items(self):
        for p in self.paths():
            yield p, self._params[p]

    def size(self, paths: Optional[Iterable[str]] = None) -> int:
        paths = self.paths() if paths is None else paths
        return sum(self._params[p].size for p in paths)

    def flatten(self, paths: Optional[Iterable[str]] = None) -> np.ndarray:
        paths = self.paths() if paths is None else sorted(paths)
        if not paths:
            return np.zeros(0)
        return np.concatenate([self._params[p].data.reshape(-1) for p in paths])

    def unflatten(self, flat: np.ndarray, paths: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
        paths = self.paths() if paths is None else sorted(paths)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size(paths):
            raise ValueError(f"unflatten: expected {self.size(paths)} values, got {flat.size}")
        out, i = {}, 0
        for p in paths:
            shape = self._params[p].shape
            n = int(np.prod(shape, dtype=np.int64))
            out[p] = flat[i:i + n].reshape(shape).copy()
            i += n
        return out

    def load_flat(self, flat: np.ndarray, paths: Optional[Iterable[str]] = None):
        for p, v in self.unflatten(flat, paths).items():
            self._params[p].data = v

    def copy(self) -> "ParameterStore":
        return ParameterStore({p: t.data.copy() for p, t in self._params.items()})

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for p, t in self.items():
            h.update(p.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def flatten_grads(grads: Dict[str, Tensor], paths: Sequence[str]) -> np.ndarray:
    paths = sorted(paths)
    if not paths:
        return np.zeros(0)
    return np.concatenate([grads[p].data.reshape(-1) for p in paths])


# --------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_check(
    f: Callable[[ParameterStore], Tensor],
    params: ParameterStore,
    epsilon: float = 1e-5,
    analytic: Optional[Dict[str, np.ndarray]] = None,
) -> float:
    """Max over all parameter entries of |analytic - central| / max(1, |central|).

    ``analytic`` defaults to reverse-mode gradients of ``f``; pass a dict to
    check some other derivative (e.g. of a penalty built from gradients).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")

    def value() -> float:
        with no_record():
            return f(params).item()

    if value() != value():
        raise OracleInvalidError("f returned different values for identical parameters")

    if analytic is None:
        with Tape() as tape:
            out = f(params)
        analytic = {p: g.data for p, g in backward(tape, out, params).items()}

    worst = 0.0
    for path, t in params.items():
        flat = t.data.reshape(-1)
        an = np.asarray(analytic[path], dtype=np.float64).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            hi = value()
            flat[j] = orig - epsilon
            lo = value()
            flat[j] = orig
            fd = (hi - lo) / (2.0 * epsilon)
            err = abs(an[j] - fd) / max(1.0, abs(fd))
            if err > worst or math.isnan(err):
                worst = err
    return worst
