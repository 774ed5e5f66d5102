"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives needed by the fusion block, the toy encoder-decoder
and the training losses are implemented. Every primitive records onto a
per-thread tape, so composite expressions (gating, multi-hop attention,
pooled contrastive embeddings) get exact gradients without hand-derived
chain rules. 64-bit floats throughout; desk scale makes the memory cost
irrelevant and keeps numerical checks tight.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    FileFormatError,
    NonFiniteError,
    ParameterError,
    ShapeError,
)

Array = np.ndarray


class Tensor:
    """A dense float64 array with optional gradient tracking.

    ``data`` is row-major; ``grad`` (same shape) is populated by
    :func:`backward` for every tensor with ``requires_grad``. Values are
    validated to be finite on construction: NaN/Inf anywhere is a
    contract violation, not a silent state.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size and not np.isfinite(arr).all():
            raise NonFiniteError("tensor values must be finite")
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def zeros(shape: Sequence[int] | int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape: Sequence[int] | int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# Tape machinery
# --------------------------------------------------------------------------

class _TapeNode:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Execution-ordered record of differentiable primitive applications.

    Forward execution order is a topological order of the data-flow
    graph, so walking the record backwards visits every node after all
    of its consumers: each node is processed exactly once.
    """

    def __init__(self):
        self.nodes: list[_TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


_LOCAL = threading.local()


def _state():
    if not hasattr(_LOCAL, "tape"):
        _LOCAL.tape = Tape()
        _LOCAL.grad_enabled = True
    return _LOCAL


def active_tape() -> Tape:
    """The calling thread's tape. Each thread gets an independent one."""
    return _state().tape


def reset_tape() -> None:
    _state().tape.clear()


@contextmanager
def no_grad():
    """Disable tape recording (evaluation / decoding paths)."""
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def _apply(arr: Array, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(arr)
    st = _state()
    if st.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        st.tape.nodes.append(_TapeNode(out, inputs, vjp))
    return out


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g: Array):
        return g @ b.data.T, a.data.T @ g

    return _apply(out, (a, b), vjp)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {x.shape}")

    def vjp(g: Array):
        return (g.T,)

    return _apply(x.data.T.copy(), (x,), vjp)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs identical shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _apply(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _apply(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def vjp(g: Array):
        return g * b.data, g * a.data

    return _apply(a.data * b.data, (a, b), vjp)


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Pointwise ``add``/``sub``/``mul`` dispatched by name."""
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[op]
    except KeyError:
        raise ParameterError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    c = float(c)

    def vjp(g: Array):
        return (g * c,)

    return _apply(x.data * c, (x,), vjp)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias to every row of a 2-D tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias mismatch: {x.shape} with bias {b.shape}")

    def vjp(g: Array):
        return g, g.sum(axis=0)

    return _apply(x.data + b.data[None, :], (x, b), vjp)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two 2-D tensors along the last axis."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("concat_last needs 2-D tensors")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_last leading dims disagree: {a.shape} vs {b.shape}")
    p = a.shape[1]

    def vjp(g: Array):
        return g[:, :p], g[:, p:]

    return _apply(np.concatenate([a.data, b.data], axis=1), (a, b), vjp)


def sigmoid(x: Tensor) -> Tensor:
    # Stable in both tails: exp of a non-positive argument only.
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def vjp(g: Array):
        return (g * out * (1.0 - out),)

    return _apply(out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def vjp(g: Array):
        return (g * mask,)

    return _apply(np.where(mask, x.data, 0.0), (x,), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilized by max subtraction."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    if x.shape[1] == 0:
        raise ShapeError("softmax_rows on empty rows")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g: Array):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _apply(out, (x,), vjp)


def row_logsumexp(x: Tensor) -> Tensor:
    """Per-row log-sum-exp of a 2-D tensor; returns a 1-D tensor."""
    if x.data.ndim != 2 or x.shape[1] == 0:
        raise ShapeError(f"row_logsumexp needs a non-empty 2-D tensor, got {x.shape}")
    m = x.data.max(axis=1, keepdims=True)
    out = (m + np.log(np.exp(x.data - m).sum(axis=1, keepdims=True))).reshape(-1)

    def vjp(g: Array):
        p = np.exp(x.data - out[:, None])
        return (p * g[:, None],)

    return _apply(out, (x,), vjp)


def gather_cols(x: Tensor, cols: Sequence[int]) -> Tensor:
    """Pick one column per row: ``out[i] = x[i, cols[i]]``."""
    if x.data.ndim != 2:
        raise ShapeError("gather_cols needs a 2-D tensor")
    idx = np.asarray(cols, dtype=np.intp)
    if idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_cols needs one index per row, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ContractError("gather_cols index out of range")
    rows = np.arange(x.shape[0])

    def vjp(g: Array):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _apply(x.data[rows, idx], (x,), vjp)


def take_diag(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"take_diag needs a square matrix, got {x.shape}")
    n = x.shape[0]

    def vjp(g: Array):
        gx = np.zeros_like(x.data)
        gx[np.arange(n), np.arange(n)] = g
        return (gx,)

    return _apply(np.diagonal(x.data).copy(), (x,), vjp)


def embed_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of an embedding table; gradients scatter-add back."""
    if table.data.ndim != 2:
        raise ShapeError("embed_rows needs a 2-D table")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("embed_rows needs a flat id list")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError("embed_rows id out of range")

    def vjp(g: Array):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _apply(table.data[idx], (table,), vjp)


def mean_rows(x: Tensor) -> Tensor:
    """Arithmetic mean over the rows of a 2-D tensor; returns 1-D."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows needs a 2-D tensor, got {x.shape}")
    m = x.shape[0]
    if m == 0:
        raise ShapeError("mean_rows over zero rows")

    def vjp(g: Array):
        return (np.broadcast_to(g / m, x.shape),)

    return _apply(x.data.mean(axis=0), (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    def vjp(g: Array):
        return (np.full(x.shape, float(g)),)

    return _apply(np.asarray(x.data.sum()), (x,), vjp)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeError("mean_all of an empty tensor")

    def vjp(g: Array):
        return (np.full(x.shape, float(g) / n),)

    return _apply(np.asarray(x.data.mean()), (x,), vjp)


def l2_normalize(v: Tensor) -> Tensor:
    """Scale a 1-D tensor to unit Euclidean length."""
    if v.data.ndim != 1:
        raise ShapeError(f"l2_normalize needs a 1-D tensor, got {v.shape}")
    norm = float(np.linalg.norm(v.data))
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    out = v.data / norm

    def vjp(g: Array):
        return ((g - out * float(g @ out)) / norm,)

    return _apply(out, (v,), vjp)


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack equal-length 1-D tensors into a matrix, one per row."""
    vs = list(vectors)
    if not vs:
        raise ShapeError("stack_rows of an empty sequence")
    width = vs[0].shape
    for v in vs:
        if v.data.ndim != 1 or v.shape != width:
            raise ShapeError("stack_rows needs equal-length 1-D tensors")

    def vjp(g: Array):
        return tuple(g[i] for i in range(len(vs)))

    return _apply(np.stack([v.data for v in vs], axis=0), tuple(vs), vjp)


# --------------------------------------------------------------------------
# Reverse pass and optimizer step
# --------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    Repeated calls without clearing grads accumulate, so the gradient of
    a sum of losses equals the sum of the separate passes.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    start = None
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i].out is loss:
            start = i
            break
    if start is None:
        if loss.requires_grad:
            # A bare parameter used directly as the loss.
            seed = np.ones(())
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        raise ContractError("loss was not produced on the active tape")

    pending: dict[int, Array] = {id(loss): np.ones(())}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes[: start + 1]):
        g = pending.get(id(node.out))
        if g is None:
            continue
        grads = node.vjp(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            k = id(inp)
            if k in pending:
                pending[k] = pending[k] + gi
            else:
                pending[k] = gi
                holders[k] = inp
    for k, g in pending.items():
        t = holders[k]
        g = np.array(g, dtype=np.float64)
        t.grad = g if t.grad is None else t.grad + g


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """Plain gradient step ``p <- p - lr * grad``; grads are cleared after.

    Every parameter must carry a gradient; a missing one means the
    forward/backward pass skipped it, which is a caller bug.
    """
    ps = list(params)
    for p in ps:
        if p.grad is None:
            raise ContractError("sgd_step: parameter has no gradient")
    for p in ps:
        p.data = p.data - lr * p.grad
        if p.data.size and not np.isfinite(p.data).all():
            raise NonFiniteError("parameter became non-finite during update")
        p.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# Serialization: `shape: d1 d2 ...` header then row-major values
# --------------------------------------------------------------------------

def format_float(v: float) -> str:
    """Shortest decimal that round-trips the exact float64 bits."""
    return repr(float(v))


def write_tensor_block(fh, t: Tensor) -> None:
    dims = " ".join(str(d) for d in t.shape)
    fh.write(f"shape: {dims}".rstrip() + "\n")
    data = t.data
    if data.ndim <= 1:
        fh.write(" ".join(format_float(v) for v in np.atleast_1d(data)) + "\n")
    elif data.ndim == 2:
        for row in data:
            fh.write(" ".join(format_float(v) for v in row) + "\n")
    else:
        raise ShapeError(f"cannot serialize tensor of rank {data.ndim}")


def _read_tensor_block(shape_line: str, lines) -> Tensor:
    if not shape_line.startswith("shape:"):
        raise FileFormatError(f"expected shape header, got {shape_line!r}")
    dims = [int(tok) for tok in shape_line[len("shape:"):].split()]
    if len(dims) > 2:
        raise FileFormatError("only rank <= 2 tensors are supported")
    nrows = dims[0] if len(dims) == 2 else 1
    values: list[float] = []
    for _ in range(nrows):
        try:
            row = next(lines)
        except StopIteration:
            raise FileFormatError("tensor file truncated") from None
        values.extend(float(tok) for tok in row.split())
    arr = np.asarray(values, dtype=np.float64)
    expected = int(np.prod(dims)) if dims else 1
    if arr.size != expected:
        raise FileFormatError(
            f"tensor has {arr.size} values but shape {dims} needs {expected}")
    return Tensor(arr.reshape(dims))


def save_tensor(t: Tensor, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_tensor_block(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "r", encoding="utf-8") as fh:
        lines = iter(fh.read().splitlines())
    try:
        first = next(lines)
    except StopIteration:
        raise FileFormatError(f"{path}: empty tensor file") from None
    return _read_tensor_block(first, lines)


def save_named_tensors(path, named: Mapping[str, Tensor]) -> None:
    """One file holding several tensors, one `tensor <name>` section each."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for name, t in named.items():
            if any(ch.isspace() for ch in name):
                raise ParameterError(f"tensor name {name!r} contains whitespace")
            fh.write(f"tensor {name}\n")
            write_tensor_block(fh, t)


def load_named_tensors(path) -> dict[str, Tensor]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = iter(fh.read().splitlines())
    return read_named_sections(lines)


def read_named_sections(lines) -> dict[str, Tensor]:
    """Parse consecutive `tensor <name>` sections from a line iterator."""
    named: dict[str, Tensor] = {}
    for line in lines:
        if not line.startswith("tensor "):
            raise FileFormatError(f"expected `tensor <name>`, got {line!r}")
        name = line[len("tensor "):].strip()
        if not name:
            raise FileFormatError("unnamed tensor section")
        if name in named:
            raise FileFormatError(f"duplicate tensor section {name!r}")
        try:
            shape_line = next(lines)
        except StopIteration:
            raise FileFormatError("tensor section truncated") from None
        named[name] = _read_tensor_block(shape_line, lines)
    return named
