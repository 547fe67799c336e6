"""
Dense reverse-mode automatic differentiation on numpy arrays.

Ops record onto the innermost active Tape. Outside a tape they only compute
values, which is what evaluation and landscape probes use. Storage is
float32 by default; reductions and products accumulate in float64 and the
result is cast back to the storage precision.

    with Tape() as tape:
        loss = cross_entropy_mean(matmul(x, w), targets)
    grads = tape.backward(loss, [w])
"""

import contextlib
import enum
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import CompatibilityError, DataError, DimensionError, NumericError, StateError

MASK_FILL_VALUE = -1e9
RMS_EPS = 1e-5

_GELU_C = float(np.sqrt(2.0 / np.pi))


class OpKind(enum.Enum):
    MATMUL = "matmul"
    ADD = "add"
    SUB = "sub"
    MULTIPLY = "multiply"
    SCALE = "scale"
    SUM = "sum"
    EMBEDDING = "embedding_lookup"
    RMS_NORM = "rms_norm"
    SOFTMAX = "softmax"
    SILU = "silu"
    GELU = "gelu"
    RESHAPE = "reshape"
    TRANSPOSE = "transpose"
    CONCAT = "concat"
    SLICE = "slice"
    CAUSAL_MASK_FILL = "causal_mask_fill"
    CROSS_ENTROPY = "cross_entropy_mean"


# ---------------------------------------------------------------------------
# Storage precision
# ---------------------------------------------------------------------------

_DTYPE_STACK: List[type] = [np.float32]


def default_dtype():
    return _DTYPE_STACK[-1]


@contextlib.contextmanager
def precision(dtype):
    """Tensors created inside the block store *dtype* (float32 or float64)."""
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision: {dtype}")
    _DTYPE_STACK.append(dtype)
    try:
        yield
    finally:
        _DTYPE_STACK.pop()


# ---------------------------------------------------------------------------
# Tensors and tape
# ---------------------------------------------------------------------------

class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, _op: Optional[OpKind] = None):
        arr = np.array(data, dtype=default_dtype(), copy=True)
        if not np.isfinite(arr).all():
            where = _op.value if _op is not None else "input"
            raise NumericError(f"{where}: non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


class Parameter(Tensor):
    """A named leaf tensor that receives gradients."""
    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeNode:
    op: OpKind
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_ACTIVE_TAPES: List["Tape"] = []


class Tape:
    """
    Records ops in execution order (a topological order of the graph).
    A tape supports exactly one backward pass; it is cleared afterwards.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise StateError("tape already consumed by backward; open a new Tape for a new forward pass")
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.remove(self)
        return False

    def backward(self, loss: Tensor, params: Union[Iterable[Parameter], Mapping[str, Parameter]]) -> Dict[str, np.ndarray]:
        """
        Gradient of the scalar *loss* for every parameter in *params*.
        Parameters the loss does not depend on get zero gradients.
        """
        if self._consumed:
            raise StateError("backward called twice without a new forward pass")
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        plist = list(params.values()) if isinstance(params, Mapping) else list(params)

        grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise DimensionError(f"{node.op.value}: gradient shape {gi.shape} != input shape {inp.shape}")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        out: Dict[str, np.ndarray] = {}
        for p in plist:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros(p.shape, dtype=np.float64)
            p.grad = g.astype(p.data.dtype)
            out[p.name] = p.grad
        self.nodes = []
        self._consumed = True
        return out


def _active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _emit(op: OpKind, value: np.ndarray, inputs: Tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    out = Tensor(value, _op=op)
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    tape = _active_tape()
    if needs and tape is not None:
        tape.nodes.append(TapeNode(op, inputs, out, backward_fn))
    return out


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


def _broadcast_shape(op: OpKind, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op.value}: shapes {a.shape} and {b.shape} are not compatible") from None


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched a @ b over the last two axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} are not compatible") from None
    a64, b64 = _f64(a), _f64(b)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b64, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a64, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(OpKind.MATMUL, np.matmul(a64, b64), (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(OpKind.ADD, a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(OpKind.ADD, _f64(a) + _f64(b), (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(OpKind.SUB, a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(OpKind.SUB, _f64(a) - _f64(b), (a, b), backward)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(OpKind.MULTIPLY, a, b)
    a64, b64 = _f64(a), _f64(b)

    def backward(g):
        ga = _unbroadcast(g * b64, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a64, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(OpKind.MULTIPLY, a64 * b64, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _emit(OpKind.SCALE, _f64(a) * c, (a,), backward)


def reduce_sum(a: Tensor) -> Tensor:
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(g.reshape(()), shape).copy(),)

    return _emit(OpKind.SUM, np.asarray(_f64(a).sum()), (a,), backward)


def embedding_lookup(weight: Tensor, ids) -> Tensor:
    """Rows of *weight* (V, H) selected by integer *ids* of any shape."""
    idx = np.asarray(ids)
    if weight.data.ndim != 2:
        raise DimensionError(f"embedding_lookup: weight must be 2-D, got {weight.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise DataError(f"embedding_lookup: ids must be integers, got {idx.dtype}")
    bad = np.argwhere((idx < 0) | (idx >= weight.shape[0]))
    if bad.size:
        pos = tuple(int(v) for v in bad[0])
        raise DataError(f"embedding_lookup: id {int(idx[pos])} at position {pos} outside [0, {weight.shape[0]})")

    def backward(g):
        gw = np.zeros(weight.shape, dtype=np.float64)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _emit(OpKind.EMBEDDING, weight.data[idx], (weight,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    """x / rms(x) * gain over the last axis."""
    if gain.data.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise DimensionError(f"rms_norm: gain shape {gain.shape} does not match input shape {x.shape}")
    x64, g64 = _f64(x), _f64(gain)
    r = 1.0 / np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + eps)
    xhat = x64 * r

    def backward(g):
        dgain = (g * xhat).reshape(-1, gain.shape[0]).sum(axis=0)
        dxhat = g * g64
        dx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        return dx, dgain

    return _emit(OpKind.RMS_NORM, xhat * g64, (x, gain), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x64 = _f64(x)
    e = np.exp(x64 - x64.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(OpKind.SOFTMAX, y, (x,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def silu(x: Tensor) -> Tensor:
    x64 = _f64(x)
    s = _sigmoid(x64)

    def backward(g):
        return (g * s * (1.0 + x64 * (1.0 - s)),)

    return _emit(OpKind.SILU, x64 * s, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x64 = _f64(x)
    t = np.tanh(_GELU_C * (x64 + 0.044715 * x64 ** 3))

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x64 ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x64 * dt),)

    return _emit(OpKind.GELU, 0.5 * x64 * (1.0 + t), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return _emit(OpKind.RESHAPE, value, (x,), backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Axis permutation; default swaps the last two axes."""
    nd = x.data.ndim
    if axes is None:
        if nd < 2:
            raise DimensionError(f"transpose: need at least 2 axes, got shape {x.shape}")
        axes = list(range(nd - 2)) + [nd - 1, nd - 2]
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(nd)):
        raise DimensionError(f"transpose: axes {axes} are not a permutation for shape {x.shape}")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _emit(OpKind.TRANSPOSE, np.transpose(x.data, axes), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat: no tensors given")
    try:
        value = np.concatenate([_f64(t) for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(OpKind.CONCAT, value, tensors, backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """x[..., start:stop, ...] along *axis*."""
    axis = axis % x.data.ndim
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"slice: [{start}:{stop}] out of range for axis {axis} of shape {x.shape}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        gx[index] = g
        return (gx,)

    return _emit(OpKind.SLICE, x.data[index], (x,), backward)


def causal_mask_fill(scores: Tensor) -> Tensor:
    """Entries above the diagonal of the trailing (T, T) block become MASK_FILL_VALUE."""
    if scores.data.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise DimensionError(f"causal_mask_fill: trailing axes must be square, got {scores.shape}")
    t = scores.shape[-1]
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    value = np.where(future, MASK_FILL_VALUE, _f64(scores))

    def backward(g):
        return (np.where(future, 0.0, g),)

    return _emit(OpKind.CAUSAL_MASK_FILL, value, (scores,), backward)


def cross_entropy_mean(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer *targets* under softmax(*logits*)."""
    tgt = np.asarray(targets)
    if logits.data.ndim < 1 or tgt.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy_mean: logits {logits.shape} vs targets {tgt.shape}")
    n_classes = logits.shape[-1]
    bad = np.argwhere((tgt < 0) | (tgt >= n_classes))
    if bad.size:
        pos = tuple(int(v) for v in bad[0])
        raise DataError(f"cross_entropy_mean: target {int(tgt[pos])} at position {pos} outside [0, {n_classes})")
    z = _f64(logits).reshape(-1, n_classes)
    t = tgt.reshape(-1).astype(np.int64)
    n = z.shape[0]
    if n == 0:
        raise DimensionError("cross_entropy_mean: no positions to average over")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    lse = np.log(e.sum(axis=1)) + m[:, 0]
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, t]))

    def backward(g):
        p = e / e.sum(axis=1, keepdims=True)
        p[rows, t] -= 1.0
        return ((p * (float(g) / n)).reshape(logits.shape),)

    return _emit(OpKind.CROSS_ENTROPY, np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# Flat parameter layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def layout_digest(named_shapes: Iterable[Tuple[str, Tuple[int, ...]]]) -> int:
    """64-bit digest of parameter names, shapes and their order."""
    h = hashlib.blake2b(digest_size=8)
    for name, shape in named_shapes:
        h.update(f"{name}:{','.join(str(int(s)) for s in shape)};".encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class FlatParamLayout:
    """Canonical map from named parameter tensors to one flat vector of length d."""
    entries: Tuple[LayoutEntry, ...]
    d: int
    layout_hash: int
    _index: Dict[str, LayoutEntry] = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_named_shapes(cls, named_shapes: Sequence[Tuple[str, Sequence[int]]]) -> "FlatParamLayout":
        entries = []
        offset = 0
        seen = set()
        for name, shape in named_shapes:
            if name in seen:
                raise StateError(f"duplicate parameter name in layout: {name}")
            seen.add(name)
            shape = tuple(int(s) for s in shape)
            entry = LayoutEntry(name, shape, offset)
            entries.append(entry)
            offset += entry.size
        digest = layout_digest((e.name, e.shape) for e in entries)
        return cls(tuple(entries), offset, digest, {e.name: e for e in entries})

    @classmethod
    def from_params(cls, params: Sequence[Parameter]) -> "FlatParamLayout":
        return cls.from_named_shapes([(p.name, p.shape) for p in params])

    def entry(self, name: str) -> LayoutEntry:
        try:
            return self._index[name]
        except KeyError:
            raise StateError(f"parameter {name!r} not in layout") from None

    def span(self, name: str) -> slice:
        e = self.entry(name)
        return slice(e.offset, e.offset + e.size)

    def names(self) -> List[str]:
        return [e.name for e in self.entries]


def _ordered(params: Union[Sequence[Parameter], Mapping[str, Parameter]], layout: FlatParamLayout) -> List[Parameter]:
    plist = list(params.values()) if isinstance(params, Mapping) else list(params)
    digest = layout_digest((p.name, p.shape) for p in plist)
    if digest != layout.layout_hash:
        raise CompatibilityError(
            f"parameter set hash {digest:#018x} does not match layout hash {layout.layout_hash:#018x}"
        )
    return plist


def _flat_dtype(plist: List[Parameter]):
    return plist[0].data.dtype if plist else np.float32


def flatten_grads(params: Union[Sequence[Parameter], Mapping[str, Parameter]], layout: FlatParamLayout) -> np.ndarray:
    """Concatenate parameter gradients in layout order (signed; callers take abs)."""
    plist = _ordered(params, layout)
    out = np.empty(layout.d, dtype=_flat_dtype(plist))
    for p, e in zip(plist, layout.entries):
        if p.grad is None:
            raise StateError(f"parameter {p.name!r} has no gradient; run backward first")
        out[e.offset:e.offset + e.size] = p.grad.reshape(-1)
    return out


def flatten_params(params: Union[Sequence[Parameter], Mapping[str, Parameter]], layout: FlatParamLayout) -> np.ndarray:
    plist = _ordered(params, layout)
    out = np.empty(layout.d, dtype=_flat_dtype(plist))
    for p, e in zip(plist, layout.entries):
        out[e.offset:e.offset + e.size] = p.data.reshape(-1)
    return out


def load_flat(params: Union[Sequence[Parameter], Mapping[str, Parameter]], layout: FlatParamLayout, flat: np.ndarray):
    """Write a flat vector back into the parameter tensors."""
    plist = _ordered(params, layout)
    if flat.shape != (layout.d,):
        raise DimensionError(f"load_flat: vector shape {flat.shape} != ({layout.d},)")
    for p, e in zip(plist, layout.entries):
        p.data = flat[e.offset:e.offset + e.size].reshape(e.shape).astype(p.data.dtype, copy=True)
        p.grad = None
