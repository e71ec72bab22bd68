"""
Tensor core

Dense numpy-backed tensors with reverse-mode automatic differentiation over
a dynamically recorded tape.

Recording is explicit: operations append nodes to the Graph that is active
in the current thread, and only when at least one input requires a
gradient. Outside a ``with Graph():`` block (or inside ``no_grad()``)
operations are plain numpy evaluations.

    with Graph() as graph:
        loss = (x * x).sum()
        graph.backward(loss)
    x.grad  # == 2 * x.data

The tape is freed by backward; a consumed graph cannot be replayed.

Features:
- Tensor arithmetic (+, -, *, unary -, sum, mean, reshape, concat) with
  numpy broadcasting and gradient un-broadcasting
- NaN/Inf in any forward result raises NonFiniteError
- tensor_new with constant, uniform and normal fills from an Rng stream
- finite_diff_check: central-difference gradient oracle
- TNSR1 little-endian tensor serialization and CKPT1 checkpoints

Example:
    x = tensor_new([3], Uniform(-1, 1), Rng(7), dtype=np.float64)
    error = finite_diff_check(lambda t: (t * t).sum(), x)
"""

import logging
import struct
import threading
from contextlib import contextmanager
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from coordconv_lab.rng import Rng

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
DTYPES = {'float32': np.float32, 'float64': np.float64}
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

TENSOR_MAGIC = b'TNSR1'
CHECKPOINT_MAGIC = b'CKPT1'


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf"""


class GraphError(RuntimeError):
    """Misuse of a recorded graph"""


class ShapeError(ValueError):
    """Extent or channel mismatch"""


class Uniform(NamedTuple):
    lo: float
    hi: float


class Normal(NamedTuple):
    mean: float
    std: float


Fill = Union[float, int, Uniform, Normal]


class Tensor:
    __slots__ = ('data', 'requires_grad', 'grad', 'name', '_node')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Tuple['Graph', int]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def node_index(self, graph: 'Graph') -> Optional[int]:
        if self._node is not None and self._node[0] is graph:
            return self._node[1]
        return None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # arithmetic

    def __add__(self, other):
        other = as_tensor(other, like=self)
        a, b = self, other

        def backward(g):
            return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

        return apply_op(a.data + b.data, (a, b), backward, 'add')

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other, like=self)
        a, b = self, other

        def backward(g):
            return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

        return apply_op(a.data - b.data, (a, b), backward, 'sub')

    def __rsub__(self, other):
        return as_tensor(other, like=self) - self

    def __mul__(self, other):
        other = as_tensor(other, like=self)
        a, b = self, other

        def backward(g):
            return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

        return apply_op(a.data * b.data, (a, b), backward, 'mul')

    __rmul__ = __mul__

    def __neg__(self):
        return apply_op(-self.data, (self,), lambda g: (-g,), 'neg')

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return apply_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, 'sum')

    def mean(self) -> 'Tensor':
        count = self.size
        shape = self.shape

        def backward(g):
            return (np.full(shape, g / count, dtype=g.dtype),)

        return apply_op(self.data.mean(), (self,), backward, 'mean')

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return apply_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),), 'reshape')


class Node:
    __slots__ = ('op', 'parents', 'parent_ids', 'backward')

    def __init__(self, op: str, parents, parent_ids, backward):
        self.op = op
        self.parents = parents
        self.parent_ids = parent_ids
        self.backward = backward


_local = threading.local()


def _stack() -> List[Optional['Graph']]:
    stack = getattr(_local, 'graphs', None)
    if stack is None:
        stack = _local.graphs = []
    return stack


def active_graph() -> Optional['Graph']:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording inside an active graph"""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Graph:
    """Append-only tape; parents always precede children"""

    def __init__(self):
        self.nodes: List[Node] = []
        self.consumed = False

    def __enter__(self) -> 'Graph':
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable, op: str):
        if self.consumed:
            raise GraphError("graph already consumed; record a new one")
        parent_ids = tuple(p.node_index(self) for p in parents)
        self.nodes.append(Node(op, tuple(parents), parent_ids, backward))
        out._node = (self, len(self.nodes) - 1)

    def backward(self, loss: Tensor):
        """Populate .grad on every requires_grad leaf reachable from loss"""
        if self.consumed:
            raise GraphError("graph already consumed; record a new one")
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        root = loss.node_index(self)
        if root is None:
            raise GraphError("loss was not produced by this graph")

        grads: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[root] = np.ones_like(loss.data)
        for index in range(root, -1, -1):
            g = grads[index]
            if g is None:
                continue
            grads[index] = None
            node = self.nodes[index]
            for parent, parent_id, parent_grad in zip(node.parents, node.parent_ids, node.backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent_id is not None:
                    grads[parent_id] = parent_grad if grads[parent_id] is None else grads[parent_id] + parent_grad
                elif parent.grad is None:
                    parent.grad = np.array(parent_grad, dtype=parent.dtype, copy=True)
                else:
                    parent.grad = parent.grad + parent_grad

        logger.debug(f"backward visited {root + 1} nodes")
        self.nodes = []
        self.consumed = True


def backward(loss: Tensor, graph: Graph):
    graph.backward(loss)


def check_finite(data: np.ndarray, op: str):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def apply_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap a forward result, recording it when a parent needs a gradient"""
    data = np.asarray(data)
    check_finite(data, op)
    graph = active_graph()
    needs_grad = graph is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        graph.record(out, parents, backward, op)
    return out


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return apply_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, 'concat')


def tensor_new(shape: Sequence[int], fill: Fill = 0.0, rng: Optional[Rng] = None,
               dtype=DEFAULT_DTYPE, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    """Create a tensor whose contents are a deterministic function of the rng state"""
    shape = tuple(int(extent) for extent in shape)
    if any(extent <= 0 for extent in shape):
        raise ShapeError(f"extents must be positive, got {list(shape)}")

    if isinstance(fill, Uniform):
        if rng is None:
            raise ValueError("uniform fill needs an rng")
        data = rng.uniform(shape, fill.lo, fill.hi, dtype=dtype)
    elif isinstance(fill, Normal):
        if fill.std < 0:
            raise ValueError(f"std must be >= 0, got {fill.std}")
        if rng is None:
            raise ValueError("normal fill needs an rng")
        data = rng.normal(shape, fill.mean, fill.std, dtype=dtype)
    elif isinstance(fill, (int, float)):
        data = np.full(shape, fill, dtype=dtype)
    else:
        raise ValueError(f"Unsupported fill: {fill!r}")

    return Tensor(data, requires_grad=requires_grad, name=name)


def _scalar_output(out) -> float:
    if not isinstance(out, Tensor) or out.size != 1:
        shape = out.shape if isinstance(out, Tensor) else type(out).__name__
        raise ValueError(f"finite_diff_check needs a scalar-valued function, got {shape}")
    value = out.item()
    if not np.isfinite(value):
        raise NonFiniteError("function under check produced a non-finite value")
    return value


def _default_step(value: float, dtype) -> float:
    if np.dtype(dtype) == np.float64:
        return 1e-5
    return 1e-3 * max(1.0, abs(value))


def finite_diff_check(f: Callable[..., Tensor], x: Union[Tensor, Sequence[Tensor]],
                      eps: Optional[float] = None, floor: float = 1e-8) -> float:
    """
    Max over elements of |analytic - numeric| / max(|analytic|, |numeric|, floor).

    f is called as f(*tensors) and must return a scalar Tensor; every tensor
    in x is checked.
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in tensors]
    try:
        for t in tensors:
            t.data = np.ascontiguousarray(t.data)
            t.requires_grad = True
            t.grad = None

        with Graph() as graph:
            out = f(*tensors)
            _scalar_output(out)
            graph.backward(out)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        worst = 0.0
        with no_grad():
            for t, grad in zip(tensors, analytic):
                flat = t.data.reshape(-1)
                flat_grad = grad.reshape(-1)
                for i in range(flat.size):
                    original = flat[i]
                    step = eps if eps is not None else _default_step(float(original), t.dtype)
                    flat[i] = original + step
                    upper = flat[i]
                    f_plus = _scalar_output(f(*tensors))
                    flat[i] = original - step
                    lower = flat[i]
                    f_minus = _scalar_output(f(*tensors))
                    flat[i] = original
                    numeric = (f_plus - f_minus) / float(upper - lower)
                    a = float(flat_grad[i])
                    error = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                    worst = max(worst, error)
        return worst
    finally:
        for t, (requires_grad, grad) in zip(tensors, saved):
            t.requires_grad = requires_grad
            t.grad = grad


# serialization

def write_tensor(f, value: Union[Tensor, np.ndarray]):
    """TNSR1 record: magic, u32 rank, u32 extents, u8 dtype code, raw little-endian data"""
    array = value.data if isinstance(value, Tensor) else np.asarray(value)
    code = DTYPE_CODES.get(array.dtype)
    if code is None:
        raise ValueError(f"Unsupported dtype for serialization: {array.dtype}")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack('<I', array.ndim))
    f.write(struct.pack(f'<{array.ndim}I', *array.shape))
    f.write(struct.pack('<B', code))
    f.write(array.astype(array.dtype.newbyteorder('<'), copy=False).tobytes(order='C'))


def _read_exact(f, count: int) -> bytes:
    chunk = f.read(count)
    if len(chunk) != count:
        raise ValueError(f"Truncated tensor record: wanted {count} bytes, got {len(chunk)}")
    return chunk


def read_tensor(f) -> Tensor:
    magic = _read_exact(f, len(TENSOR_MAGIC))
    if magic != TENSOR_MAGIC:
        raise ValueError(f"Bad tensor magic {magic!r}")
    (rank,) = struct.unpack('<I', _read_exact(f, 4))
    shape = struct.unpack(f'<{rank}I', _read_exact(f, 4 * rank))
    (code,) = struct.unpack('<B', _read_exact(f, 1))
    if code not in CODE_DTYPES:
        raise ValueError(f"Unknown dtype code {code}")
    dtype = CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(f, count * dtype.itemsize)
    data = np.frombuffer(raw, dtype=dtype.newbyteorder('<')).astype(dtype).reshape(shape)
    return Tensor(data)


def save_tensor(path: str, value: Union[Tensor, np.ndarray]):
    with open(path, 'wb') as f:
        write_tensor(f, value)


def load_tensor(path: str) -> Tensor:
    with open(path, 'rb') as f:
        return read_tensor(f)


def save_checkpoint(path: str, named: Dict[str, np.ndarray]):
    """CKPT1 magic, u32 count, then (u16 name length, UTF-8 name, TNSR1 record) per entry"""
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<I', len(named)))
        for name, value in named.items():
            encoded = name.encode('utf-8')
            f.write(struct.pack('<H', len(encoded)))
            f.write(encoded)
            write_tensor(f, value)


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    with open(path, 'rb') as f:
        magic = _read_exact(f, len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"Bad checkpoint magic {magic!r} in {path}")
        (count,) = struct.unpack('<I', _read_exact(f, 4))
        named = {}
        for _ in range(count):
            (length,) = struct.unpack('<H', _read_exact(f, 2))
            name = _read_exact(f, length).decode('utf-8')
            named[name] = read_tensor(f).data
    return named
