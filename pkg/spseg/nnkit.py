"""
Dense float64 tensors with reverse-mode differentiation.

Each operation returns a new ``Tensor`` that remembers its parents and a
backward rule mapping the output gradient to parent gradients. Calling
``backward()`` on a scalar walks the recorded graph in reverse
topological order. Gradients only accumulate on tensors that require them.
"""

import logging
import math
import os
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp

from .errors import CheckpointError, GradCheckError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """Dense array with an optional gradient record."""

    __slots__ = ('values', 'requires_grad', 'grad', '_parents', '_backward')

    def __init__(self, values: ArrayLike, requires_grad: bool = False,
                 _parents: Tuple['Tensor', ...] = (), _backward: Optional[Callable] = None):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float('nan')

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> 'Tensor':
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable tensor that requires grad."""
        if grad is None:
            if self.values.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.values)
        if not self.requires_grad:
            return

        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        pending: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor with a model-unique name."""

    __slots__ = ('name',)

    def __init__(self, name: str, values: ArrayLike):
        super().__init__(values, requires_grad=True)
        self.name = name

    def assign(self, values: np.ndarray) -> None:
        values = np.array(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ShapeError(f"{self.name}: cannot assign shape {values.shape} to {self.values.shape}")
        self.values = values

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(values, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'add')
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'sub')
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'mul')
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _make(x.values * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    on = x.values > 0
    return _make(np.where(on, x.values, 0.0), (x,), lambda g: (g * on,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.values)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.values)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


# shape and indexing

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.values.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}")
    return _make(out, (x,), lambda g: (g.reshape(old),))


def take_rows(x: Tensor, index) -> Tensor:
    """Rows ``x[index]``; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if len(index) and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {x.shape[0]} rows")

    def backward(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(x.values[index], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def segment_sum(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets; empty buckets are zero."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64).reshape(-1)
    if len(segment_ids) != x.shape[0]:
        raise ShapeError(f"segment_sum: {len(segment_ids)} ids for {x.shape[0]} rows")
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, segment_ids, x.values)
    return _make(out, (x,), lambda g: (g[segment_ids],))


def segment_max(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """
    Channel-wise max of the rows in each segment.

    Every segment must be non-empty. Tied maxima share the gradient evenly.
    """
    segment_ids = np.asarray(segment_ids, dtype=np.int64).reshape(-1)
    if len(segment_ids) != x.shape[0]:
        raise ShapeError(f"segment_max: {len(segment_ids)} ids for {x.shape[0]} rows")
    counts = np.bincount(segment_ids, minlength=num_segments)
    if len(counts) != num_segments or np.any(counts == 0):
        raise ShapeError("segment_max: every segment needs at least one row")

    order = np.argsort(segment_ids, kind='stable')
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    out = np.maximum.reduceat(x.values[order], starts, axis=0)

    def backward(g):
        hit = (x.values == out[segment_ids]).astype(np.float64)
        ties = np.zeros_like(out)
        np.add.at(ties, segment_ids, hit)
        return (hit * (g / ties)[segment_ids],)

    return _make(out, (x,), backward)


# reductions

def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _make(np.array(x.values.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = x.values.sum(axis=axis)
    return _make(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.values.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / count)


# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.values, b.values
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map y = xW + b over the rows of x."""
    if W.ndim != 2 or b.shape != (W.shape[1],):
        raise ShapeError(f"linear: weight {W.shape} and bias {b.shape} do not conform")
    if x.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")
    return add(matmul(x, W), b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (any axis of any rank)."""
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def softmax_lastdim(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs {len(targets)} targets")
    if len(targets) == 0:
        raise ShapeError("cross_entropy: empty batch")
    c = logits.shape[1]
    if targets.min() < 0 or targets.max() >= c:
        raise ShapeError(f"cross_entropy: target out of range [0, {c})")

    rows = np.arange(len(targets))
    lse = logsumexp(logits.values, axis=1)
    loss = float(np.mean(lse - logits.values[rows, targets]))

    def backward(g):
        p = np.exp(logits.values - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / len(targets)),)

    return _make(np.array(loss), (logits,), backward)


GRU_KEYS = ('w_z', 'u_z', 'b_z', 'w_r', 'u_r', 'b_r', 'w_n', 'u_n', 'b_n')


def gru_cell(h: Tensor, m: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """
    Gated update of state ``h`` with input ``m``.

    z = sigmoid(m W_z + h U_z + b_z), r = sigmoid(m W_r + h U_r + b_r),
    n = tanh(m W_n + (r * h) U_n + b_n), h' = (1 - z) * h + z * n.
    """
    if h.shape != m.shape:
        raise ShapeError(f"gru_cell: state {h.shape} and input {m.shape} differ")
    missing = [k for k in GRU_KEYS if k not in params]
    if missing:
        raise ShapeError(f"gru_cell: missing parameters {missing}")
    p = params
    z = sigmoid(add(add(matmul(m, p['w_z']), matmul(h, p['u_z'])), p['b_z']))
    r = sigmoid(add(add(matmul(m, p['w_r']), matmul(h, p['u_r'])), p['b_r']))
    n = tanh(add(add(matmul(m, p['w_n']), matmul(mul(r, h), p['u_n'])), p['b_n']))
    return add(mul(sub(1.0, z), h), mul(z, n))


# parameters

def init_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Mlp:
    """Stack of linear layers with ReLU between them (none after the last)."""

    def __init__(self, prefix: str, dims: Sequence[int], rng: np.random.Generator):
        if len(dims) < 2:
            raise ShapeError(f"{prefix}: an MLP needs at least input and output widths")
        self.prefix = prefix
        self.dims = tuple(int(d) for d in dims)
        self.layers: List[Tuple[Parameter, Parameter]] = []
        for k, (din, dout) in enumerate(zip(self.dims[:-1], self.dims[1:]), start=1):
            w = Parameter(f"{prefix}.w{k}", init_uniform(rng, (din, dout), din))
            b = Parameter(f"{prefix}.b{k}", init_uniform(rng, (dout,), din))
            self.layers.append((w, b))

    def __call__(self, x: Tensor) -> Tensor:
        for k, (w, b) in enumerate(self.layers):
            if k:
                x = relu(x)
            x = linear(x, w, b)
        return x

    def parameters(self) -> List[Parameter]:
        return [p for pair in self.layers for p in pair]


class ParamSet:
    """Ordered, name-unique collection of parameters."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: Dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise CheckpointError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def extend(self, params: Iterable[Parameter]) -> None:
        for p in params:
            self.add(p)

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def names(self) -> List[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self:
            p.grad = None

    def values(self) -> Dict[str, np.ndarray]:
        return {name: p.values for name, p in self._params.items()}

    def grads(self) -> Dict[str, Optional[np.ndarray]]:
        return {name: p.grad for name, p in self._params.items()}

    def assign(self, values: Mapping[str, np.ndarray]) -> None:
        for name, v in values.items():
            self._params[name].assign(v)


# optimization

class AdamState:
    """Step counter and first/second moment estimates keyed by parameter name."""

    def __init__(self, t: int = 0, m: Optional[Dict[str, np.ndarray]] = None,
                 v: Optional[Dict[str, np.ndarray]] = None):
        self.t = t
        self.m = dict(m or {})
        self.v = dict(v or {})


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, Optional[np.ndarray]],
              state: AdamState, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update.

    Missing or ``None`` gradients count as zero. Inputs are not modified;
    new parameter arrays and a new state are returned.
    """
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(t, new_m, new_v)


class Adam:
    """Adam optimizer bound to a parameter set."""

    def __init__(self, params: ParamSet, lr: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        new_values, self.state = adam_step(self.params.values(), self.params.grads(), self.state,
                                           self.lr, self.beta1, self.beta2, self.eps)
        self.params.assign(new_values)

    def zero_grad(self) -> None:
        self.params.zero_grad()


# gradient checking

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """
    Largest relative gap between reverse-mode and central-difference gradients.

    The relative error of one coordinate is |a - n| / max(|a|, |n|, 1e-8).
    Inputs that do not require grad are held fixed.
    """
    inputs = list(inputs)
    for x in inputs:
        x.grad = None
    out = f(*inputs)
    if out.values.size != 1:
        raise ShapeError(f"grad_check: f must be scalar, got shape {out.shape}")
    if not np.isfinite(out.values).all():
        raise GradCheckError("grad_check: f is not finite at the input")
    out.backward()

    worst = 0.0
    for x in inputs:
        if not x.requires_grad:
            continue
        analytic = np.zeros_like(x.values) if x.grad is None else x.grad.copy()
        if not np.isfinite(analytic).all():
            raise GradCheckError("grad_check: analytic gradient is not finite")
        base = x.values.copy()
        base_flat = base.reshape(-1)
        x.values = np.ascontiguousarray(base.copy())
        flat = x.values.reshape(-1)
        for k in range(flat.size):
            flat[k] = base_flat[k] + eps
            plus = f(*inputs).item()
            flat[k] = base_flat[k] - eps
            minus = f(*inputs).item()
            flat[k] = base_flat[k]
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise GradCheckError("grad_check: f is not finite near the input")
            numeric = (plus - minus) / (2.0 * eps)
            a = analytic.reshape(-1)[k]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
        x.values = base
    return worst


# checkpoints

def save_checkpoint(params: ParamSet, path: Union[str, os.PathLike],
                    meta: Optional[Mapping[str, Union[int, float, str]]] = None) -> None:
    """
    Text checkpoint: ``#key value`` header lines, then one line per parameter,
    ``name ndim d0 d1 ... v0 v1 ...`` with shortest round-trip floats.
    """
    lines = [f"#{key} {value}" for key, value in (meta or {}).items()]
    for p in params:
        dims = " ".join(str(d) for d in p.shape)
        vals = " ".join(repr(v) for v in p.values.reshape(-1).tolist())
        lines.append(f"{p.name} {p.ndim} {dims} {vals}")
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write("\n".join(lines) + "\n")


def read_checkpoint(path: Union[str, os.PathLike]) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    """Parse a checkpoint into (header metadata, arrays by name)."""
    meta: Dict[str, str] = {}
    arrays: Dict[str, np.ndarray] = {}
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            lines = handle.read().splitlines()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}")
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if line.startswith('#'):
            key, _, value = line[1:].partition(' ')
            meta[key] = value.strip()
            continue
        tokens = line.split()
        try:
            name, ndim = tokens[0], int(tokens[1])
            shape = tuple(int(t) for t in tokens[2:2 + ndim])
            values = np.array([float(t) for t in tokens[2 + ndim:]], dtype=np.float64)
            arrays[name] = values.reshape(shape)
        except (IndexError, ValueError):
            raise CheckpointError(f"{path}:{line_no}: malformed parameter line")
    return meta, arrays


def load_checkpoint(params: ParamSet, path: Union[str, os.PathLike]) -> Dict[str, str]:
    """Load values into ``params``; names and shapes must match exactly."""
    meta, arrays = read_checkpoint(path)
    missing = [n for n in params.names() if n not in arrays]
    extra = [n for n in arrays if n not in params.names()]
    if missing or extra:
        raise CheckpointError(f"checkpoint parameters differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for p in params:
        if arrays[p.name].shape != p.shape:
            raise CheckpointError(f"{p.name}: checkpoint shape {arrays[p.name].shape} != model shape {p.shape}")
        p.assign(arrays[p.name])
    logger.info(f"Loaded {len(params)} parameters from {path}")
    return meta
