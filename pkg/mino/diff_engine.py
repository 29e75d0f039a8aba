"""
Reverse-mode differentiation and neural building blocks

A small tape-based autodiff over numpy arrays, sized to what the velocity
model needs, plus the layers built on it:

- ParamStore: one flat parameter vector with a matching gradient buffer and a
  registry of named slices. Layers declare their slices, the store is
  finalized once, and parameter tensors are views into it, so optimizers work
  on the flat arrays directly.
- Tensor: a value plus the closure that maps an output gradient to the
  gradients of its parents. `backward(loss)` walks the recorded graph in
  reverse topological order.
- Layers: linear, layer norm, MLP, conditioned multi-head cross-attention
  (adaptive layer norm with zero-initialized gates) and the GNO layer.

Arrays follow the [..., channels, sequence] layout: linear maps act on axis -2
and broadcast over everything before it.
"""

import logging
import os
import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .exceptions import GradientError, NumericalError, ShapeError
from .geometry import EdgeList, LatentGrid, PointSet

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
GELU_C = np.sqrt(2.0 / np.pi)

_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread"""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _debug_checks() -> bool:
    return os.getenv("MINO_DEBUG", "0") == "1"


class Tensor:
    """Array value with optional gradient tracking"""

    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward",
                 "_grad_sink", "_store", "name")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._grad_sink: Optional[np.ndarray] = None
        self._store: Optional["ParamStore"] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: Sequence[Tensor], backward: Callable,
          op: str) -> Tensor:
    if _debug_checks() and not np.all(np.isfinite(value)):
        raise NumericalError(f"Non-finite values produced by {op}")
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=track, name=op)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)), "mul")


def square(a: Tensor) -> Tensor:
    return _node(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,), "square")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting rules"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return _node(np.matmul(a.value, b.value), (a, b), backward, "matmul")


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    return _node(np.swapaxes(a.value, axis1, axis2), (a,),
                 lambda g: (np.swapaxes(g, axis1, axis2),), "swapaxes")


def broadcast_to(a, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _node(np.broadcast_to(a.value, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def concat(tensors: Sequence, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _node(np.concatenate([t.value for t in tensors], axis=axis), tensors, backward, "concat")


def take_slice(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """a[..., start:stop, ...] along one axis"""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(a.value)
        full[index] = g
        return (full,)

    return _node(a.value[index], (a,), backward, "slice")


def split(a: Tensor, n_chunks: int, axis: int) -> List[Tensor]:
    size = a.shape[axis]
    if size % n_chunks:
        raise ShapeError(f"Cannot split axis of size {size} into {n_chunks} chunks")
    step = size // n_chunks
    return [take_slice(a, i * step, (i + 1) * step, axis) for i in range(n_chunks)]


def sum_all(a: Tensor) -> Tensor:
    return _node(np.asarray(a.value.sum()), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size
    return _node(np.asarray(a.value.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean")


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over every entry"""
    return mean_all(square(sub(pred, target)))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation"""
    x = a.value
    inner = GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _node(out, (a,), backward, "gelu")


def silu(a: Tensor) -> Tensor:
    x = a.value
    sig = 1.0 / (1.0 + np.exp(-x))
    return _node(x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),), "silu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (a,), backward, "softmax")


def sparse_right_matmul(a: Tensor, matrix: sp.csr_matrix, matrix_t: Optional[sp.csr_matrix] = None) -> Tensor:
    """a[..., K] @ matrix[K, M] for a sparse constant matrix"""
    if a.shape[-1] != matrix.shape[0]:
        raise ShapeError(f"sparse matmul mismatch: {a.shape} @ {matrix.shape}")
    matrix_t = matrix.T.tocsr() if matrix_t is None else matrix_t
    lead = a.shape[:-1]
    flat = a.value.reshape(-1, matrix.shape[0])
    out = np.asarray(matrix_t.dot(flat.T)).T.reshape(lead + (matrix.shape[1],))

    def backward(g):
        g_flat = g.reshape(-1, matrix.shape[1])
        return (np.asarray(matrix.dot(g_flat.T)).T.reshape(a.shape),)

    return _node(out, (a,), backward, "sparse_matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    Columnwise affine map y = W x + b

    Args:
        x: [..., C_in, S]
        weight: [C_out, C_in]
        bias: [C_out]

    Returns:
        [..., C_out, S]
    """
    x = as_tensor(x)
    if x.ndim < 2 or weight.ndim != 2 or weight.shape[1] != x.shape[-2]:
        raise ShapeError(f"linear shape mismatch: weight {weight.shape} vs input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    W = weight.value
    out = np.matmul(W, x.value)
    if bias is not None:
        out = out + bias.value[:, None]

    def backward(g):
        gx = np.matmul(W.T, g)
        # leading batch axes and the sequence axis are all contracted
        g_flat = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
        x_flat = np.moveaxis(x.value, -2, 0).reshape(x.shape[-2], -1)
        gW = g_flat @ x_flat.T
        grads = [gx, gW]
        if bias is not None:
            grads.append(g.sum(axis=tuple(i for i in range(g.ndim) if i != g.ndim - 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "linear")


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """
    Normalize over channels (axis -2) at every sequence position

    Args:
        x: [..., C, S]
        gain, bias: Optional affine parameters [C]

    Returns:
        [..., C, S]
    """
    x = as_tensor(x)
    C = x.shape[-2]
    mu = x.value.mean(axis=-2, keepdims=True)
    centered = x.value - mu
    var = (centered ** 2).mean(axis=-2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat
    if gain is not None:
        out = out * gain.value[:, None]
    if bias is not None:
        out = out + bias.value[:, None]

    def backward(g):
        gxhat = g * gain.value[:, None] if gain is not None else g
        gx = inv_std / C * (C * gxhat - gxhat.sum(axis=-2, keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=-2, keepdims=True))
        grads = [gx]
        reduce_axes = tuple(i for i in range(g.ndim) if i != g.ndim - 2)
        if gain is not None:
            grads.append((g * xhat).sum(axis=reduce_axes))
        if bias is not None:
            grads.append(g.sum(axis=reduce_axes))
        return tuple(grads)

    parents = [x] + [p for p in (gain, bias) if p is not None]
    return _node(out, parents, backward, "layer_norm")


def backward(loss: Tensor) -> None:
    """
    Backpropagate a scalar loss into every ParamStore it touches

    Gradient buffers of those stores are zeroed first, so parameters the loss
    does not depend on end up with zero gradient.
    """
    if not isinstance(loss, Tensor) or loss.value.size != 1:
        raise GradientError("backward needs a scalar loss tensor")
    if not loss.requires_grad:
        raise GradientError("loss was not produced by a recorded forward pass")

    order: List[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    for store in {id(n._store): n._store for n in order if n._store is not None}.values():
        store.zero_grad()
    for node in order:
        if node._grad_sink is None and node._backward is None:
            node.grad = np.zeros_like(node.value)

    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_sink is not None:
            node._grad_sink += g
            continue
        if node._backward is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


@dataclass(frozen=True)
class ParamSlice:
    """Location of one named parameter in the flat vector"""
    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamStore:
    """
    Flat parameter vector with gradient buffer and named slices

    Parameters are declared with their initial values, then `finalize()`
    packs them into one contiguous array.
    """

    def __init__(self):
        self._slices: "OrderedDict[str, ParamSlice]" = OrderedDict()
        self._pending: List[np.ndarray] = []
        self._size = 0
        self.data = np.zeros(0)
        self.grad = np.zeros(0)
        self.finalized = False

    def declare(self, name: str, init: np.ndarray) -> None:
        if self.finalized:
            raise GradientError(f"Cannot declare {name!r} after the store is finalized")
        if name in self._slices:
            raise GradientError(f"Parameter {name!r} declared twice")
        init = np.asarray(init, dtype=np.float64)
        self._slices[name] = ParamSlice(name=name, offset=self._size, shape=init.shape)
        self._pending.append(init.ravel())
        self._size += init.size

    def finalize(self) -> "ParamStore":
        self.data = np.concatenate(self._pending) if self._pending else np.zeros(0)
        self.grad = np.zeros_like(self.data)
        self._pending = []
        self.finalized = True
        return self

    def __len__(self) -> int:
        return self._size

    def __contains__(self, name: str) -> bool:
        return name in self._slices

    @property
    def slices(self) -> List[ParamSlice]:
        return list(self._slices.values())

    def _slice(self, name: str) -> ParamSlice:
        if not self.finalized:
            raise GradientError("ParamStore used before finalize()")
        try:
            return self._slices[name]
        except KeyError:
            raise GradientError(f"Unknown parameter {name!r}")

    def value(self, name: str) -> np.ndarray:
        s = self._slice(name)
        return self.data[s.offset:s.offset + s.size].reshape(s.shape)

    def grad_of(self, name: str) -> np.ndarray:
        s = self._slice(name)
        return self.grad[s.offset:s.offset + s.size].reshape(s.shape)

    def tensor(self, name: str) -> Tensor:
        """Leaf tensor viewing the named parameter"""
        t = Tensor(self.value(name), requires_grad=True, name=name)
        t._grad_sink = self.grad_of(name)
        t._store = self
        return t

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def load_flat(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != self.data.shape:
            raise ShapeError(f"Expected {self.data.shape[0]} parameters, got {vector.shape}")
        if not np.all(np.isfinite(vector)):
            raise NumericalError("Refusing to load non-finite parameters")
        self.data[...] = vector


def check_gradients(loss_fn: Callable[[], Tensor], store: ParamStore, eps: float = 1e-5,
                    indices: Optional[Iterable[int]] = None, floor: float = 1e-6) -> float:
    """
    Compare backward() against central finite differences

    Args:
        loss_fn: Rebuilds the scalar loss from the store's current values
        store: Parameters to perturb
        eps: Finite-difference step
        indices: Flat parameter indices to check (all by default)
        floor: Magnitude below which errors are measured absolutely

    Returns:
        Max relative error |analytic - numeric| / max(|analytic|, |numeric|, floor)
    """
    backward(loss_fn())
    analytic = store.grad.copy()
    indices = range(len(store)) if indices is None else indices

    worst = 0.0
    for i in indices:
        original = store.data[i]
        store.data[i] = original + eps
        with no_grad():
            plus = float(loss_fn().value)
        store.data[i] = original - eps
        with no_grad():
            minus = float(loss_fn().value)
        store.data[i] = original
        numeric = (plus - minus) / (2.0 * eps)
        denom = max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


def _uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine layer over the channel axis"""

    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int,
                 rng: np.random.Generator, zero_init: bool = False):
        self.store = store
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        if zero_init:
            weight = np.zeros((out_channels, in_channels))
            bias = np.zeros(out_channels)
        else:
            weight = _uniform_init(rng, (out_channels, in_channels), in_channels)
            bias = _uniform_init(rng, (out_channels,), in_channels)
        store.declare(f"{name}.weight", weight)
        store.declare(f"{name}.bias", bias)

    @staticmethod
    def n_params(in_channels: int, out_channels: int) -> int:
        return out_channels * in_channels + out_channels

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.store.tensor(f"{self.name}.weight"),
                      self.store.tensor(f"{self.name}.bias"))


class LayerNorm:
    """Layer normalization with learned gain and bias"""

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.store = store
        self.name = name
        store.declare(f"{name}.gain", np.ones(channels))
        store.declare(f"{name}.bias", np.zeros(channels))

    @staticmethod
    def n_params(channels: int) -> int:
        return 2 * channels

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.store.tensor(f"{self.name}.gain"),
                          self.store.tensor(f"{self.name}.bias"))


class MLP:
    """Two-layer perceptron with GELU"""

    def __init__(self, store: ParamStore, name: str, in_channels: int, hidden: int,
                 out_channels: int, rng: np.random.Generator, zero_init_output: bool = False):
        self.fc1 = Linear(store, f"{name}.fc1", in_channels, hidden, rng)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, out_channels, rng, zero_init=zero_init_output)

    @staticmethod
    def n_params(in_channels: int, hidden: int, out_channels: int) -> int:
        return Linear.n_params(in_channels, hidden) + Linear.n_params(hidden, out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """x * (1 + scale) + shift"""
    return add(mul(x, add(scale, 1.0)), shift)


class AdaptiveModulation:
    """cond -> SiLU -> Linear -> n_chunks tensors of width `dim`, zero at init"""

    def __init__(self, store: ParamStore, name: str, cond_dim: int, dim: int, n_chunks: int,
                 rng: np.random.Generator, zero_init: bool = True):
        self.n_chunks = n_chunks
        self.proj = Linear(store, name, cond_dim, n_chunks * dim, rng, zero_init=zero_init)

    @staticmethod
    def n_params(cond_dim: int, dim: int, n_chunks: int) -> int:
        return Linear.n_params(cond_dim, n_chunks * dim)

    def __call__(self, cond: Tensor) -> List[Tensor]:
        cond = as_tensor(cond)
        column = reshape(cond, cond.shape + (1,))
        return split(self.proj(silu(column)), self.n_chunks, axis=-2)


@dataclass
class AttentionTrace:
    """Intermediate values of one attention call"""
    weights: np.ndarray
    context: np.ndarray


class CrossAttentionBlock:
    """
    Pre-norm multi-head cross-attention block conditioned on a vector

    Parameters: adaptive modulation (shift/scale/gate for the attention and
    MLP sub-blocks), q/k/v/output projections and a 4x wide MLP.
    """

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int, cond_dim: int,
                 rng: np.random.Generator, mlp_ratio: int = 4, zero_init_gates: bool = True):
        if dim % heads:
            raise ShapeError(f"Latent width {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.ada = AdaptiveModulation(store, f"{name}.ada", cond_dim, dim, 6, rng, zero_init_gates)
        self.q = Linear(store, f"{name}.q", dim, dim, rng)
        self.k = Linear(store, f"{name}.k", dim, dim, rng)
        self.v = Linear(store, f"{name}.v", dim, dim, rng)
        self.o = Linear(store, f"{name}.o", dim, dim, rng)
        self.mlp = MLP(store, f"{name}.mlp", dim, mlp_ratio * dim, dim, rng)

    @staticmethod
    def n_params(dim: int, cond_dim: int, mlp_ratio: int = 4) -> int:
        return (AdaptiveModulation.n_params(cond_dim, dim, 6) + 4 * Linear.n_params(dim, dim)
                + MLP.n_params(dim, mlp_ratio * dim, dim))

    def __call__(self, q_in: Tensor, kv_in: Tensor, cond: Tensor,
                 trace: Optional[List[AttentionTrace]] = None) -> Tensor:
        return mhca(q_in, kv_in, cond, self, trace)


def mhca(q_in: Tensor, kv_in: Tensor, cond: Tensor, block: CrossAttentionBlock,
         trace: Optional[List[AttentionTrace]] = None) -> Tensor:
    """
    Conditioned multi-head cross-attention

    Args:
        q_in: Queries [..., L, S_q]
        kv_in: Keys/values source [..., L, S_kv]
        cond: Conditioning vector [..., L_c]
        block: Parameters
        trace: When given, the attention weights and head context are appended

    Returns:
        [..., L, S_q]
    """
    q_in, kv_in = as_tensor(q_in), as_tensor(kv_in)
    L, H = block.dim, block.heads
    if q_in.shape[-2] != L or kv_in.shape[-2] != L:
        raise ShapeError(f"mhca expects width {L}, got {q_in.shape} and {kv_in.shape}")
    dh = L // H
    shift1, scale1, gate1, shift2, scale2, gate2 = block.ada(cond)

    x = modulate(layer_norm(q_in), shift1, scale1)
    q = block.q(x)
    k = block.k(kv_in)
    v = block.v(kv_in)
    q = reshape(q, q.shape[:-2] + (H, dh, q.shape[-1]))
    k = reshape(k, k.shape[:-2] + (H, dh, k.shape[-1]))
    v = reshape(v, v.shape[:-2] + (H, dh, v.shape[-1]))

    scores = mul(matmul(swapaxes(q, -1, -2), k), 1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1)
    context = matmul(v, swapaxes(weights, -1, -2))
    context = reshape(context, context.shape[:-3] + (L, context.shape[-1]))
    if trace is not None:
        trace.append(AttentionTrace(weights=weights.value, context=context.value))

    h = add(q_in, mul(gate1, block.o(context)))
    y = modulate(layer_norm(h), shift2, scale2)
    return add(h, mul(gate2, block.mlp(y)))


class EdgeOperators:
    """Sparse gather / mean-aggregate matrices of one EdgeList"""

    def __init__(self, edges: EdgeList):
        E = edges.n_edges
        query_idx = edges.pairs[:, 0]
        input_idx = edges.pairs[:, 1]
        ones = np.ones(E)
        self.gather = sp.csr_matrix((ones, (input_idx, np.arange(E))), shape=(edges.n_inputs, E))
        self.gather_t = self.gather.T.tocsr()
        weights = 1.0 / np.maximum(edges.degree[query_idx], 1) if E else ones
        self.aggregate = sp.csr_matrix((weights, (np.arange(E), query_idx)),
                                       shape=(E, edges.n_queries))
        self.aggregate_t = self.aggregate.T.tocsr()
        self.edges = edges


class GNOLayer:
    """Kernel-integral layer from input points to latent queries"""

    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int,
                 pos_dim: int, hidden: int, rng: np.random.Generator):
        self.pos_dim = pos_dim
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = MLP(store, f"{name}.kernel", 2 * pos_dim + in_channels, hidden, out_channels, rng)

    @staticmethod
    def n_params(in_channels: int, out_channels: int, pos_dim: int, hidden: int) -> int:
        return MLP.n_params(2 * pos_dim + in_channels, hidden, out_channels)

    def __call__(self, values: Tensor, input_pos: PointSet, query: LatentGrid, edges: EdgeList,
                 operators: Optional[EdgeOperators] = None) -> Tensor:
        return gno_layer(values, input_pos, query, edges, self, operators)


def gno_layer(values: Tensor, input_pos: PointSet, query: LatentGrid, edges: EdgeList,
              layer: GNOLayer, operators: Optional[EdgeOperators] = None) -> Tensor:
    """
    Mean-aggregated kernel integral over radius neighborhoods

    out[:, q] = mean over neighbors i of kappa(p_q, p_i, values[:, i]);
    queries without neighbors get a zero vector.

    Args:
        values: [..., C_in, N_in]
        input_pos: Positions of the N_in inputs
        query: Latent grid with N_node queries
        edges: Radius graph between the two

    Returns:
        [..., C_out, N_node]
    """
    values = as_tensor(values)
    if values.shape[-1] != input_pos.n_points or edges.n_inputs != input_pos.n_points:
        raise ShapeError(
            f"GNO got {values.shape[-1]} value columns for {input_pos.n_points} points "
            f"and an edge list over {edges.n_inputs}")
    lead = values.shape[:-2]
    if edges.n_edges == 0:
        return Tensor(np.zeros(lead + (layer.out_channels, query.n_nodes)))
    if edges.empty_queries:
        logger.debug(f"{edges.empty_queries} latent queries have no neighbors")

    operators = operators if operators is not None else EdgeOperators(edges)
    pair_pos = np.concatenate([query.query_positions[edges.pairs[:, 0]].T,
                               input_pos.positions[edges.pairs[:, 1]].T], axis=0)
    edge_values = sparse_right_matmul(values, operators.gather, operators.gather_t)
    features = concat([broadcast_to(pair_pos, lead + pair_pos.shape), edge_values], axis=-2)
    messages = layer.kernel(features)
    return sparse_right_matmul(messages, operators.aggregate, operators.aggregate_t)
