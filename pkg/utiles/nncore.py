# Minimal differentiable tensor stack on numpy: reverse-mode gradients, dense and
# LSTM layers, scaled dot-product attention, Adam and checkpoint files.
import contextlib
import json
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, log_expit, logsumexp as _logsumexp

from utiles.errors import NonFiniteGradientError

CHECKPOINT_VERSION = 1

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """Dense float64 array that records the operations producing it.

    Calling backward() on a scalar result fills `grad` on every tensor with
    requires_grad=True that the result depends on.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @staticmethod
    def _result(data, parents: tuple, backward: Callable) -> "Tensor":
        out = Tensor(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    # arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._result(a.data + b.data, (a, b),
                              lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._result(a.data - b.data, (a, b),
                              lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._result(a.data * b.data, (a, b),
                              lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._result(
            a.data / b.data, (a, b),
            lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        a = self
        return Tensor._result(a.data ** exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            if a.data.ndim == 2 and b.data.ndim == 1:
                return np.outer(g, b.data), a.data.T @ g
            if a.data.ndim == 1 and b.data.ndim == 2:
                return b.data @ g, np.outer(a.data, g)
            if a.data.ndim == 1 and b.data.ndim == 1:
                return g * b.data, g * a.data
            return g @ b.data.T, a.data.T @ g

        return Tensor._result(a.data @ b.data, (a, b), backward)

    def __getitem__(self, index):
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._result(a.data[index], (a,), backward)

    # shape

    @property
    def T(self):
        return Tensor._result(self.data.T, (self,), lambda g: (g.T,))

    def reshape(self, *shape):
        a = self
        return Tensor._result(a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    # reductions

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)

        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) / float(n)

    # autodiff

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.grad = np.array(grad, dtype=np.float64) if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64).reshape(parent.shape)
                else:
                    parent.grad = parent.grad + g
            # interior nodes are used once; release the graph as we go
            node._parents = ()
            node._backward = None


def _topological_order(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate gradients of every parameter reachable from the scalar loss."""
    loss.backward()


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# elementwise functions

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._result(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._result(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x: Tensor) -> Tensor:
    return Tensor._result(log_expit(x.data), (x,), lambda g: (g * expit(-x.data),))


def relu(x: Tensor) -> Tensor:
    return Tensor._result(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0.0),))


def softplus(x: Tensor) -> Tensor:
    return Tensor._result(np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                          lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return Tensor._result(np.stack([t.data for t in tensors]), tuple(tensors),
                          lambda g: tuple(g[i] for i in range(len(tensors))))


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    out = _logsumexp(x.data, axis=axis, keepdims=True)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(x.data - out),)

    return Tensor._result(out if keepdims else np.squeeze(out, axis=axis), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._result(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x - logsumexp(x, axis=axis, keepdims=True)


# layers

class Module:
    """Anything owning named parameter tensors."""

    def named_parameters(self) -> list:
        raise NotImplementedError

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Dense(Module):
    """Affine layer y = W x + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = parameter(glorot_uniform(rng, in_dim, out_dim, (out_dim, in_dim)))
        self.bias = parameter(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return self.weight @ x + self.bias

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class MLP(Module):
    """Stack of Dense layers with a nonlinearity between them (none after the last)."""

    def __init__(self, sizes, rng: np.random.Generator, activation: Callable = relu):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = tuple(sizes)
        self.activation = activation
        self.layers = [Dense(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return x

    def named_parameters(self):
        return [(f"layer{i}.{n}", p) for i, layer in enumerate(self.layers) for n, p in layer.named_parameters()]


@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor


class LSTMCell(Module):
    """Single LSTM cell; gate order in the stacked weights is input, forget, output, candidate."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        fan_in = input_dim + hidden_dim
        self.weight = parameter(glorot_uniform(rng, fan_in, 4 * hidden_dim, (4 * hidden_dim, fan_in)))
        bias = np.zeros(4 * hidden_dim)
        bias[hidden_dim:2 * hidden_dim] = 1.0
        self.bias = parameter(bias)

    def initial_state(self) -> LstmState:
        return LstmState(Tensor(np.zeros(self.hidden_dim)), Tensor(np.zeros(self.hidden_dim)))

    def __call__(self, x: Tensor, state: LstmState):
        return lstm_step(x, state, self)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


def lstm_step(x: Tensor, state: LstmState, params: LSTMCell):
    """Advance the LSTM one step; returns (output, new state)."""
    h = params.hidden_dim
    z = params.weight @ concat([x, state.hidden]) + params.bias
    input_gate = sigmoid(z[0:h])
    forget_gate = sigmoid(z[h:2 * h])
    output_gate = sigmoid(z[2 * h:3 * h])
    candidate = tanh(z[3 * h:])
    cell = forget_gate * state.cell + input_gate * candidate
    hidden = output_gate * tanh(cell)
    return hidden, LstmState(hidden, cell)


# attention

@dataclass
class AttentionSpec:
    num_queries: int = 4
    key_dim: int = 16
    value_dim: int = 8
    scale: Optional[float] = None

    def __post_init__(self):
        if min(self.num_queries, self.key_dim, self.value_dim) < 1:
            raise ValueError("attention needs at least one query and positive key/value sizes")
        if self.scale is None:
            self.scale = 1.0 / math.sqrt(self.key_dim)

    @property
    def output_dim(self) -> int:
        return self.num_queries * self.value_dim


def attention(queries: Tensor, keys: Tensor, values: Tensor, scale: float):
    """Scaled dot-product attention.

    queries (q, k), keys (l, k), values (l, v). Returns the flattened (q*v,)
    concatenation of per-query weighted value averages and the (q, l) weights.
    """
    scores = (queries @ keys.T) * scale
    weights = softmax(scores, axis=-1)
    output = (weights @ values).reshape(-1)
    return output, weights.data.copy()


# optimisation

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    # per-parameter step counts, parameters can appear after training started
    counts: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Apply one bias-corrected Adam update in place to every parameter with a gradient."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        t = state.counts.get(name, 0) + 1
        state.counts[name] = t
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class Adam:
    """Adam over a named parameter dict, reading gradients from each tensor's grad."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self, params: dict, lr: Optional[float] = None):
        grads = {name: p.grad for name, p in params.items()}
        adam_step(params, grads, self.state, self.lr if lr is None else lr, self.beta1, self.beta2, self.eps)

    def state_arrays(self) -> dict:
        arrays = {}
        for name in self.state.m:
            arrays[f"adam.m/{name}"] = self.state.m[name]
            arrays[f"adam.v/{name}"] = self.state.v[name]
        return arrays

    def load_state(self, arrays: dict, step: int, counts: dict):
        self.state = AdamState(step=step, counts=dict(counts))
        for key, value in arrays.items():
            if key.startswith("adam.m/"):
                self.state.m[key[len("adam.m/"):]] = np.array(value)
            elif key.startswith("adam.v/"):
                self.state.v[key[len("adam.v/"):]] = np.array(value)


def zero_grad(params) -> None:
    # None, not zeros: parameters a batch never touches are left out of the update
    for p in params:
        p.grad = None


def numerical_grad(fn: Callable[[], float], tensor: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of fn() with respect to every entry of tensor."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = fn()
        flat[i] = original - eps
        minus = fn()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * eps)
    return grad


# checkpoint container: one npz file, arrays stored positionally, names and
# metadata in a JSON string under "__metadata__"

def save_checkpoint(path: str, arrays: dict, metadata: dict) -> None:
    names = list(arrays)
    meta = dict(metadata)
    meta["format_version"] = CHECKPOINT_VERSION
    meta["array_names"] = names
    payload = {f"arr_{i}": np.asarray(arrays[name], dtype=np.float64) for i, name in enumerate(names)}
    payload["__metadata__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path: str):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__metadata__"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {meta.get('format_version')}")
        arrays = {name: np.array(data[f"arr_{i}"]) for i, name in enumerate(meta["array_names"])}
    return arrays, meta
