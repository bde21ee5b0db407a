"""Small dense networks with reverse-mode gradients.

The cost model, the policies, the DWBC discriminator and the T-REX reward model
are all :class:`MlpModel` instances.  Losses are written with :class:`Tensor`
operations; calling :func:`backward` on a scalar loss fills ``.grad`` of every
tensor that requires gradients.  Parameters live in one flat float64 vector so
the optimizer and the finite-difference checker work on plain arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError, TrainingError

HEADS = ("sigmoid", "softmax", "linear")

# Keeps the sigmoid head strictly inside (0, 1) even when tanh saturates.
SIGMOID_MARGIN = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An ndarray node in a dynamically built computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    @staticmethod
    def _result(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)

        def back(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._result(self.data + other.data, (self, other), back)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: self._accumulate(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def back(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._result(self.data * other.data, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a Tensor is not supported")
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        other = as_tensor(other)

        def back(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Tensor._result(self.data @ other.data, (self, other), back)

    # elementwise ----------------------------------------------------------
    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._result(y, (self,), lambda g: self._accumulate(g * (1.0 - y * y)))

    def exp(self):
        y = np.exp(self.data)
        return Tensor._result(y, (self,), lambda g: self._accumulate(g * y))

    def log(self):
        x = self.data
        return Tensor._result(np.log(x), (self,), lambda g: self._accumulate(g / x))

    def softplus(self):
        x = self.data
        y = np.logaddexp(0.0, x)
        return Tensor._result(y, (self,), lambda g: self._accumulate(g * _sigmoid(x)))

    def sigmoid(self):
        """Logistic squashing bounded to [SIGMOID_MARGIN, 1 - SIGMOID_MARGIN]."""
        t = np.tanh(0.5 * self.data)
        scale = 0.5 * (1.0 - 2.0 * SIGMOID_MARGIN)
        y = 0.5 + scale * t
        return Tensor._result(
            y, (self,), lambda g: self._accumulate(g * scale * 0.5 * (1.0 - t * t))
        )

    def clip(self, lo: float, hi: float):
        x = self.data
        inside = (x >= lo) & (x <= hi)
        return Tensor._result(np.clip(x, lo, hi), (self,), lambda g: self._accumulate(g * inside))

    def log_softmax(self):
        x = self.data
        shifted = x - x.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        y = shifted - lse
        p = np.exp(y)

        def back(g):
            self._accumulate(g - p * g.sum(axis=-1, keepdims=True))

        return Tensor._result(y, (self,), back)

    # reductions and indexing ---------------------------------------------
    def sum(self, axis=None):
        x_shape = self.shape

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, x_shape))

        return Tensor._result(self.data.sum(axis=axis), (self,), back)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) / n

    def take(self, idx):
        """Gather from a 1-D tensor; output has the shape of ``idx``."""
        if self.data.ndim != 1:
            raise ContractError("take expects a 1-D tensor")
        idx = np.asarray(idx)
        n = self.data.shape[0]

        def back(g):
            self._accumulate(np.bincount(idx.ravel(), weights=g.ravel(), minlength=n))

        return Tensor._result(self.data[idx], (self,), back)

    def pick(self, cols):
        """Row-wise selection ``x[i, cols[i]]`` of a 2-D tensor."""
        cols = np.asarray(cols)
        rows = np.arange(self.data.shape[0])
        x_shape = self.shape

        def back(g):
            full = np.zeros(x_shape)
            full[rows, cols] = g
            self._accumulate(full)

        return Tensor._result(self.data[rows, cols], (self,), back)

    def segment(self, start: int, stop: int, shape: tuple):
        """View of a contiguous slice of a 1-D tensor, reshaped."""
        n = self.data.shape[0]

        def back(g):
            full = np.zeros(n)
            full[start:stop] = g.ravel()
            self._accumulate(full)

        return Tensor._result(self.data[start:stop].reshape(shape), (self,), back)

    def reshape(self, *shape):
        x_shape = self.shape
        return Tensor._result(
            self.data.reshape(*shape), (self,), lambda g: self._accumulate(g.reshape(x_shape))
        )


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``loss`` through the recorded graph."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward requires a scalar loss tensor")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def value_and_grad(params: np.ndarray, loss_fn) -> tuple[float, np.ndarray]:
    """Evaluate ``loss_fn(theta)`` and its gradient w.r.t. the flat parameters."""
    theta = Tensor(params, requires_grad=True)
    loss = loss_fn(theta)
    backward(loss)
    grad = theta.grad if theta.grad is not None else np.zeros_like(params)
    return float(loss.data), grad


# ---------------------------------------------------------------------------
# models


@dataclass
class MlpModel:
    """Feed-forward network with tanh hidden units and a selectable head.

    ``linear_first`` turns the first layer into a plain linear projection (no
    activation), used for the optional input-embedding layer of the cost net.
    """

    layer_sizes: tuple
    head: str
    params: np.ndarray
    seed: int = 0
    linear_first: bool = False

    def __post_init__(self):
        self.layer_sizes = tuple(int(w) for w in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ContractError(f"bad layer sizes {self.layer_sizes}")
        if self.head not in HEADS:
            raise ContractError(f"unknown head {self.head!r}")
        if self.head in ("sigmoid", "linear") and self.layer_sizes[-1] != 1:
            raise ContractError(f"{self.head} head needs a single output unit")
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (num_params(self.layer_sizes),):
            raise ContractError(
                f"expected {num_params(self.layer_sizes)} parameters, got {self.params.shape}"
            )

    @classmethod
    def create(cls, layer_sizes, head="sigmoid", seed=0, linear_first=False, zero_output=True):
        """Glorot-uniform weights, zero biases; zero output layer by default."""
        rng = np.random.default_rng(seed)
        sizes = tuple(int(w) for w in layer_sizes)
        chunks = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_output:
                w = np.zeros(fan_in * fan_out)
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, size=fan_in * fan_out)
            chunks += [w, np.zeros(fan_out)]
        return cls(sizes, head, np.concatenate(chunks), seed, linear_first)

    @classmethod
    def zeros(cls, layer_sizes, head="sigmoid"):
        return cls(tuple(layer_sizes), head, np.zeros(num_params(layer_sizes)))

    @property
    def num_params(self) -> int:
        return self.params.shape[0]

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    def copy(self, params=None) -> "MlpModel":
        p = self.params.copy() if params is None else np.asarray(params, dtype=np.float64)
        return MlpModel(self.layer_sizes, self.head, p, self.seed, self.linear_first)

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.input_size:
            raise ContractError(
                f"input width {x.shape[-1] if x.ndim else 0} != {self.input_size}"
            )
        return x

    def logits(self, x, theta: Tensor | None = None) -> Tensor:
        """Pre-head outputs, shape (n, out)."""
        x = self._check_input(x)
        if x.ndim == 1:
            x = x[None, :]
        if theta is None:
            theta = Tensor(self.params)
        h = Tensor(x)
        offset = 0
        n_layers = len(self.layer_sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            w = theta.segment(offset, offset + fan_in * fan_out, (fan_in, fan_out))
            offset += fan_in * fan_out
            b = theta.segment(offset, offset + fan_out, (fan_out,))
            offset += fan_out
            h = h @ w + b
            if i < n_layers - 1 and not (i == 0 and self.linear_first):
                h = h.tanh()
        return h

    def apply(self, x, theta: Tensor | None = None) -> Tensor:
        """Head outputs: (n,) for scalar heads, (n, k) probabilities for softmax."""
        z = self.logits(x, theta)
        if self.head == "softmax":
            return z.log_softmax().exp()
        z = z.reshape(-1)
        return z.sigmoid() if self.head == "sigmoid" else z

    def log_probs(self, x, theta: Tensor | None = None) -> Tensor:
        if self.head != "softmax":
            raise ContractError("log_probs needs a softmax head")
        return self.logits(x, theta).log_softmax()

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)


def num_params(layer_sizes) -> int:
    sizes = list(layer_sizes)
    return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


def forward(model: MlpModel, x) -> np.ndarray:
    """Evaluate ``model`` on one input vector or a batch of rows."""
    x = model._check_input(x)
    out = model.apply(x).data
    return out[0] if x.ndim == 1 else out


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    """Adam moments plus decoupled weight decay."""

    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)


def adam_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; weight decay applied after the moment step."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ContractError(f"params {params.shape} vs grads {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise TrainingError(f"non-finite gradient at optimizer step {state.step + 1}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    elif state.m.shape != params.shape:
        raise ContractError("optimizer moments do not match parameter length")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if state.weight_decay:
        new = new - state.lr * state.weight_decay * new
    return new


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def grad_check(params, loss_fn, n_coords: int | None = 64, step: float = 1e-5,
               seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps vanishing coordinates from dominating through round-off.
    """
    params = np.asarray(params, dtype=np.float64)
    _, analytic = value_and_grad(params, loss_fn)
    n = params.shape[0]
    if n_coords is None or n_coords >= n:
        idx = np.arange(n)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=n_coords, replace=False))

    def scalar(p):
        return float(loss_fn(Tensor(p)).data)

    numeric = np.empty(idx.shape[0])
    for j, i in enumerate(idx):
        plus = params.copy()
        plus[i] += step
        minus = params.copy()
        minus[i] -= step
        numeric[j] = (scalar(plus) - scalar(minus)) / (2.0 * step)
    a = analytic[idx]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    rel = np.abs(a - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradCheckReport(float(rel.max(initial=0.0)), int(idx[worst]) if rel.size else -1,
                           idx, a, numeric)


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then little-endian float64 parameters

_MAGIC = "safemil-mlp"


def save_checkpoint(path, model: MlpModel, step: int = 0, extra: dict | None = None) -> None:
    header = {
        "format": _MAGIC,
        "layer_sizes": list(model.layer_sizes),
        "head": model.head,
        "seed": model.seed,
        "linear_first": model.linear_first,
        "step": int(step),
        "num_params": model.num_params,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    Path(path).write_bytes(blob + model.params.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[MlpModel, dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ParseError("missing checkpoint header", path, 1)
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad checkpoint header: {exc}", path, 1) from None
    if header.get("format") != _MAGIC:
        raise ParseError("not a model checkpoint", path, 1)
    body = raw[nl + 1:]
    expected = int(header["num_params"]) * 8
    if len(body) != expected:
        raise ParseError(f"expected {expected} parameter bytes, found {len(body)}", path)
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    model = MlpModel(tuple(header["layer_sizes"]), header["head"], params,
                     header.get("seed", 0), header.get("linear_first", False))
    return model, header
