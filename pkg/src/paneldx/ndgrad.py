"""Minimal dense-network substrate with exact reverse-mode gradients.

A small tape-based autodiff over float64 numpy arrays, plus the dense
networks and optimizers shared by the encoder, classifier and policy.
Gradients are exact analytic derivatives of the recorded computation;
the test suite checks them against central finite differences.
"""

from __future__ import annotations

import json
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the shape of its source."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node of the recorded computation.

    Holds the primal value, the accumulated adjoint, and a closure that
    pushes the adjoint to its parents.  The graph of parents is the tape.
    """

    __slots__ = ("data", "grad", "_parents", "_push", "name")

    def __init__(self, data, parents: tuple = (), push: Callable | None = None,
                 name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._push = push
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._push is not None and node.grad is not None:
                node._push(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other: "Tensor | float") -> "Tensor":
        other = _wrap(other)
        out = Tensor(self.data + other.data, (self, other))

        def push(g):
            self._accum(_unbroadcast(g, self.shape))
            other._accum(_unbroadcast(g, other.shape))
        out._push = push
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, (self,))
        out._push = lambda g: self._accum(-g)
        return out

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return self + (-_wrap(other))

    def __rsub__(self, other: float) -> "Tensor":
        return _wrap(other) + (-self)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        other = _wrap(other)
        out = Tensor(self.data * other.data, (self, other))

        def push(g):
            self._accum(_unbroadcast(g * other.data, self.shape))
            other._accum(_unbroadcast(g * self.data, other.shape))
        out._push = push
        return out

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        other = _wrap(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ContractError(
                f"matmul shape mismatch: {a.shape} @ {b.shape}")
        out = Tensor(a @ b, (self, other))

        def push(g):
            self._accum(g @ b.T)
            other._accum(a.T @ g)
        out._push = push
        return out

    # -- elementwise nonlinearities ------------------------------------------

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        out = Tensor(y, (self,))
        out._push = lambda g: self._accum(g * (1.0 - y * y))
        return out

    def relu(self) -> "Tensor":
        y = np.maximum(self.data, 0.0)
        out = Tensor(y, (self,))
        out._push = lambda g: self._accum(g * (self.data > 0.0))
        return out

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        out = Tensor(y, (self,))
        out._push = lambda g: self._accum(g * y)
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), (self,))
        out._push = lambda g: self._accum(g / self.data)
        return out

    def square(self) -> "Tensor":
        out = Tensor(self.data * self.data, (self,))
        out._push = lambda g: self._accum(g * 2.0 * self.data)
        return out

    # -- reductions -----------------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def push(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.shape).copy())
        out._push = push
        return out

    def mean(self) -> "Tensor":
        n = self.data.size
        out = Tensor(self.data.mean(), (self,))
        out._push = lambda g: self._accum(np.broadcast_to(g / n, self.shape).copy())
        return out

    def clip(self, lo: float, hi: float) -> "Tensor":
        """Clip to constant bounds; gradient is zero outside the interval."""
        y = np.clip(self.data, lo, hi)
        inside = (self.data > lo) & (self.data < hi)
        out = Tensor(y, (self,))
        out._push = lambda g: self._accum(g * inside)
        return out


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def constant(x) -> Tensor:
    """Leaf tensor that never receives a gradient of interest."""
    return Tensor(np.asarray(x, dtype=np.float64))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; at ties the first argument carries the gradient."""
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data), (a, b))

    def push(g):
        a._accum(g * take_a)
        b._accum(g * ~take_a)
    out._push = push
    return out


def logsumexp_rows(x: Tensor) -> Tensor:
    """Row-wise log-sum-exp of a 2-D tensor, stabilized by a constant shift."""
    m = x.data.max(axis=1, keepdims=True)
    shifted = x + constant(-m)
    return (shifted.exp().sum(axis=1, keepdims=True)).log() + constant(m)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick one column per row of a 2-D tensor; returns shape (n, 1)."""
    onehot = np.zeros(x.shape)
    onehot[np.arange(x.shape[0]), index] = 1.0
    return (x * constant(onehot)).sum(axis=1, keepdims=True)


# -- dense networks -----------------------------------------------------------


class DenseNet:
    """Fully connected net: linear layers with tanh or relu hidden units.

    The output layer is linear.  Parameters are float64 and owned by the
    net; cloning copies them so snapshots stay frozen.
    """

    def __init__(self, widths: Sequence[int], activation: str = "relu",
                 rng: np.random.Generator | None = None):
        if len(widths) < 2:
            raise ContractError("DenseNet needs at least input and output widths")
        if activation not in ("relu", "tanh"):
            raise ContractError(f"unknown activation {activation!r}")
        self.widths = list(widths)
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            scale = np.sqrt(2.0 / fan_in) if activation == "relu" else np.sqrt(1.0 / fan_in)
            w = Tensor(rng.normal(0.0, scale, size=(fan_in, fan_out)),
                       name=f"layer{i}.W")
            b = Tensor(np.zeros(fan_out), name=f"layer{i}.b")
            self.weights.append(w)
            self.biases.append(b)

    @property
    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x: Tensor) -> Tensor:
        """Taped forward pass on a 2-D batch."""
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = h.tanh() if self.activation == "tanh" else h.relu()
        return h

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Inference-only forward pass, no tape."""
        h = np.asarray(x, dtype=np.float64)
        squeeze = h.ndim == 1
        if squeeze:
            h = h[None, :]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.tanh(h) if self.activation == "tanh" else np.maximum(h, 0.0)
        return h[0] if squeeze else h

    def clone(self) -> "DenseNet":
        dup = DenseNet.__new__(DenseNet)
        dup.widths = list(self.widths)
        dup.activation = self.activation
        dup.weights = [Tensor(w.data.copy(), name=w.name) for w in self.weights]
        dup.biases = [Tensor(b.data.copy(), name=b.name) for b in self.biases]
        return dup

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        arrays = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"{prefix}layer{i}.W"] = w.data
            arrays[f"{prefix}layer{i}.b"] = b.data
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w.data = np.asarray(arrays[f"{prefix}layer{i}.W"], dtype=np.float64)
            b.data = np.asarray(arrays[f"{prefix}layer{i}.b"], dtype=np.float64)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _check_finite(p: Tensor, idx: int) -> None:
    if p.grad is not None and not np.all(np.isfinite(p.grad)):
        name = p.name or f"param{idx}"
        raise NumericError(f"non-finite gradient in {name}")


class Sgd:
    """Plain gradient step, matching the classifier's update rule."""

    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for i, p in enumerate(self.params):
            _check_finite(p, i)
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    """Adaptive-moment update with bias correction."""

    def __init__(self, params: Sequence[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            _check_finite(p, i)
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- checkpoint container ------------------------------------------------------

_MAGIC = b"NDG1\n"


def save_arrays(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write a deterministic, exactly round-tripping parameter dump.

    Layout: magic, one JSON header line (array index + metadata), then the
    raw little-endian bytes of each array in header order.  Written via a
    temp file and rename so partial files never appear.
    """
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        blobs.append(arr.tobytes())
        entries.append({"name": name, "shape": list(arr.shape)})
    header = json.dumps({"arrays": entries, "meta": meta},
                        sort_keys=True, separators=(",", ":"))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(header.encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_arrays(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ContractError(f"{path}: not a parameter checkpoint")
        header = json.loads(fh.readline().decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arrays[entry["name"]] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    return arrays, header["meta"]


def finite_difference_grad(f: Callable[[], Tensor], params: Sequence[Tensor],
                           h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of a scalar-valued closure.

    Independent oracle for the reverse-mode pass: re-evaluates f with each
    parameter entry nudged by +/- h.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = g.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = float(f().data)
            flat[j] = orig - h
            dn = float(f().data)
            flat[j] = orig
            gflat[j] = (up - dn) / (2 * h)
        grads.append(g)
    return grads
