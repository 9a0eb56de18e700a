"""Minimal learned-function kernels with exact analytic gradients.

Everything runs on f64 numpy arrays through a small reverse-mode tape with a
fixed operator set (affine, relu, sigmoid, tanh, concat/slice, gather,
bilinear gather, elementwise arithmetic, reductions, smooth-l1).  Forward
passes build `Node` graphs; `Tape.backward` accumulates parameter gradients
into the owning `ParamStore`.  There is no broadcasting cleverness beyond
what the operators here need.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError, TrainingError

MAGIC = b"TLCKPT01"


@dataclass
class LstmState:
    """Recurrent carry (h, c) stored between frames as plain arrays."""

    hidden: np.ndarray
    cell: np.ndarray

    @staticmethod
    def zeros(dim: int) -> "LstmState":
        return LstmState(np.zeros(dim), np.zeros(dim))


# ===== reverse-mode tape =====


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "bwd", "needs_grad")

    def __init__(self, value, parents=(), bwd=None, needs_grad=False):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=float)
        self.grad: Optional[np.ndarray] = None
        self.parents: Tuple[Node, ...] = parents
        self.bwd: Optional[Callable[[np.ndarray], None]] = bwd
        self.needs_grad = needs_grad or any(p.needs_grad for p in parents)

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=float)
        else:
            self.grad += g

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return mul(self, other)


def constant(x) -> Node:
    return Node(np.asarray(x, dtype=float))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Node, b: Node) -> Node:
    out = Node(a.value + b.value, (a, b))

    def bwd(g):
        if a.needs_grad:
            a.add_grad(_unbroadcast(g, a.value.shape))
        if b.needs_grad:
            b.add_grad(_unbroadcast(g, b.value.shape))

    out.bwd = bwd
    return out


def sub(a: Node, b: Node) -> Node:
    out = Node(a.value - b.value, (a, b))

    def bwd(g):
        if a.needs_grad:
            a.add_grad(_unbroadcast(g, a.value.shape))
        if b.needs_grad:
            b.add_grad(_unbroadcast(-g, b.value.shape))

    out.bwd = bwd
    return out


def mul(a: Node, b: Node) -> Node:
    out = Node(a.value * b.value, (a, b))

    def bwd(g):
        if a.needs_grad:
            a.add_grad(_unbroadcast(g * b.value, a.value.shape))
        if b.needs_grad:
            b.add_grad(_unbroadcast(g * a.value, b.value.shape))

    out.bwd = bwd
    return out


def scale(a: Node, k: float) -> Node:
    out = Node(a.value * k, (a,))

    def bwd(g):
        if a.needs_grad:
            a.add_grad(g * k)

    out.bwd = bwd
    return out


def matmul(a: Node, b: Node) -> Node:
    if a.value.shape[-1] != b.value.shape[0]:
        raise ShapeError(f"matmul mismatch {a.value.shape} @ {b.value.shape}")
    out = Node(a.value @ b.value, (a, b))

    def bwd(g):
        if a.needs_grad:
            a.add_grad(g @ b.value.T)
        if b.needs_grad:
            if a.value.ndim == 1:
                b.add_grad(np.outer(a.value, g))
            else:
                b.add_grad(a.value.T @ g)

    out.bwd = bwd
    return out


def relu(a: Node) -> Node:
    mask = a.value > 0.0
    out = Node(np.where(mask, a.value, 0.0), (a,))

    def bwd(g):
        if a.needs_grad:
            a.add_grad(g * mask)

    out.bwd = bwd
    return out


def sigmoid(a: Node) -> Node:
    x = a.value
    y = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Node(y, (a,))

    def bwd(g):
        if a.needs_grad:
            a.add_grad(g * y * (1.0 - y))

    out.bwd = bwd
    return out


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    out = Node(y, (a,))

    def bwd(g):
        if a.needs_grad:
            a.add_grad(g * (1.0 - y * y))

    out.bwd = bwd
    return out


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    out = Node(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes))
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        for n, piece in zip(nodes, pieces):
            if n.needs_grad:
                n.add_grad(piece)

    out.bwd = bwd
    return out


def narrow(a: Node, start: int, length: int, axis: int = -1) -> Node:
    """Contiguous slice along one axis."""
    index = [slice(None)] * a.value.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Node(a.value[index], (a,))

    def bwd(g):
        if a.needs_grad:
            full = np.zeros_like(a.value)
            full[index] = g
            a.add_grad(full)

    out.bwd = bwd
    return out


def gather_rows(a: Node, idx: np.ndarray) -> Node:
    """Select rows of a 2-D (or elements of a 1-D) node by integer index."""
    out = Node(a.value[idx], (a,))

    def bwd(g):
        if a.needs_grad:
            full = np.zeros_like(a.value)
            np.add.at(full, idx, g)
            a.add_grad(full)

    out.bwd = bwd
    return out


def reshape(a: Node, shape: Tuple[int, ...]) -> Node:
    out = Node(a.value.reshape(shape), (a,))

    def bwd(g):
        if a.needs_grad:
            a.add_grad(g.reshape(a.value.shape))

    out.bwd = bwd
    return out


def nsum(a: Node) -> Node:
    out = Node(np.asarray(a.value.sum()), (a,))

    def bwd(g):
        if a.needs_grad:
            a.add_grad(np.full_like(a.value, float(g)))

    out.bwd = bwd
    return out


def nmean(a: Node) -> Node:
    n = a.value.size
    out = Node(np.asarray(a.value.mean()), (a,))

    def bwd(g):
        if a.needs_grad:
            a.add_grad(np.full_like(a.value, float(g) / n))

    out.bwd = bwd
    return out


def smooth_l1(a: Node) -> Node:
    """Elementwise smooth-l1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = a.value
    small = np.abs(x) < 1.0
    out = Node(np.where(small, 0.5 * x * x, np.abs(x) - 0.5), (a,))

    def bwd(g):
        if a.needs_grad:
            a.add_grad(g * np.where(small, x, np.sign(x)))

    out.bwd = bwd
    return out


def backward(root: Node) -> None:
    """Reverse accumulation from a scalar root."""
    if root.value.size != 1:
        raise ShapeError("backward requires a scalar root")
    topo: List[Node] = []
    seen = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.needs_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)


# ===== parameters =====


def _name_seed(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode()).digest()
    salt = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, salt]))


class ParamStore:
    """Named f64 tensors with gradients and Adam moments."""

    def __init__(self) -> None:
        self.values: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.adam_m: Dict[str, np.ndarray] = {}
        self.adam_v: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, shape: Tuple[int, ...], seed: int = 0,
            init: str = "uniform") -> None:
        if name in self.values:
            raise ValueError(f"duplicate parameter {name}")
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "uniform":
            # fan-in scaled uniform: a = sqrt(1 / fan_in)
            fan_in = shape[0] if len(shape) > 1 else max(1, shape[0])
            a = np.sqrt(1.0 / fan_in)
            value = _name_seed(seed, name).uniform(-a, a, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.values[name] = value
        self.grads[name] = np.zeros(shape)
        self.adam_m[name] = np.zeros(shape)
        self.adam_v[name] = np.zeros(shape)

    def names(self) -> List[str]:
        return list(self.values)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def n_params(self) -> int:
        return sum(v.size for v in self.values.values())


class Tape:
    """Per-evaluation cache of parameter leaf nodes.

    One tape per backward pass: create, run forwards through it, call
    `backward_into_store` on the scalar loss, discard.
    """

    def __init__(self, store: ParamStore):
        self.store = store
        self._leaves: Dict[str, Node] = {}

    def param(self, name: str) -> Node:
        node = self._leaves.get(name)
        if node is None:
            node = Node(self.store.values[name], needs_grad=True)
            self._leaves[name] = node
        return node

    def backward_into_store(self, loss: Node) -> None:
        backward(loss)
        for name, leaf in self._leaves.items():
            if leaf.grad is not None:
                self.store.grads[name] += leaf.grad


# ===== model kernels =====


def init_mlp(store: ParamStore, name: str, sizes: Sequence[int], seed: int = 0) -> None:
    """Register an MLP: len(sizes)-1 affine layers, relu between, final linear."""
    for k in range(len(sizes) - 1):
        store.add(f"{name}.w{k}", (sizes[k], sizes[k + 1]), seed=seed)
        store.add(f"{name}.b{k}", (sizes[k + 1],), seed=seed, init="zeros")


def mlp_forward(tape: Tape, name: str, x: Node) -> Node:
    """Run a registered MLP on a vector or a batch of row vectors."""
    k = 0
    while f"{name}.w{k}" in tape.store.values:
        w = tape.param(f"{name}.w{k}")
        if x.value.shape[-1] != w.value.shape[0]:
            raise ShapeError(
                f"{name} layer {k}: input width {x.value.shape[-1]} != {w.value.shape[0]}")
        x = add(matmul(x, w), tape.param(f"{name}.b{k}"))
        k += 1
        if f"{name}.w{k}" in tape.store.values:
            x = relu(x)
    if k == 0:
        raise ShapeError(f"no parameters registered under {name!r}")
    return x


def init_lstm(store: ParamStore, name: str, in_dim: int, hidden: int, seed: int = 0) -> None:
    """Register a standard LSTM cell; packed gate order is (i, f, o, g)."""
    store.add(f"{name}.w", (in_dim + hidden, 4 * hidden), seed=seed)
    store.add(f"{name}.b", (4 * hidden,), seed=seed, init="zeros")


def lstm_step(tape: Tape, name: str, x: Node, h: Node, c: Node) -> Tuple[Node, Node]:
    """One LSTM cell update; inputs may be single vectors or batched rows."""
    w = tape.param(f"{name}.w")
    hidden = w.value.shape[1] // 4
    z = add(matmul(concat([x, h], axis=-1), w), tape.param(f"{name}.b"))
    i = sigmoid(narrow(z, 0, hidden))
    f = sigmoid(narrow(z, hidden, hidden))
    o = sigmoid(narrow(z, 2 * hidden, hidden))
    g = tanh(narrow(z, 3 * hidden, hidden))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def lstm_apply(store: ParamStore, name: str,
               xs: Sequence[np.ndarray]) -> "LstmState":
    """Plain-numpy LSTM rollout from zero state over a feature sequence.

    Matches a chain of `lstm_step` calls bit for bit; used where the
    recurrent state must be recomputed from a stored window without
    building a graph.  The matmul runs on a single-row matrix and the
    sigmoid uses the same stable two-branch form as the graph ops so the
    floating-point paths are identical.
    """
    w = store.values[f"{name}.w"]
    b = store.values[f"{name}.b"]
    hidden = w.shape[1] // 4

    def sig(x):
        e = np.exp(-np.abs(x))
        return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))

    h = np.zeros(hidden)
    c = np.zeros(hidden)
    for x in xs:
        row = np.concatenate([np.asarray(x, dtype=float), h]).reshape(1, -1)
        z = (row @ w + b)[0]
        i = sig(z[:hidden])
        f = sig(z[hidden:2 * hidden])
        o = sig(z[2 * hidden:3 * hidden])
        g = np.tanh(z[3 * hidden:])
        c = f * c + i * g
        h = o * np.tanh(c)
    return LstmState(h, c)


def bilinear_interp(grid: Node, points: np.ndarray) -> Node:
    """Bilinear lookup on an (H, W, C) grid at continuous index coordinates.

    points: (k, 2) array of (row, col) float positions.  Queries outside the
    grid clamp to the border cell.  Gradients flow to the grid values.
    """
    values = grid.value
    h, w = values.shape[0], values.shape[1]
    pts = np.asarray(points, dtype=float)
    r = np.clip(pts[:, 0], 0.0, h - 1.0)
    col = np.clip(pts[:, 1], 0.0, w - 1.0)
    r0 = np.clip(np.floor(r).astype(int), 0, max(h - 2, 0))
    c0 = np.clip(np.floor(col).astype(int), 0, max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0)[:, None]
    fc = (col - c0)[:, None]
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    out_val = (w00 * values[r0, c0] + w01 * values[r0, c1]
               + w10 * values[r1, c0] + w11 * values[r1, c1])
    out = Node(out_val, (grid,))

    def bwd(g):
        if grid.needs_grad:
            full = np.zeros_like(values)
            np.add.at(full, (r0, c0), g * w00)
            np.add.at(full, (r0, c1), g * w01)
            np.add.at(full, (r1, c0), g * w10)
            np.add.at(full, (r1, c1), g * w11)
            grid.add_grad(full)

    out.bwd = bwd
    return out


# ===== optimization =====


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with bias correction; gradients are zeroed after."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.values[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        g[...] = 0.0


def grad_check(fn: Callable[[Tape], Node], store: ParamStore,
               h: float = 1e-5) -> Dict[str, float]:
    """Compare analytic gradients against central finite differences.

    `fn(tape)` must build a fresh scalar graph from the current store values
    on every call.  Returns max relative error per parameter tensor, where
    the error is |analytic - fd| / max(1, |analytic|, |fd|) elementwise.
    """
    store.zero_grads()
    tape = Tape(store)
    tape.backward_into_store(fn(tape))
    analytic = {name: store.grads[name].copy() for name in store.names()}
    store.zero_grads()

    report: Dict[str, float] = {}
    for name in store.names():
        value = store.values[name]
        fd = np.zeros_like(value)
        flat = value.ravel()
        fd_flat = fd.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = float(fn(Tape(store)).value)
            flat[idx] = orig - h
            down = float(fn(Tape(store)).value)
            flat[idx] = orig
            fd_flat[idx] = (up - down) / (2.0 * h)
        a = analytic[name]
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(fd)))
        report[name] = float(np.max(np.abs(a - fd) / denom)) if a.size else 0.0
    return report


# ===== checkpoint io =====


def save_checkpoint(store: ParamStore, path: str) -> None:
    """Write the byte format documented in docs/checkpoint.md."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        names = store.names()
        f.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode()
            value = store.values[name]
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", value.ndim))
            for d in value.shape:
                f.write(struct.pack("<I", d))
            f.write(value.astype("<f8").tobytes())
        f.write(struct.pack("<Q", store.step_count))
        for name in names:
            f.write(store.adam_m[name].astype("<f8").tobytes())
            f.write(store.adam_v[name].astype("<f8").tobytes())


def load_checkpoint(path: str) -> ParamStore:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise TrainingError(f"bad checkpoint magic in {path}")
    off = 8
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    store = ParamStore()
    shapes: List[Tuple[str, Tuple[int, ...]]] = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        value = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims).copy()
        off += 8 * n
        store.values[name] = value
        store.grads[name] = np.zeros(dims)
        shapes.append((name, dims))
    (store.step_count,) = struct.unpack_from("<Q", blob, off)
    off += 8
    for name, dims in shapes:
        n = int(np.prod(dims)) if dims else 1
        store.adam_m[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims).copy()
        off += 8 * n
        store.adam_v[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims).copy()
        off += 8 * n
    return store
