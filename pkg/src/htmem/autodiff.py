"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tape records operations in creation order (which is already a topological
order) and the gradient pass walks the node list once in reverse. Values are
float64 numpy arrays of any shape; a loss must be a scalar. Parameter arrays
are bound to a tape with ``Tape.watch`` so that repeated use of the same
array accumulates into a single gradient.

Also hosts the small-MLP container, the adaptive-moment optimizer, the
finite-difference gradient checker, and the binary checkpoint format shared
by every learned model in the package.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the expected model."""


# ---------------------------------------------------------------------------
# numpy helpers shared with inference-only code paths


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_np(x):
    return np.logaddexp(0.0, np.asarray(x, dtype=float))


def logsumexp_np(x, axis=-1):
    x = np.asarray(x, dtype=float)
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def derived_seed(*parts) -> int:
    """Stable integer seed derived from a tuple of ints/strings."""
    entropy = []
    for p in parts:
        if isinstance(p, str):
            entropy.extend(p.encode("utf-8"))
        else:
            entropy.append(int(p) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


# ---------------------------------------------------------------------------
# tape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    __slots__ = ("tape", "value", "parents", "vjp", "grad")

    def __init__(self, tape, value, parents=(), vjp=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_node(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"<Node shape={self.value.shape}>"


class Tape:
    """Single-owner, sequential record of operations for one backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._watched: dict[int, Node] = {}

    def leaf(self, value) -> Node:
        node = Node(self, np.asarray(value, dtype=float))
        self.nodes.append(node)
        return node

    def watch(self, array: np.ndarray) -> Node:
        """Bind a parameter array; repeat calls return the same node."""
        node = self._watched.get(id(array))
        if node is None:
            node = self.leaf(array)
            self._watched[id(array)] = node
        return node

    def _push(self, value, parents, vjp) -> Node:
        node = Node(self, value, parents, vjp)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> None:
        if loss.value.ndim != 0:
            raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.array(1.0)
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            for parent, g in zip(node.parents, node.vjp(node.grad)):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad = parent.grad + g

    def grad(self, array: np.ndarray) -> np.ndarray:
        """Gradient of the last backward pass w.r.t. a watched array."""
        node = self._watched.get(id(array))
        if node is None or node.grad is None:
            return np.zeros_like(np.asarray(array, dtype=float))
        return node.grad


def _as_node(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        return x
    return tape.leaf(x)


# ---------------------------------------------------------------------------
# ops


def add(a: Node, b) -> Node:
    b = _as_node(a.tape, b)
    value = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return a.tape._push(value, (a, b), vjp)


def sub(a: Node, b) -> Node:
    b = _as_node(a.tape, b)
    value = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return a.tape._push(value, (a, b), vjp)


def mul(a: Node, b) -> Node:
    b = _as_node(a.tape, b)
    value = a.value * b.value
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return a.tape._push(value, (a, b), vjp)


def neg(a: Node) -> Node:
    return a.tape._push(-a.value, (a,), lambda g: (-g,))


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    value = a.value @ b.value
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return a.tape._push(value, (a, b), vjp)


def transpose(a: Node) -> Node:
    return a.tape._push(a.value.T, (a,), lambda g: (g.T,))


def linear(x: Node, w: Node, b: Node) -> Node:
    """Affine layer x @ w.T + b for x of shape (batch, in)."""
    if x.value.ndim != 2 or x.value.shape[1] != w.value.shape[1]:
        raise ShapeError(
            f"linear: input {x.value.shape} incompatible with weight {w.value.shape}"
        )
    value = x.value @ w.value.T + b.value
    xv, wv = x.value, w.value

    def vjp(g):
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return x.tape._push(value, (x, w, b), vjp)


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.tape._push(a.value * mask, (a,), lambda g: (g * mask,))


def tanh(a: Node) -> Node:
    value = np.tanh(a.value)
    return a.tape._push(value, (a,), lambda g: (g * (1.0 - value * value),))


def exp(a: Node) -> Node:
    value = np.exp(a.value)
    return a.tape._push(value, (a,), lambda g: (g * value,))


def softplus(a: Node) -> Node:
    value = np.logaddexp(0.0, a.value)
    av = a.value
    return a.tape._push(value, (a,), lambda g: (g * sigmoid(av),))


def sum_all(a: Node) -> Node:
    shape = a.value.shape
    return a.tape._push(
        np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape),)
    )


def mean_all(a: Node) -> Node:
    shape = a.value.shape
    n = a.value.size
    return a.tape._push(
        np.asarray(a.value.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),)
    )


def sum_axis(a: Node, axis: int) -> Node:
    value = a.value.sum(axis=axis)
    ax = axis % a.value.ndim
    shape = a.value.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape),)

    return a.tape._push(value, (a,), vjp)


def logsumexp(a: Node) -> Node:
    """log-sum-exp over the last axis, computed stably."""
    m = np.max(a.value, axis=-1, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=-1, keepdims=True)
    value = np.squeeze(m + np.log(s), axis=-1)
    softmax = e / s

    def vjp(g):
        return (np.expand_dims(g, -1) * softmax,)

    return a.tape._push(value, (a,), vjp)


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    return a.tape._push(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def slice_cols(a: Node, start: int, stop: int) -> Node:
    value = a.value[..., start:stop]

    def vjp(g):
        out = np.zeros_like(a.value)
        out[..., start:stop] = g
        return (out,)

    return a.tape._push(value, (a,), vjp)


def concat_cols(a: Node, b) -> Node:
    b = _as_node(a.tape, b)
    value = np.concatenate([a.value, b.value], axis=-1)
    na = a.value.shape[-1]

    def vjp(g):
        return g[..., :na], g[..., na:]

    return a.tape._push(value, (a, b), vjp)


# ---------------------------------------------------------------------------
# MLP

ACTIVATIONS = ("relu", "tanh", "identity")
_ACT_TAPE = {"relu": relu, "tanh": tanh, "identity": lambda x: x}
_ACT_NP = {
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "identity": lambda x: x,
}


@dataclass
class MlpParams:
    """Dense MLP weights; hidden layers use ``activation``, output is linear."""

    weights: list  # each (out_dim, in_dim)
    biases: list  # each (out_dim,)
    activation: str = "relu"

    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )


def mlp_init(sizes, activation="relu", seed=0) -> MlpParams:
    """Uniform fan-in init for weights, zero biases."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation)


def mlp_apply(params: MlpParams, x, tape: Tape | None = None):
    """Forward pass. Accepts (in,) or (batch, in); mirrors the input rank.

    Without a tape this is a plain numpy evaluation; with a tape the pass is
    recorded and parameter gradients become available after ``backward`` via
    ``tape.grad(w)``.
    """
    squeeze = np.ndim(x if not isinstance(x, Node) else x.value) == 1
    act = params.activation
    n_layers = len(params.weights)
    if tape is None:
        h = np.atleast_2d(np.asarray(x, dtype=float))
        if h.shape[1] != params.weights[0].shape[1]:
            raise ShapeError(
                f"input dim {h.shape[1]} != first layer dim {params.weights[0].shape[1]}"
            )
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            h = h @ w.T + b
            if i < n_layers - 1:
                h = _ACT_NP[act](h)
        return h[0] if squeeze else h
    h = x if isinstance(x, Node) else tape.leaf(np.atleast_2d(np.asarray(x, float)))
    if h.value.ndim == 1:
        h = reshape(h, (1, -1))
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = linear(h, tape.watch(w), tape.watch(b))
        if i < n_layers - 1:
            h = _ACT_TAPE[act](h)
    if squeeze:
        h = reshape(h, (-1,))
    return h


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adaptive-moment accumulators mirroring one parameter list."""

    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> OptimizerState:
    return OptimizerState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(params, grads, state: OptimizerState) -> OptimizerState:
    """One bias-corrected update; parameter arrays are updated in place."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ShapeError("parameter/gradient/state lengths differ")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p[...] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    per_param: list
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(build_loss, params, delta=1e-5, tol=1e-4) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``build_loss(tape)`` must rebuild the loss deterministically and bind
    the arrays in ``params`` via ``tape.watch`` (model loss functions do).
    """
    tape = Tape()
    loss = build_loss(tape)
    tape.backward(loss)
    analytic = [tape.grad(p).copy() for p in params]

    per_param = []
    for arr, grad in zip(params, analytic):
        flat = arr.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + delta
            up = float(build_loss(Tape()).value)
            flat[i] = orig - delta
            down = float(build_loss(Tape()).value)
            flat[i] = orig
            fd[i] = (up - down) / (2.0 * delta)
        fd = fd.reshape(arr.shape)
        denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-3)
        per_param.append(float(np.max(np.abs(grad - fd) / denom)) if arr.size else 0.0)
    worst = max(per_param) if per_param else 0.0
    return GradCheckReport(per_param, worst, tol)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"HTMC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, kind: str, meta, arrays) -> None:
    """Write magic, version, 4-byte kind tag, u32 meta ints, then all arrays
    concatenated as little-endian float64 in the order given."""
    if len(kind) != 4:
        raise ValueError("model kind tag must be 4 characters")
    flat = np.concatenate([np.asarray(a, dtype=float).reshape(-1) for a in arrays])
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(kind.encode("ascii"))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(struct.pack(f"<{len(meta)}I", *[int(m) for m in meta]))
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path, expected_kind: str):
    """Read and validate a checkpoint; returns (meta list, flat float array)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    kind = raw[8:12].decode("ascii", errors="replace")
    if kind != expected_kind:
        raise CheckpointError(f"{path}: kind {kind!r}, expected {expected_kind!r}")
    (n_meta,) = struct.unpack_from("<I", raw, 12)
    off = 16
    meta = list(struct.unpack_from(f"<{n_meta}I", raw, off))
    off += 4 * n_meta
    (n_floats,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) - off != 8 * n_floats:
        raise CheckpointError(f"{path}: truncated or oversized float payload")
    flat = np.frombuffer(raw, dtype="<f8", count=n_floats, offset=off).astype(float)
    return meta, flat


def unpack_mlp(meta, flat, offset_meta, offset_flat, activation_codes=ACTIVATIONS):
    """Rebuild an MlpParams from checkpoint meta starting at ``offset_meta``.

    Meta layout: act_code, n_sizes, sizes...  Returns (params, next_meta
    offset, next_flat offset).
    """
    act = activation_codes[meta[offset_meta]]
    n_sizes = meta[offset_meta + 1]
    sizes = meta[offset_meta + 2 : offset_meta + 2 + n_sizes]
    weights, biases = [], []
    pos = offset_flat
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[pos : pos + fan_out * fan_in].reshape(fan_out, fan_in).copy())
        pos += fan_out * fan_in
        biases.append(flat[pos : pos + fan_out].copy())
        pos += fan_out
    return MlpParams(weights, biases, act), offset_meta + 2 + n_sizes, pos


def pack_mlp_meta(params: MlpParams, activation_codes=ACTIVATIONS):
    sizes = params.sizes()
    return [activation_codes.index(params.activation), len(sizes)] + sizes
