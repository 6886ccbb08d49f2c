"""Differentiable numeric primitives with a minimal reverse-mode tape.

Everything the network needs is here: affine maps, a 2-layer MLP, a GRU
cell, batch normalization, column concatenation, and indexed neighborhood
aggregation. Gradients are produced by recording a small operation graph
per forward pass and walking it backwards; `grad_check` verifies any
scalar-valued composition against central finite differences.

This is deliberately not a general autodiff framework: only the operations
listed above are supported, all values are dense 1-D/2-D float arrays, and
math defaults to 64-bit so finite-difference checks are meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, DimensionError, NumericError

DEFAULT_DTYPE = np.float64

AGGREGATION_MODES = ("sum", "mean", "max")


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------


class Var:
    """A node in the differentiation graph: an ndarray plus backward plumbing.

    `parents` are the Vars this node was computed from and `vjp` maps the
    output gradient to gradients for each parent (None for non-differentiable
    slots). Leaves created directly from data have no parents.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None, requires_grad=None):
        self.value = np.asarray(value)
        self.grad = None
        self._parents = tuple(parents)
        self._vjp = vjp
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self._parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Param(Var):
    """A named trainable leaf. `grad` accumulates until `zero_grad`."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(np.asarray(value), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


def constant(value) -> Var:
    """Wrap data that gradients must not flow into (e.g. prior node states)."""
    return Var(value, requires_grad=False)


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar-valued `root` into every reachable leaf."""
    if root.value.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.value.shape}")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        parent_grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g.copy() if g.base is not None else g
            else:
                parent.grad = parent.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra operations
# ---------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    out = a.value + b.value
    return Var(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Var, b: Var) -> Var:
    out = a.value - b.value
    return Var(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Var, b: Var) -> Var:
    out = a.value * b.value
    return Var(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def scale(a: Var, s: float) -> Var:
    return Var(a.value * s, (a,), lambda g: (g * s,))


def matmul(a: Var, b: Var) -> Var:
    if a.value.shape[-1] != b.value.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.value.shape} vs {b.value.shape}")
    out = a.value @ b.value
    return Var(out, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def relu(x: Var) -> Var:
    mask = x.value > 0
    return Var(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Var) -> Var:
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return Var(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Var) -> Var:
    out = np.tanh(x.value)
    return Var(out, (x,), lambda g: (g * (1.0 - out * out),))


def concat_cols(parts: list[Var]) -> Var:
    rows = {p.value.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat needs equal row counts, got {sorted(rows)}")
    out = np.concatenate([p.value for p in parts], axis=1)
    widths = [p.value.shape[1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.hsplit(g, splits))

    return Var(out, tuple(parts), vjp)


def gather_rows(x: Var, index: np.ndarray) -> Var:
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= x.value.shape[0]):
        raise BoundsError(f"row index out of range [0, {x.value.shape[0]})")
    out = x.value[index]

    def vjp(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, index, g)
        return (gx,)

    return Var(out, (x,), vjp)


def mean_all(x: Var) -> Var:
    n = x.value.size
    return Var(np.asarray(x.value.mean()), (x,), lambda g: (np.full_like(x.value, float(g) / n),))


# ---------------------------------------------------------------------------
# Named model primitives
# ---------------------------------------------------------------------------


def affine(x: Var, w: Var, b: Var) -> Var:
    """x @ w.T + b, with w shaped (out_dim, in_dim) and b shaped (out_dim,).

    The transpose convention matches the usual linear-layer layout: each
    output column is a row of w applied to the input.
    """
    if x.value.shape[1] != w.value.shape[1]:
        raise DimensionError(
            f"affine input width {x.value.shape} does not match weight {w.value.shape}"
        )
    out = x.value @ w.value.T + b.value

    def vjp(g):
        return (g @ w.value, g.T @ x.value, g.sum(axis=0))

    return Var(out, (x, w, b), vjp)


def mlp2(x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var:
    """Two affine layers with a ReLU between them."""
    return affine(relu(affine(x, w1, b1)), w2, b2)


def gru_cell(h_prev: Var, x: Var, params: dict[str, Var]) -> Var:
    """Standard GRU gates merging a previous state with a fresh input.

        z = sigmoid(Wz [x, h] + bz)
        r = sigmoid(Wr [x, h] + br)
        n = tanh(Wn [x, r*h] + bn)
        h' = (1 - z) * n + z * h

    `params` holds wz/bz/wr/br/wn/bn with each weight shaped (d, dx + dh).
    """
    if h_prev.value.shape[0] != x.value.shape[0]:
        raise DimensionError(
            f"gru row counts differ: h_prev {h_prev.value.shape} vs x {x.value.shape}"
        )
    xh = concat_cols([x, h_prev])
    z = sigmoid(affine(xh, params["wz"], params["bz"]))
    r = sigmoid(affine(xh, params["wr"], params["br"]))
    n = tanh(affine(concat_cols([x, mul(r, h_prev)]), params["wn"], params["bn"]))
    one = constant(np.ones_like(z.value))
    return add(mul(sub(one, z), n), mul(z, h_prev))


@dataclass
class BatchNormStats:
    """Running statistics for one batch-norm site."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def zeros(cls, dim: int, momentum: float = 0.1, eps: float = 1e-5,
              dtype=DEFAULT_DTYPE) -> "BatchNormStats":
        return cls(np.zeros(dim, dtype=dtype), np.ones(dim, dtype=dtype), momentum, eps)

    def clone(self) -> "BatchNormStats":
        return BatchNormStats(
            self.running_mean.copy(), self.running_var.copy(), self.momentum, self.eps
        )

    def reset(self) -> None:
        self.running_mean[:] = 0.0
        self.running_var[:] = 1.0

    @property
    def n_elements(self) -> int:
        return self.running_mean.size + self.running_var.size


def batch_norm(x: Var, gamma: Var, beta: Var, stats: BatchNormStats, mode: str) -> Var:
    """Normalize columns of x by batch statistics (train) or running stats (eval).

    Train mode updates the running statistics in place (unbiased variance,
    torch-style momentum blend). Batches with fewer than 2 rows degrade to
    eval behavior so tiny snapshots never divide by a zero-count variance.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    n = x.value.shape[0]
    if mode == "train" and n >= 2:
        mu = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + stats.eps)
        xhat = (x.value - mu) * inv_std
        out = xhat * gamma.value + beta.value

        m = stats.momentum
        stats.running_mean[:] = (1.0 - m) * stats.running_mean + m * mu
        stats.running_var[:] = (1.0 - m) * stats.running_var + m * var * n / (n - 1)

        def vjp(g):
            dgamma = (g * xhat).sum(axis=0)
            dbeta = g.sum(axis=0)
            dxhat = g * gamma.value
            dx = (inv_std / n) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
            return (dx, dgamma, dbeta)

        return Var(out, (x, gamma, beta), vjp)

    inv_std = 1.0 / np.sqrt(stats.running_var + stats.eps)
    xhat = (x.value - stats.running_mean) * inv_std
    out = xhat * gamma.value + beta.value

    def vjp(g):
        return (g * gamma.value * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0))

    return Var(out, (x, gamma, beta), vjp)


def aggregate(messages: Var, dst_index: np.ndarray, n_nodes: int, mode: str) -> Var:
    """Reduce per-edge messages onto destination nodes.

    Row v of the output is the `mode`-reduction over messages whose
    dst_index is v; nodes with no incoming message get a zero row in every
    mode. Max ties route their gradient to the first maximal message so the
    backward pass is deterministic.
    """
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    dst_index = np.asarray(dst_index)
    n_msgs, dim = messages.value.shape
    if dst_index.shape[0] != n_msgs:
        raise DimensionError(
            f"dst_index length {dst_index.shape[0]} != message rows {n_msgs}"
        )
    if n_msgs and (dst_index.min() < 0 or dst_index.max() >= n_nodes):
        raise BoundsError(f"dst index out of range [0, {n_nodes})")

    if mode in ("sum", "mean"):
        out = np.zeros((n_nodes, dim), dtype=messages.value.dtype)
        np.add.at(out, dst_index, messages.value)
        counts = np.bincount(dst_index, minlength=n_nodes).astype(messages.value.dtype)
        if mode == "mean":
            denom = np.maximum(counts, 1.0)[:, None]
            out = out / denom

            def vjp(g):
                return ((g / denom)[dst_index],)

        else:

            def vjp(g):
                return (g[dst_index],)

        return Var(out, (messages,), vjp)

    # max: -inf init so every real message wins, then zero out empty rows
    out = np.full((n_nodes, dim), -np.inf, dtype=messages.value.dtype)
    if n_msgs:
        np.maximum.at(out, dst_index, messages.value)
    empty = np.bincount(dst_index, minlength=n_nodes) == 0
    out[empty] = 0.0

    # first maximal message per (node, column): smallest edge id among ties
    first = np.full((n_nodes, dim), n_msgs, dtype=np.int64)
    if n_msgs:
        ties = messages.value == out[dst_index]
        edge_ids = np.where(ties, np.arange(n_msgs, dtype=np.int64)[:, None], n_msgs)
        np.minimum.at(first, dst_index, edge_ids)

    def vjp(g):
        gm = np.zeros_like(messages.value)
        rows, cols = np.nonzero(first < n_msgs)
        gm[first[rows, cols], cols] += g[rows, cols]
        return (gm,)

    return Var(out, (messages,), vjp)


def bce_with_logits(scores: Var, labels: np.ndarray) -> Var:
    """Mean binary cross-entropy on raw logits, in the stable log1p(exp) form."""
    y = np.asarray(labels, dtype=scores.value.dtype)
    if y.shape != scores.value.shape:
        raise DimensionError(f"labels shape {y.shape} != scores shape {scores.value.shape}")
    if y.size == 0:
        raise NumericError("bce loss is undefined on empty input")
    s = scores.value
    per = np.maximum(s, 0.0) - s * y + np.log1p(np.exp(-np.abs(s)))
    out = np.asarray(per.mean())

    def vjp(g):
        p = np.empty_like(s)
        pos = s >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
        es = np.exp(s[~pos])
        p[~pos] = es / (1.0 + es)
        return (float(g) * (p - y) / y.size,)

    return Var(out, (scores,), vjp)


# ---------------------------------------------------------------------------
# Parameter collections and checkpointing
# ---------------------------------------------------------------------------


class ParamSet:
    """An ordered, name-keyed collection of Params."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def new(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def group(self, prefix: str) -> dict[str, Var]:
        """Sub-view keyed by the suffix after `prefix.`, e.g. group('upd.0')."""
        plen = len(prefix) + 1
        return {
            name[plen:]: p for name, p in self._params.items()
            if name.startswith(prefix + ".")
        }

    def zero_grad(self) -> None:
        for p in self:
            p.grad = None

    def n_elements(self) -> int:
        return sum(p.value.size for p in self)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise ValueError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, value in state.items():
            p = self._params[name]
            if p.value.shape != value.shape:
                raise DimensionError(
                    f"param {name}: shape {value.shape} != expected {p.value.shape}"
                )
            p.value = value.copy()

    def clone(self) -> "ParamSet":
        out = ParamSet()
        for name, p in self._params.items():
            out.new(name, p.value.copy())
        return out


CHECKPOINT_FORMAT = "snaplink-params-v1"


def save_params(path, arrays: dict[str, np.ndarray], extra_meta: dict | None = None) -> None:
    """Write a named flat map of arrays with a versioned header, bit-exact."""
    meta = {"format": CHECKPOINT_FORMAT}
    if extra_meta:
        meta.update(extra_meta)
    payload = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8)}
    for name, arr in arrays.items():
        payload["arr:" + name] = np.ascontiguousarray(arr)
    np.savez(path, **payload)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint written by `save_params`; returns (arrays, meta)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        arrays = {k[4:]: data[k].copy() for k in data.files if k.startswith("arr:")}
    return arrays, meta


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(f, wrt: list[Var], eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar-valued `f` against central differences.

    Returns the max over all checked entries of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    `f` must rebuild its graph from the current `.value` of each leaf on
    every call; leaves are perturbed in place and restored.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-4]")
    for v in wrt:
        v.grad = None
    out = f()
    if not np.isfinite(out.value).all():
        raise NumericError("non-finite value in forward pass")
    backward(out)
    analytic = [np.zeros_like(v.value) if v.grad is None else v.grad.copy() for v in wrt]

    max_rel = 0.0
    for v, ana in zip(wrt, analytic):
        for idx in np.ndindex(v.value.shape):
            orig = v.value[idx]
            v.value[idx] = orig + eps
            up = float(f().value)
            v.value[idx] = orig - eps
            down = float(f().value)
            v.value[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("non-finite value during finite differencing")
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(ana[idx]), abs(numeric), 1e-8)
            max_rel = max(max_rel, abs(ana[idx] - numeric) / denom)
    return max_rel
