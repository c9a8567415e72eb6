"""Reverse-mode automatic differentiation over dense float64 arrays.

Computation is recorded eagerly on a flat tape: every primitive appends a
node holding its op kind, input node ids, optional payload constants, and
the cached forward value. Node ids are topologically ordered by
construction, so the backward pass is a single reverse sweep.

The op set is intentionally small: what a few MLPs, quadratic losses, L1
penalties, and the trace-of-matrix-exponential acyclicity term need. All
values are float64; scalars are 0-d arrays.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = ["Tape", "Grad", "ShapeError", "GradCheckError", "grad_check", "OPS"]

# Truncation order of the power series used for trace(expm(M)). Exact for
# nilpotent M of index <= 12; adequate for the d <= 64 graphs handled here.
EXPM_TRACE_TERMS = 12


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class GradCheckError(RuntimeError):
    """Gradient verification encountered a non-finite value."""


def expm_trace(m: np.ndarray, terms: int = EXPM_TRACE_TERMS) -> float:
    """Truncated power series for trace(expm(m)): sum_k tr(m^k)/k!."""
    d = m.shape[0]
    acc = float(d)
    p = np.eye(d)
    for k in range(1, terms + 1):
        p = p @ m / k
        acc += float(np.trace(p))
    return acc


def _expm_trace_adjoint(m: np.ndarray, terms: int = EXPM_TRACE_TERMS) -> np.ndarray:
    # d/dM sum_{k<=K} tr(M^k)/k! = sum_{j<K} (M^T)^j / j!, the exact
    # derivative of the truncated forward series.
    d = m.shape[0]
    mt = m.T
    total = np.eye(d)
    s = np.eye(d)
    for j in range(1, terms):
        s = s @ mt / j
        total = total + s
    return total


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient g down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


class _Node:
    __slots__ = ("op", "inputs", "payload", "value")

    def __init__(self, op: str, inputs: tuple[int, ...], payload, value: np.ndarray):
        self.op = op
        self.inputs = inputs
        self.payload = payload
        self.value = value


def _fw_leaf(vals, payload):
    return vals[0]  # pragma: no cover - leaves never replay through here


def _fw_add(vals, payload):
    _check_broadcast("add", vals[0], vals[1])
    return vals[0] + vals[1]


def _fw_sub(vals, payload):
    _check_broadcast("sub", vals[0], vals[1])
    return vals[0] - vals[1]


def _fw_mul(vals, payload):
    _check_broadcast("mul", vals[0], vals[1])
    return vals[0] * vals[1]


def _fw_hadamard(vals, payload):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes {a.shape} and {b.shape} must match exactly")
    return a * b


def _fw_scale(vals, payload):
    return vals[0] * payload


def _fw_matmul(vals, payload):
    a, b = vals
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: ranks {a.ndim} and {b.ndim} unsupported")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape} do not agree")
    return a @ b


def _fw_tanh(vals, payload):
    return np.tanh(vals[0])


def _fw_sigmoid(vals, payload):
    x = vals[0]
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fw_relu(vals, payload):
    return np.maximum(vals[0], 0.0)


def _fw_abs(vals, payload):
    return np.abs(vals[0])


def _fw_square(vals, payload):
    return vals[0] * vals[0]


def _fw_sum(vals, payload):
    return np.asarray(vals[0].sum())


def _fw_mean(vals, payload):
    return np.asarray(vals[0].mean())


def _fw_concat(vals, payload):
    axis = payload
    ranks = {v.ndim for v in vals}
    if len(ranks) != 1:
        raise ShapeError(f"concat: mixed ranks {sorted(ranks)}")
    try:
        return np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[v.shape for v in vals]} on axis {axis}") from None


def _fw_slice(vals, payload):
    axis, start, stop = payload
    x = vals[0]
    if axis >= x.ndim or stop > x.shape[axis] or start < 0 or start >= stop:
        raise ShapeError(f"slice: window ({start}:{stop}) on axis {axis} of shape {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return x[tuple(idx)]


def _fw_expm_trace(vals, payload):
    m = vals[0]
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"matrix_exp_trace: input must be square, got {m.shape}")
    return np.asarray(expm_trace(m, payload))


def _bw_add(g, node, vals):
    return [_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)]


def _bw_sub(g, node, vals):
    return [_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)]


def _bw_mul(g, node, vals):
    return [_unbroadcast(g * vals[1], vals[0].shape), _unbroadcast(g * vals[0], vals[1].shape)]


def _bw_scale(g, node, vals):
    return [g * node.payload]


def _bw_matmul(g, node, vals):
    a, b = vals
    if a.ndim == 2 and b.ndim == 2:
        return [g @ b.T, a.T @ g]
    if a.ndim == 1 and b.ndim == 2:
        return [b @ g, np.outer(a, g)]
    if a.ndim == 2 and b.ndim == 1:
        return [np.outer(g, b), a.T @ g]
    return [g * b, g * a]  # vector . vector


def _bw_tanh(g, node, vals):
    return [g * (1.0 - node.value * node.value)]


def _bw_sigmoid(g, node, vals):
    return [g * node.value * (1.0 - node.value)]


def _bw_relu(g, node, vals):
    return [g * (vals[0] > 0.0)]


def _bw_abs(g, node, vals):
    return [g * np.sign(vals[0])]


def _bw_square(g, node, vals):
    return [g * 2.0 * vals[0]]


def _bw_sum(g, node, vals):
    return [np.broadcast_to(g, vals[0].shape)]


def _bw_mean(g, node, vals):
    x = vals[0]
    return [np.broadcast_to(g / x.size, x.shape)]


def _bw_concat(g, node, vals):
    axis = node.payload
    out = []
    offset = 0
    idx = [slice(None)] * g.ndim
    for v in vals:
        n = v.shape[axis]
        idx[axis] = slice(offset, offset + n)
        out.append(g[tuple(idx)])
        offset += n
    return out


def _bw_slice(g, node, vals):
    axis, start, stop = node.payload
    full = np.zeros_like(vals[0])
    idx = [slice(None)] * full.ndim
    idx[axis] = slice(start, stop)
    full[tuple(idx)] = g
    return [full]


def _bw_expm_trace(g, node, vals):
    return [float(g) * _expm_trace_adjoint(vals[0], node.payload)]


# op kind -> (forward, backward, arity); arity None means variadic.
OPS: dict[str, tuple[Callable, Callable | None, int | None]] = {
    "leaf": (_fw_leaf, None, 0),
    "add": (_fw_add, _bw_add, 2),
    "sub": (_fw_sub, _bw_sub, 2),
    "mul": (_fw_mul, _bw_mul, 2),
    "hadamard": (_fw_hadamard, _bw_mul, 2),
    "scale": (_fw_scale, _bw_scale, 1),
    "matmul": (_fw_matmul, _bw_matmul, 2),
    "tanh": (_fw_tanh, _bw_tanh, 1),
    "sigmoid": (_fw_sigmoid, _bw_sigmoid, 1),
    "relu": (_fw_relu, _bw_relu, 1),
    "abs": (_fw_abs, _bw_abs, 1),
    "square": (_fw_square, _bw_square, 1),
    "sum": (_fw_sum, _bw_sum, 1),
    "mean": (_fw_mean, _bw_mean, 1),
    "concat": (_fw_concat, _bw_concat, None),
    "slice": (_fw_slice, _bw_slice, 1),
    "matrix_exp_trace": (_fw_expm_trace, _bw_expm_trace, 1),
}


class Grad:
    """Adjoint buffers produced by a backward pass, indexable by node id.

    Nodes not on any path to the loss have exactly-zero adjoints.
    """

    def __init__(self, adjoints: list[np.ndarray]):
        self._adjoints = adjoints

    def wrt(self, node_id: int) -> np.ndarray:
        return self._adjoints[node_id]

    def __getitem__(self, node_id: int) -> np.ndarray:
        return self._adjoints[node_id]

    def __len__(self) -> int:
        return len(self._adjoints)


class Tape:
    """Append-only record of primitive ops with eagerly cached values.

    Single-owner during construction; once built, a tape is immutable as
    far as recorded values go and can be read from multiple threads.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, value) -> int:
        v = np.asarray(value, dtype=np.float64)
        self._nodes.append(_Node("leaf", (), None, v))
        return len(self._nodes) - 1

    def record(self, op_kind: str, inputs: Sequence[int], payload=None) -> int:
        """Append one primitive; computes and caches its value eagerly."""
        if op_kind not in OPS:
            raise ValueError(f"unknown op kind {op_kind!r}")
        if op_kind == "leaf":
            return self.leaf(payload)
        fw, _, arity = OPS[op_kind]
        ids = tuple(int(i) for i in inputs)
        n = len(self._nodes)
        for i in ids:
            if not 0 <= i < n:
                raise ValueError(f"{op_kind}: input node {i} not on tape")
        if arity is not None and len(ids) != arity:
            raise ShapeError(f"{op_kind}: expects {arity} inputs, got {len(ids)}")
        if arity is None and not ids:
            raise ShapeError(f"{op_kind}: expects at least one input")
        vals = [self._nodes[i].value for i in ids]
        value = np.asarray(fw(vals, payload), dtype=np.float64)
        self._nodes.append(_Node(op_kind, ids, payload, value))
        return len(self._nodes) - 1

    # Builder conveniences; all defer to record().
    def add(self, a: int, b: int) -> int:
        return self.record("add", (a, b))

    def sub(self, a: int, b: int) -> int:
        return self.record("sub", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self.record("mul", (a, b))

    def hadamard(self, a: int, b: int) -> int:
        return self.record("hadamard", (a, b))

    def scale(self, a: int, c: float) -> int:
        return self.record("scale", (a,), float(c))

    def matmul(self, a: int, b: int) -> int:
        return self.record("matmul", (a, b))

    def tanh(self, a: int) -> int:
        return self.record("tanh", (a,))

    def sigmoid(self, a: int) -> int:
        return self.record("sigmoid", (a,))

    def relu(self, a: int) -> int:
        return self.record("relu", (a,))

    def abs(self, a: int) -> int:
        return self.record("abs", (a,))

    def square(self, a: int) -> int:
        return self.record("square", (a,))

    def sum(self, a: int) -> int:
        return self.record("sum", (a,))

    def mean(self, a: int) -> int:
        return self.record("mean", (a,))

    def concat(self, parts: Sequence[int], axis: int = 0) -> int:
        return self.record("concat", tuple(parts), axis)

    def slice(self, a: int, start: int, stop: int, axis: int = 0) -> int:
        return self.record("slice", (a,), (axis, start, stop))

    def matrix_exp_trace(self, a: int, terms: int = EXPM_TRACE_TERMS) -> int:
        return self.record("matrix_exp_trace", (a,), terms)

    def value(self, node_id: int) -> np.ndarray:
        return self._nodes[node_id].value

    def scalar(self, node_id: int) -> float:
        return float(self._nodes[node_id].value)

    def backward(self, loss_id: int) -> Grad:
        """Reverse sweep from a scalar loss; returns adjoints for all nodes."""
        loss = self._nodes[loss_id]
        if loss.value.ndim != 0 and loss.value.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
        adjoints: list[np.ndarray] = [np.zeros_like(n.value) for n in self._nodes]
        adjoints[loss_id] = np.ones_like(loss.value)
        for nid in range(loss_id, -1, -1):
            node = self._nodes[nid]
            if node.op == "leaf":
                continue
            g = adjoints[nid]
            if not g.any():
                continue
            _, bw, _ = OPS[node.op]
            vals = [self._nodes[i].value for i in node.inputs]
            contribs = bw(g, node, vals)
            for i, c in zip(node.inputs, contribs):
                adjoints[i] = adjoints[i] + c
        return Grad(adjoints)

    def replay(self) -> list[np.ndarray]:
        """Recompute every non-leaf value from the leaves; bit-identical."""
        values: list[np.ndarray] = []
        for node in self._nodes:
            if node.op == "leaf":
                values.append(node.value)
            else:
                fw, _, _ = OPS[node.op]
                vals = [values[i] for i in node.inputs]
                values.append(np.asarray(fw(vals, node.payload), dtype=np.float64))
        return values


def grad_check(
    build: Callable[[Tape, list[int]], int],
    point: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients against central finite differences.

    `build` receives a fresh tape plus the leaf ids of `point` and returns
    the scalar loss node. Returns the max over all input coordinates of
    |analytic - numeric| / max(1, |numeric|).
    """
    arrays = [np.asarray(p, dtype=np.float64) for p in point]

    def evaluate(pt: list[np.ndarray]) -> float:
        tape = Tape()
        ids = [tape.leaf(a) for a in pt]
        return tape.scalar(build(tape, ids))

    tape = Tape()
    leaf_ids = [tape.leaf(a) for a in arrays]
    loss_id = build(tape, leaf_ids)
    grad = tape.backward(loss_id)

    worst = 0.0
    for k, base in enumerate(arrays):
        analytic = grad.wrt(leaf_ids[k])
        for idx in np.ndindex(base.shape if base.ndim else (1,)):
            pos = [a.copy() for a in arrays]
            neg = [a.copy() for a in arrays]
            if base.ndim:
                pos[k][idx] += eps
                neg[k][idx] -= eps
            else:
                pos[k] = base + eps
                neg[k] = base - eps
            numeric = (evaluate(pos) - evaluate(neg)) / (2.0 * eps)
            a_val = float(analytic[idx]) if base.ndim else float(analytic)
            if not np.isfinite(a_val) or not np.isfinite(numeric):
                raise GradCheckError(
                    f"non-finite gradient at input {k}, coordinate {idx}: "
                    f"analytic={a_val}, numeric={numeric}"
                )
            err = abs(a_val - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
