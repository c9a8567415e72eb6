"""Core causal data model: blocked variable layout, time-indexed graphs,
regime-change detection, intervention surgery, and an exact linear-Gaussian
counterfactual used as a verification oracle.

Variables are partitioned into three blocks: interpretable market factors
(W), latent grid dynamics (I), and observables (V). Graphs are within-slice
weighted adjacencies over the stacked node set; lagged influence (state
memory, factor persistence) is carried by the mechanisms themselves and is
not subject to the acyclicity constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import expm_trace

__all__ = [
    "ValidationError",
    "DimsConfig",
    "TemporalGraph",
    "MechanismSet",
    "NoiseBlock",
    "Intervention",
    "InterventionSpec",
    "ClampPlan",
    "acyclicity_value",
    "is_dag",
    "is_regime_change",
    "apply_intervention",
    "LinearSCM",
    "linear_gaussian_counterfactual",
    "model_block_mask",
    "observed_block_mask",
]

DEFAULT_W_BLOCKS = (("weather", 8), ("generation", 8), ("demand", 6), ("market", 5))


class ValidationError(ValueError):
    """Invalid configuration, spec, or data shape."""


@dataclass(frozen=True)
class DimsConfig:
    """Block dimensions of the three-level variable set.

    The factor block W is further partitioned into named sub-blocks whose
    sizes must sum to d_W.
    """

    d_W: int = 27
    d_I: int = 64
    d_V: int = 35
    w_blocks: tuple[tuple[str, int], ...] = DEFAULT_W_BLOCKS

    def __post_init__(self):
        if min(self.d_W, self.d_I, self.d_V) < 1:
            raise ValidationError("all dims must be >= 1")
        total = sum(n for _, n in self.w_blocks)
        if total != self.d_W:
            raise ValidationError(f"w_blocks sum to {total}, expected d_W={self.d_W}")
        if any(n < 0 for _, n in self.w_blocks):
            raise ValidationError("block sizes must be nonnegative")

    @property
    def d(self) -> int:
        return self.d_W + self.d_I + self.d_V

    def block_of(self, w_index: int) -> str:
        """Name of the factor sub-block containing W coordinate w_index."""
        if not 0 <= w_index < self.d_W:
            raise ValidationError(f"factor index {w_index} outside [0, {self.d_W})")
        offset = 0
        for name, size in self.w_blocks:
            if w_index < offset + size:
                return name
            offset += size
        raise AssertionError("unreachable")

    def block_slices(self) -> dict[str, slice]:
        out, offset = {}, 0
        for name, size in self.w_blocks:
            out[name] = slice(offset, offset + size)
            offset += size
        return out

    # Node-index slices of the stacked (W, I, V) ordering.
    @property
    def w_slice(self) -> slice:
        return slice(0, self.d_W)

    @property
    def i_slice(self) -> slice:
        return slice(self.d_W, self.d_W + self.d_I)

    @property
    def v_slice(self) -> slice:
        return slice(self.d_W + self.d_I, self.d)


def model_block_mask(dims: DimsConfig) -> np.ndarray:
    """Permitted within-slice blocks over stacked (W, I, V) nodes.

    Factors may influence factors and dynamics, dynamics may influence
    dynamics and observables; observables influence nothing. Diagonal is
    always forbidden (self loops carry no meaning within a slice).
    """
    d = dims.d
    mask = np.zeros((d, d), dtype=bool)
    w, i, v = dims.w_slice, dims.i_slice, dims.v_slice
    mask[w, w] = True
    mask[w, i] = True
    mask[i, i] = True
    mask[i, v] = True
    np.fill_diagonal(mask, False)
    return mask


def observed_block_mask(d_W: int, d_V: int) -> np.ndarray:
    """Permitted blocks when only (W, V) nodes are observed: everything but
    observable-to-factor edges and self loops."""
    d = d_W + d_V
    mask = np.ones((d, d), dtype=bool)
    mask[d_W:, :d_W] = False
    np.fill_diagonal(mask, False)
    return mask


def acyclicity_value(a: np.ndarray) -> float:
    """Smooth acyclicity functional h(A) = tr(exp(A∘A)) - d.

    Nonnegative, and zero exactly when the support of A is cycle-free
    (up to the power-series truncation for d <= 16).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"adjacency must be square, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("adjacency contains non-finite entries")
    return expm_trace(a * a) - a.shape[0]


def is_dag(support: np.ndarray) -> bool:
    """Exact cycle check on a boolean support via iterative DFS."""
    support = np.asarray(support)
    d = support.shape[0]
    color = [0] * d  # 0 unvisited, 1 on stack, 2 done
    adj = [np.flatnonzero(support[i]) for i in range(d)]
    for root in range(d):
        if color[root]:
            continue
        stack = [(root, 0)]
        color[root] = 1
        while stack:
            node, ptr = stack[-1]
            if ptr < len(adj[node]):
                stack[-1] = (node, ptr + 1)
                nxt = int(adj[node][ptr])
                if color[nxt] == 1:
                    return False
                if color[nxt] == 0:
                    color[nxt] = 1
                    stack.append((nxt, 0))
            else:
                color[node] = 2
                stack.pop()
    return True


def _topological_order(support: np.ndarray) -> list[int]:
    d = support.shape[0]
    indeg = support.sum(axis=0).astype(int)
    ready = [i for i in range(d) if indeg[i] == 0]
    order: list[int] = []
    while ready:
        n = ready.pop()
        order.append(n)
        for m in np.flatnonzero(support[n]):
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(int(m))
    if len(order) != d:
        raise ValidationError("adjacency support contains a cycle")
    return order


class TemporalGraph:
    """Sequence of weighted within-slice adjacencies A_t (entry [i, j] is
    the influence of node i on node j at step t).

    Stored as a small set of distinct matrices plus a per-step index, since
    regime-driven sequences are piecewise constant. Each matrix must have a
    zero diagonal, respect the block mask, and be acyclic.
    """

    def __init__(
        self,
        matrices: Sequence[np.ndarray],
        step_index: Sequence[int] | None = None,
        mask: np.ndarray | None = None,
        validate: bool = True,
    ):
        self._mats = [np.asarray(m, dtype=np.float64) for m in matrices]
        if not self._mats:
            raise ValidationError("TemporalGraph needs at least one matrix")
        if step_index is None:
            step_index = range(len(self._mats))
        self._index = np.asarray(list(step_index), dtype=np.int64)
        if self._index.size == 0:
            raise ValidationError("TemporalGraph needs at least one step")
        if self._index.min() < 0 or self._index.max() >= len(self._mats):
            raise ValidationError("step index refers to a missing matrix")
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)
        if validate:
            self.validate()

    def validate(self, acyclicity_tol: float = 1e-8) -> None:
        d = self._mats[0].shape[0]
        for k, m in enumerate(self._mats):
            if m.shape != (d, d):
                raise ValidationError(f"matrix {k} has shape {m.shape}, expected ({d}, {d})")
            if np.any(np.diagonal(m) != 0.0):
                raise ValidationError(f"matrix {k} has a nonzero diagonal")
            if self.mask is not None and np.any(m[~self.mask] != 0.0):
                raise ValidationError(f"matrix {k} has entries outside the block mask")
            h = acyclicity_value(m)
            if h > acyclicity_tol:
                raise ValidationError(f"matrix {k} violates acyclicity: h={h:.3e}")

    @property
    def n_nodes(self) -> int:
        return self._mats[0].shape[0]

    @property
    def matrices(self) -> list[np.ndarray]:
        return self._mats

    @property
    def step_index(self) -> np.ndarray:
        return self._index

    def __len__(self) -> int:
        return int(self._index.size)

    def at(self, t: int) -> np.ndarray:
        return self._mats[int(self._index[t])]

    def support(self, t: int, tol: float = 0.0) -> np.ndarray:
        return np.abs(self.at(t)) > tol

    def with_matrices(self, matrices: Sequence[np.ndarray], validate: bool = False) -> "TemporalGraph":
        return TemporalGraph(matrices, self._index.copy(), mask=self.mask, validate=validate)


@dataclass(frozen=True)
class MechanismSet:
    """Flat parameter stores for the three mechanisms plus the noise prior.

    The noise prior is independent standard normal per coordinate by
    construction; mechanisms scale it where needed.
    """

    theta_W: np.ndarray
    theta_I: np.ndarray
    theta_V: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [np.ravel(self.theta_W), np.ravel(self.theta_I), np.ravel(self.theta_V)]
        )


@dataclass(frozen=True)
class NoiseBlock:
    """Per-step exogenous noise for the three blocks."""

    u_W: np.ndarray
    u_I: np.ndarray
    u_V: np.ndarray

    def check_dims(self, dims: DimsConfig) -> None:
        if self.u_W.shape[-1] != dims.d_W or self.u_I.shape[-1] != dims.d_I or self.u_V.shape[-1] != dims.d_V:
            raise ValidationError(
                f"noise shapes {self.u_W.shape}/{self.u_I.shape}/{self.u_V.shape} "
                f"do not match dims ({dims.d_W}, {dims.d_I}, {dims.d_V})"
            )


@dataclass(frozen=True)
class Intervention:
    """One factor assignment: clamp (set) or rescale (scale) a W coordinate."""

    index: int
    mode: str
    value: float

    def __post_init__(self):
        if self.mode not in ("set", "scale"):
            raise ValidationError(f"intervention mode must be 'set' or 'scale', got {self.mode!r}")
        if not np.isfinite(self.value):
            raise ValidationError("intervention value must be finite")


@dataclass(frozen=True)
class InterventionSpec:
    """do(W = w') over an inclusive 1-based step range [start, stop]."""

    start: int
    stop: int
    assignments: tuple[Intervention, ...] = ()

    @staticmethod
    def null() -> "InterventionSpec":
        return InterventionSpec(1, 1, ())

    def validate(self, d_W: int, horizon: int) -> None:
        if not (1 <= self.start <= self.stop <= horizon):
            raise ValidationError(
                f"intervention window [{self.start}, {self.stop}] outside [1, {horizon}]"
            )
        seen = set()
        for a in self.assignments:
            if not 0 <= a.index < d_W:
                raise ValidationError(f"factor index {a.index} outside [0, {d_W})")
            if a.index in seen:
                raise ValidationError(f"duplicate factor index {a.index}")
            seen.add(a.index)

    @property
    def is_null(self) -> bool:
        return not self.assignments

    def indices(self) -> list[int]:
        return [a.index for a in self.assignments]

    def to_json(self) -> dict:
        return {
            "from": self.start,
            "to": self.stop,
            "interventions": [
                {"index": a.index, "mode": a.mode, "value": a.value} for a in self.assignments
            ],
        }

    @staticmethod
    def from_json(obj: dict) -> "InterventionSpec":
        try:
            items = tuple(
                Intervention(int(it["index"]), str(it["mode"]), float(it["value"]))
                for it in obj.get("interventions", ())
            )
            return InterventionSpec(int(obj["from"]), int(obj["to"]), items)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed intervention spec: {exc}") from exc


class ClampPlan:
    """Resolved intervention schedule used by rollouts.

    Maps each 0-based step to the assignments active there, and applies
    them to a factor row in place of the mechanism output.
    """

    def __init__(self, spec: InterventionSpec, d_W: int, horizon: int):
        spec.validate(d_W, horizon)
        self.spec = spec
        self.d_W = d_W
        self.horizon = horizon
        self._active = np.zeros(horizon, dtype=bool)
        self._active[spec.start - 1 : spec.stop] = bool(spec.assignments)

    def active(self, t: int) -> bool:
        return bool(self._active[t])

    def apply(self, row: np.ndarray, factual_row: np.ndarray, t: int) -> np.ndarray:
        """Clamp intervened coordinates of `row` at 0-based step t.

        set: coordinate forced to the given value. scale: forced to
        value * the factual coordinate at the same step.
        """
        if not self._active[t]:
            return row
        out = row.copy()
        for a in self.spec.assignments:
            if a.mode == "set":
                out[..., a.index] = a.value
            else:
                out[..., a.index] = a.value * factual_row[..., a.index]
        return out


def apply_intervention(
    mechanisms, graph: TemporalGraph, spec: InterventionSpec, dims: DimsConfig
) -> tuple[tuple, TemporalGraph]:
    """Graph surgery for do(W = w'): returns (mechanisms', graph').

    Incoming within-slice edges of the intervened factor nodes are removed
    for every step in the intervention window; mechanisms are returned
    paired with a ClampPlan that rollouts must honor. Mechanisms for all
    other variables are untouched.
    """
    plan = ClampPlan(spec, dims.d_W, len(graph))
    if spec.is_null:
        return (mechanisms, plan), graph

    targets = spec.indices()
    window_steps = range(spec.start - 1, spec.stop)
    old_ids = sorted({int(graph.step_index[t]) for t in window_steps})
    mats = [m for m in graph.matrices]
    index = graph.step_index.copy()
    remap = {}
    for old in old_ids:
        cut = graph.matrices[old].copy()
        cut[:, targets] = 0.0
        remap[old] = len(mats)
        mats.append(cut)
    for t in window_steps:
        index[t] = remap[int(index[t])]
    surgered = TemporalGraph(mats, index, mask=graph.mask, validate=False)
    return (mechanisms, plan), surgered


def _support(a: np.ndarray, tol: float) -> np.ndarray:
    return np.abs(np.asarray(a, dtype=np.float64)) > tol


def is_regime_change(
    graph_t: np.ndarray,
    graph_prev: np.ndarray,
    mech_t: np.ndarray,
    mech_prev: np.ndarray,
    edge_tol: float = 1e-6,
    mech_tol: float = 1e-6,
) -> tuple[bool, tuple[int, float]]:
    """Detect a causal regime change between consecutive steps.

    Fires when the edge supports (thresholded at edge_tol) differ, or when
    the mechanism parameter vectors differ by more than mech_tol in max-abs.
    Returns (changed, (edge edit count, parameter L-infinity distance)).
    """
    graph_t = np.asarray(graph_t, dtype=np.float64)
    graph_prev = np.asarray(graph_prev, dtype=np.float64)
    if graph_t.shape != graph_prev.shape:
        raise ValidationError(f"graph shapes differ: {graph_t.shape} vs {graph_prev.shape}")
    mech_t = np.ravel(np.asarray(mech_t, dtype=np.float64))
    mech_prev = np.ravel(np.asarray(mech_prev, dtype=np.float64))
    if mech_t.shape != mech_prev.shape:
        raise ValidationError(f"mechanism shapes differ: {mech_t.shape} vs {mech_prev.shape}")
    edits = int(np.sum(_support(graph_t, edge_tol) != _support(graph_prev, edge_tol)))
    linf = float(np.max(np.abs(mech_t - mech_prev))) if mech_t.size else 0.0
    return edits > 0 or linf > mech_tol, (edits, linf)


@dataclass(frozen=True)
class LinearSCM:
    """Linear additive-noise SCM: x_t = x_t A + x_{t-1} B + c + u_t.

    A is the within-slice weighted adjacency (must be acyclic); B carries
    lagged influence and is unconstrained; c is an optional intercept.
    """

    within: np.ndarray
    lagged: np.ndarray | None = None
    intercept: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.within, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError(f"within-slice matrix must be square, got {a.shape}")
        object.__setattr__(self, "within", a)
        if self.lagged is not None:
            b = np.asarray(self.lagged, dtype=np.float64)
            if b.shape != a.shape:
                raise ValidationError("lagged matrix shape must match within-slice matrix")
            object.__setattr__(self, "lagged", b)
        if self.intercept is not None:
            c = np.asarray(self.intercept, dtype=np.float64)
            if c.shape != (a.shape[0],):
                raise ValidationError("intercept length must match node count")
            object.__setattr__(self, "intercept", c)

    @property
    def d(self) -> int:
        return self.within.shape[0]


def linear_gaussian_counterfactual(
    scm: LinearSCM, observed: np.ndarray, spec: InterventionSpec
) -> np.ndarray:
    """Exact abduction-action-prediction on a linear additive-noise SCM.

    Abduction recovers u_t = x_t - x_t A - x_{t-1} B - c at every node and
    step; action severs intervened nodes and clamps them; prediction
    re-simulates in topological order reusing the recovered noise. With a
    null spec the output equals the observations.
    """
    x = np.atleast_2d(np.asarray(observed, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise ValidationError("observed trajectory contains non-finite values")
    if x.shape[1] != scm.d:
        raise ValidationError(f"observed width {x.shape[1]} does not match SCM d={scm.d}")
    t_len = x.shape[0]
    spec.validate(scm.d, t_len)

    a = scm.within
    b = scm.lagged
    c = scm.intercept if scm.intercept is not None else np.zeros(scm.d)
    order = _topological_order(a != 0.0)

    # Prediction in delta form: substituting the abducted noise
    # u = x - base(x_parents) into x~ = base(x~_parents) + u gives
    # x~ = x + (base(x~_parents) - base(x_parents)), which cancels exactly
    # when nothing upstream changed, so a null spec is a bitwise identity.
    intervened = {iv.index: iv for iv in spec.assignments}
    out = x.copy()
    for t in range(spec.start - 1, t_len):
        prev = out[t - 1] if t > 0 else None
        row = out[t]
        for j in order:
            iv = intervened.get(j) if spec.start - 1 <= t <= spec.stop - 1 else None
            if iv is not None:
                row[j] = iv.value if iv.mode == "set" else iv.value * x[t, j]
            else:
                delta = float(row @ a[:, j]) - float(x[t] @ a[:, j])
                if b is not None and prev is not None:
                    delta += float(prev @ b[:, j]) - float(x[t - 1] @ b[:, j])
                row[j] = x[t, j] + delta
    return out
