"""Three-level generative market model with exact residual abduction.

Mechanisms are additive in their noise argument: factors follow
W_t = f_W(W_{t-1}, I_{t-1}) + u_W, dynamics I_t = f_I(W_t, I_{t-1}) + u_I,
observables V_t = g_V(I_t) + u_V, each f a two-hidden-layer tanh MLP whose
inputs are gated by the learned adjacency (a blocked weighted graph shared
with the discovery penalties). An encoder MLP maps each observation row to
factor and dynamics estimates; abduction is then an exact residual
computation, which makes the null counterfactual reproduce the factual
trajectory by construction.

When the observation schema designates measurement columns for the factors
(`factor_cols`), the factor head is anchored to those columns: the encoder
predicts a correction on top of the measured values, and the correction is
penalized inside the reconstruction loss. Interventions on named factor
indices then line up with the generator's ground truth.

Training runs in a standardized observation space (per-column affine stored
with the parameters); rollouts and reconstructions return raw units.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape
from .causal import (
    ClampPlan,
    DimsConfig,
    Intervention,
    InterventionSpec,
    TemporalGraph,
    ValidationError,
    model_block_mask,
)

__all__ = [
    "ModelParams",
    "LossWeights",
    "TrainConfig",
    "TrainReport",
    "TrainDivergenceError",
    "ModelError",
    "Abduction",
    "init_model",
    "encode",
    "reconstruct",
    "rollout",
    "train",
    "training_loss_report",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_hash",
]

CKPT_MAGIC = b"ATSM"
CKPT_VERSION = 1

_MLP_PREFIXES = ("fw", "fi", "gv")


class ModelError(RuntimeError):
    """Numerical failure inside the model."""


class TrainDivergenceError(ModelError):
    """Training loss became non-finite; carries the last finite report."""

    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the causal, counterfactual, and discovery terms."""

    lambda_causal: float = 1.0
    lambda_counterfactual: float = 0.1
    lambda_discovery: float = 1e-3

    def __post_init__(self):
        if min(self.lambda_causal, self.lambda_counterfactual, self.lambda_discovery) < 0:
            raise ValidationError("loss weights must be >= 0")

    def to_json(self) -> dict:
        return {
            "lambda_causal": self.lambda_causal,
            "lambda_counterfactual": self.lambda_counterfactual,
            "lambda_discovery": self.lambda_discovery,
        }

    @staticmethod
    def from_json(obj: dict) -> "LossWeights":
        return LossWeights(**obj)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    epochs: int = 10
    batch_windows: int = 8
    window_length: int = 64
    cf_horizon: int = 32
    step_size: float = 1e-3
    clip_norm: float = 5.0
    align_weight: float = 1.0
    sparsity_weight: float = 0.1
    stability_weight: float = 0.05
    cf_scale_low: float = 0.85
    cf_scale_high: float = 1.15
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.epochs < 1 or self.batch_windows < 1:
            raise ValidationError("steps, epochs, and batch_windows must be >= 1")
        if self.window_length < 2:
            raise ValidationError("window_length must be >= 2")
        if not 2 <= self.cf_horizon:
            raise ValidationError("cf_horizon must be >= 2")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_json(obj: dict) -> "TrainConfig":
        known = set(TrainConfig.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise ValidationError(f"unknown train config fields: {sorted(extra)}")
        return TrainConfig(**obj)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    wall_time_s: float = 0.0
    steps_run: int = 0

    def log(self, epoch, step, recon, causal, counterfactual, discovery, total, grad_norm):
        self.epochs.append(
            {
                "epoch": epoch,
                "step": step,
                "recon": recon,
                "causal": causal,
                "counterfactual": counterfactual,
                "discovery": discovery,
                "total": total,
                "grad_norm": grad_norm,
            }
        )

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "wall_time_s": self.wall_time_s,
            "steps_run": self.steps_run,
        }


@dataclass
class ModelParams:
    """All mechanism, encoder, and graph parameters plus the observation
    normalization. `factor_cols[j]` is the observation column measuring
    factor j (None disables factor anchoring)."""

    dims: DimsConfig
    seed: int
    width: int
    factor_cols: tuple[int, ...] | None
    arrays: dict
    norm_mean: np.ndarray
    norm_std: np.ndarray
    train_adjacency: bool = True

    @property
    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "ModelParams":
        return replace(
            self,
            arrays={k: v.copy() for k, v in self.arrays.items()},
            norm_mean=self.norm_mean.copy(),
            norm_std=self.norm_std.copy(),
        )

    def standardize(self, v_raw: np.ndarray) -> np.ndarray:
        return (np.asarray(v_raw, dtype=np.float64) - self.norm_mean) / self.norm_std

    def unstandardize(self, v_std: np.ndarray) -> np.ndarray:
        return v_std * self.norm_std + self.norm_mean

    def factor_base(self, v_std: np.ndarray) -> np.ndarray | None:
        if self.factor_cols is None:
            return None
        return v_std[..., list(self.factor_cols)]

    def factor_norm(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean/std of the raw units behind each factor coordinate."""
        if self.factor_cols is None:
            d = self.dims.d_W
            return np.zeros(d), np.ones(d)
        cols = list(self.factor_cols)
        return self.norm_mean[cols], self.norm_std[cols]


def _param_order(dims: DimsConfig, width: int) -> list[tuple[str, tuple[int, ...]]]:
    d_W, d_I, d_V, d = dims.d_W, dims.d_I, dims.d_V, dims.d
    mech_in = d_W + d_I
    return [
        ("enc_w1", (d_V, width)), ("enc_b1", (width,)),
        ("enc_w2", (width, width)), ("enc_b2", (width,)),
        ("enc_wW", (width, d_W)), ("enc_bW", (d_W,)),
        ("enc_wI", (width, d_I)), ("enc_bI", (d_I,)),
        ("fw_w1", (mech_in, width)), ("fw_b1", (width,)),
        ("fw_w2", (width, width)), ("fw_b2", (width,)),
        ("fw_w3", (width, d_W)), ("fw_b3", (d_W,)),
        ("fi_w1", (mech_in, width)), ("fi_b1", (width,)),
        ("fi_w2", (width, width)), ("fi_b2", (width,)),
        ("fi_w3", (width, d_I)), ("fi_b3", (d_I,)),
        ("gv_w1", (d_I, width)), ("gv_b1", (width,)),
        ("gv_w2", (width, width)), ("gv_b2", (width,)),
        ("gv_w3", (width, d_V)), ("gv_b3", (d_V,)),
        ("adjacency", (d, d)),
    ]


def init_model(
    dims: DimsConfig,
    seed: int = 0,
    width: int = 64,
    factor_cols: tuple[int, ...] | None = None,
) -> ModelParams:
    """Fan-in-scaled uniform initialization; deterministic in seed."""
    if factor_cols is not None:
        factor_cols = tuple(int(c) for c in factor_cols)
        if len(factor_cols) != dims.d_W:
            raise ValidationError("factor_cols must name one observation column per factor")
        if any(not 0 <= c < dims.d_V for c in factor_cols):
            raise ValidationError("factor_cols out of observation range")
    rng = np.random.default_rng([seed, 7])
    arrays = {}
    for name, shape in _param_order(dims, width):
        if name == "adjacency":
            mat = rng.uniform(-0.3, 0.3, shape) * model_block_mask(dims)
            arrays[name] = mat
        elif name.endswith(("b1", "b2", "b3", "bW", "bI")):
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, shape)
    # the factor head starts as a small correction on the measured factors
    arrays["enc_wW"] *= 0.1 if factor_cols is not None else 1.0
    return ModelParams(
        dims=dims,
        seed=seed,
        width=width,
        factor_cols=factor_cols,
        arrays=arrays,
        norm_mean=np.zeros(dims.d_V),
        norm_std=np.ones(dims.d_V),
    )


# --- gates: per-source-coordinate input masks derived from the adjacency.
# tanh(sum of squared outgoing weights into the target block) is exactly
# zero when the support forbids the block connection and saturates to one
# for strongly connected sources.


def _np_gates(adjacency: np.ndarray, dims: DimsConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    w, i, v = dims.w_slice, dims.i_slice, dims.v_slice
    g_ww = np.tanh((adjacency[w, w] ** 2).sum(axis=1))
    g_wi = np.tanh((adjacency[w, i] ** 2).sum(axis=1))
    g_iv = np.tanh((adjacency[i, v] ** 2).sum(axis=1))
    return g_ww, g_wi, g_iv


def _tape_gates(tape: Tape, adj_id: int, dims: DimsConfig):
    d_W, d_I, d_V = dims.d_W, dims.d_I, dims.d_V
    w_rows = tape.slice(adj_id, 0, d_W, axis=0)
    i_rows = tape.slice(adj_id, d_W, d_W + d_I, axis=0)
    ones_w = tape.leaf(np.ones(d_W))
    ones_i = tape.leaf(np.ones(d_I))
    ones_v = tape.leaf(np.ones(d_V))
    g_ww = tape.tanh(tape.matmul(tape.square(tape.slice(w_rows, 0, d_W, axis=1)), ones_w))
    g_wi = tape.tanh(tape.matmul(tape.square(tape.slice(w_rows, d_W, d_W + d_I, axis=1)), ones_i))
    g_iv = tape.tanh(
        tape.matmul(tape.square(tape.slice(i_rows, d_W + d_I, dims.d, axis=1)), ones_v)
    )
    return g_ww, g_wi, g_iv


def _graph_gates(graph: TemporalGraph, dims: DimsConfig, steps: range):
    """Per-step numpy gates from a provided graph sequence."""
    out = []
    for t in steps:
        out.append(_np_gates(graph.at(t), dims))
    return out


# --- numpy mechanism fast path (inference)


def _np_mlp3(arrays: dict, prefix: str, x: np.ndarray) -> np.ndarray:
    h1 = np.tanh(x @ arrays[f"{prefix}_w1"] + arrays[f"{prefix}_b1"])
    h2 = np.tanh(h1 @ arrays[f"{prefix}_w2"] + arrays[f"{prefix}_b2"])
    return h2 @ arrays[f"{prefix}_w3"] + arrays[f"{prefix}_b3"]


def _np_f_w(arrays, gates, w_prev, i_prev):
    return _np_mlp3(arrays, "fw", np.concatenate([w_prev * gates[0], i_prev], axis=-1))


def _np_f_i(arrays, gates, w_cur, i_prev):
    return _np_mlp3(arrays, "fi", np.concatenate([w_cur * gates[1], i_prev], axis=-1))


def _np_g_v(arrays, gates, i_cur):
    return _np_mlp3(arrays, "gv", i_cur * gates[2])


# --- tape mechanisms (training / gradient checks)


def _tape_mlp3(tape: Tape, ids: dict, prefix: str, x: int) -> int:
    h1 = tape.tanh(tape.add(tape.matmul(x, ids[f"{prefix}_w1"]), ids[f"{prefix}_b1"]))
    h2 = tape.tanh(tape.add(tape.matmul(h1, ids[f"{prefix}_w2"]), ids[f"{prefix}_b2"]))
    return tape.add(tape.matmul(h2, ids[f"{prefix}_w3"]), ids[f"{prefix}_b3"])


def _tape_f_w(tape, ids, gates, w_prev: int, i_prev: int) -> int:
    gated = tape.mul(w_prev, gates[0])
    return _tape_mlp3(tape, ids, "fw", tape.concat([gated, i_prev], axis=1))


def _tape_f_i(tape, ids, gates, w_cur: int, i_prev: int) -> int:
    gated = tape.mul(w_cur, gates[1])
    return _tape_mlp3(tape, ids, "fi", tape.concat([gated, i_prev], axis=1))


def _tape_g_v(tape, ids, gates, i_cur: int) -> int:
    return _tape_mlp3(tape, ids, "gv", tape.mul(i_cur, gates[2]))


def _load_params(tape: Tape, params: ModelParams) -> dict:
    return {name: tape.leaf(arr) for name, arr in params.arrays.items()}


@dataclass
class Abduction:
    """Encoded factors/dynamics plus the exact residual noises, all in the
    standardized observation space."""

    w_hat: np.ndarray
    i_hat: np.ndarray
    u_w: np.ndarray
    u_i: np.ndarray
    u_v: np.ndarray
    v_std: np.ndarray


def _check_finite(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise ModelError(f"non-finite activations in {name}")


def encode(params: ModelParams, v_window_raw: np.ndarray) -> Abduction:
    """Map an observation window to factor/dynamics trajectories and abduct
    the residual noises that reproduce them exactly."""
    v_raw = np.atleast_2d(np.asarray(v_window_raw, dtype=np.float64))
    if v_raw.shape[0] < 2:
        raise ValidationError("window length must be >= 2")
    if v_raw.shape[1] != params.dims.d_V:
        raise ValidationError(
            f"window width {v_raw.shape[1]} does not match d_V={params.dims.d_V}"
        )
    if not np.all(np.isfinite(v_raw)):
        raise ValidationError("window contains non-finite values")
    v = params.standardize(v_raw)
    a = params.arrays

    h1 = np.tanh(v @ a["enc_w1"] + a["enc_b1"])
    _check_finite("encoder layer 1", h1)
    h2 = np.tanh(h1 @ a["enc_w2"] + a["enc_b2"])
    _check_finite("encoder layer 2", h2)
    i_hat = h2 @ a["enc_wI"] + a["enc_bI"]
    _check_finite("encoder dynamics head (layer 3)", i_hat)
    w_delta = h2 @ a["enc_wW"] + a["enc_bW"]
    _check_finite("encoder factor head (layer 3)", w_delta)
    base = params.factor_base(v)
    w_hat = w_delta if base is None else base + w_delta

    gates = _np_gates(a["adjacency"], params.dims)
    u_w = np.zeros_like(w_hat)
    u_i = np.zeros_like(i_hat)
    u_w[1:] = w_hat[1:] - _np_f_w(a, gates, w_hat[:-1], i_hat[:-1])
    u_i[1:] = i_hat[1:] - _np_f_i(a, gates, w_hat[1:], i_hat[:-1])
    u_v = v - _np_g_v(a, gates, i_hat)
    return Abduction(w_hat=w_hat, i_hat=i_hat, u_w=u_w, u_i=u_i, u_v=u_v, v_std=v)


def reconstruct(params: ModelParams, v_window_raw: np.ndarray) -> np.ndarray:
    """Noise-free decode of a window: g_V applied to the encoded dynamics."""
    ab = encode(params, v_window_raw)
    gates = _np_gates(params.arrays["adjacency"], params.dims)
    return params.unstandardize(_np_g_v(params.arrays, gates, ab.i_hat))


def _apply_clamp_np(
    params: ModelParams, plan: ClampPlan, row: np.ndarray, factual_std_row: np.ndarray, t: int
) -> np.ndarray:
    if plan is None or not plan.active(t):
        return row
    mean, std = params.factor_norm()
    out = row.copy()
    for aiv in plan.spec.assignments:
        j = aiv.index
        if aiv.mode == "set":
            out[..., j] = (aiv.value - mean[j]) / std[j]
        else:
            raw = factual_std_row[..., j] * std[j] + mean[j]
            out[..., j] = (aiv.value * raw - mean[j]) / std[j]
    return out


def rollout(
    params: ModelParams,
    w0_std: np.ndarray,
    i0_std: np.ndarray,
    noises: tuple[np.ndarray, np.ndarray, np.ndarray],
    graphs: TemporalGraph | None = None,
    spec: InterventionSpec | None = None,
    factual_w_std: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Iterate the mechanisms W -> I -> V in standardized space.

    `noises` are per-step additive residuals (horizon x dim each); the first
    step is the initial condition and consumes noises[...][0] only for the
    observation. With a spec, intervened factor coordinates are clamped per
    the surgery semantics (set values are raw units; scale is relative to
    `factual_w_std`).
    """
    u_w, u_i, u_v = (np.asarray(x, dtype=np.float64) for x in noises)
    horizon = u_w.shape[0]
    if u_i.shape[0] != horizon or u_v.shape[0] != horizon:
        raise ValidationError("noise trajectories disagree on horizon")
    if graphs is not None and len(graphs) < horizon:
        raise ValidationError(f"graphs cover {len(graphs)} steps, horizon is {horizon}")
    a = params.arrays
    dims = params.dims
    if spec is not None:
        spec.validate(dims.d_W, horizon)
        plan = ClampPlan(spec, dims.d_W, horizon)
        if factual_w_std is None:
            raise ValidationError("scale/set clamps need the factual factor trajectory")
    else:
        plan = None

    if graphs is None:
        shared_gates = _np_gates(a["adjacency"], dims)
        gates_at = lambda t: shared_gates
    else:
        per_step = _graph_gates(graphs, dims, range(horizon))
        gates_at = lambda t: per_step[t]

    w = np.empty((horizon, dims.d_W))
    i = np.empty((horizon, dims.d_I))
    v = np.empty((horizon, dims.d_V))
    for t in range(horizon):
        g = gates_at(t)
        if t == 0:
            row_w = np.asarray(w0_std, dtype=np.float64)
        else:
            row_w = _np_f_w(a, g, w[t - 1], i[t - 1]) + u_w[t]
        if plan is not None:
            row_w = _apply_clamp_np(params, plan, row_w, factual_w_std[t], t)
        w[t] = row_w
        if t == 0:
            i[0] = np.asarray(i0_std, dtype=np.float64)
        else:
            i[t] = _np_f_i(a, g, w[t], i[t - 1]) + u_i[t]
        v[t] = _np_g_v(a, g, i[t]) + u_v[t]
    return w, i, v


def replay(
    params: ModelParams,
    ab: Abduction,
    spec: InterventionSpec | None = None,
    graphs: TemporalGraph | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Abduction-action-prediction rollout; raw-unit observables.

    With a null spec this reproduces the factual window exactly (the
    residual noises absorb every modeling error).
    """
    w, i, v_std = rollout(
        params,
        ab.w_hat[0],
        ab.i_hat[0],
        (ab.u_w, ab.u_i, ab.u_v),
        graphs=graphs,
        spec=spec,
        factual_w_std=ab.w_hat,
    )
    return w, i, params.unstandardize(v_std)


# --- training


@dataclass
class _Batch:
    """Everything one gradient step needs, pre-drawn so the tape build is a
    pure function of (params, batch)."""

    contexts: np.ndarray          # stacked (B*L, d_V) standardized windows
    n_windows: int
    length: int
    cf_window: np.ndarray         # (L_cf, d_V) standardized
    cf_spec: InterventionSpec
    envelope_lo: np.ndarray
    envelope_hi: np.ndarray


def _prepare_batch(
    v_std_episodes: list[np.ndarray],
    cfg: TrainConfig,
    rng: np.random.Generator,
    envelope: tuple[np.ndarray, np.ndarray],
    d_W: int,
) -> _Batch:
    length = cfg.window_length
    picks = []
    for _ in range(cfg.batch_windows):
        ep = int(rng.integers(len(v_std_episodes)))
        data = v_std_episodes[ep]
        start = int(rng.integers(0, data.shape[0] - length + 1))
        picks.append(data[start : start + length])
    stacked = np.concatenate(picks, axis=0)

    l_cf = min(cfg.cf_horizon, length)
    cf_window = picks[0][:l_cf]
    tau = int(rng.integers(2, l_cf + 1))
    index = int(rng.integers(d_W))
    scale = float(rng.uniform(cfg.cf_scale_low, cfg.cf_scale_high))
    cf_spec = InterventionSpec(tau, l_cf, (Intervention(index, "scale", scale),))
    return _Batch(
        contexts=stacked,
        n_windows=cfg.batch_windows,
        length=length,
        cf_window=cf_window,
        cf_spec=cf_spec,
        envelope_lo=envelope[0],
        envelope_hi=envelope[1],
    )


def _tape_encode(tape, ids, params: ModelParams, v_std: np.ndarray):
    x = tape.leaf(v_std)
    h1 = tape.tanh(tape.add(tape.matmul(x, ids["enc_w1"]), ids["enc_b1"]))
    h2 = tape.tanh(tape.add(tape.matmul(h1, ids["enc_w2"]), ids["enc_b2"]))
    i_hat = tape.add(tape.matmul(h2, ids["enc_wI"]), ids["enc_bI"])
    w_delta = tape.add(tape.matmul(h2, ids["enc_wW"]), ids["enc_bW"])
    base = params.factor_base(v_std)
    w_hat = w_delta if base is None else tape.add(tape.leaf(base), w_delta)
    return w_hat, i_hat, w_delta


def _tape_rollout_cf(
    tape,
    ids,
    gates,
    params: ModelParams,
    w_hat: int,
    i_hat: int,
    u_w_rows: list[int | None],
    u_i_rows: list[int | None],
    u_v_rows: list[int],
    w_hat_np: np.ndarray,
    spec: InterventionSpec | None,
    length: int,
):
    """Sequential abduction-action-prediction inside the training tape."""
    plan = None
    if spec is not None and not spec.is_null:
        plan = ClampPlan(spec, params.dims.d_W, length)
    mean, std = params.factor_norm()
    v_rows = []
    w_row = tape.slice(w_hat, 0, 1, axis=0)
    i_row = tape.slice(i_hat, 0, 1, axis=0)
    for t in range(length):
        if t > 0:
            w_row = tape.add(_tape_f_w(tape, ids, gates, w_row, i_row), u_w_rows[t])
        if plan is not None and plan.active(t):
            keep = np.ones(params.dims.d_W)
            add = np.zeros(params.dims.d_W)
            for aiv in plan.spec.assignments:
                j = aiv.index
                keep[j] = 0.0
                if aiv.mode == "set":
                    add[j] = (aiv.value - mean[j]) / std[j]
                else:
                    raw = w_hat_np[t, j] * std[j] + mean[j]
                    add[j] = (aiv.value * raw - mean[j]) / std[j]
            w_row = tape.add(tape.mul(w_row, tape.leaf(keep)), tape.leaf(add))
        if t > 0:
            i_row = tape.add(_tape_f_i(tape, ids, gates, w_row, i_row), u_i_rows[t])
        v_rows.append(tape.add(_tape_g_v(tape, ids, gates, i_row), u_v_rows[t]))
    return tape.concat(v_rows, axis=0)


def build_training_loss(
    tape: Tape, ids: dict, params: ModelParams, batch: _Batch, weights: LossWeights, cfg: TrainConfig
):
    """Four-term objective on one batch; returns node ids per term."""
    dims = params.dims
    n_w, length = batch.n_windows, batch.length
    gates = _tape_gates(tape, ids["adjacency"], dims)

    w_hat, i_hat, w_delta = _tape_encode(tape, ids, params, batch.contexts)
    v_all = tape.leaf(batch.contexts)

    # per-window shifted views, concatenated back into one matrix
    prev_rows, cur_rows = [], []
    for k in range(n_w):
        lo = k * length
        prev_rows.append((lo, lo + length - 1))
        cur_rows.append((lo + 1, lo + length))

    def shifted(node, rows):
        return tape.concat([tape.slice(node, a, b, axis=0) for a, b in rows], axis=0)

    w_prev = shifted(w_hat, prev_rows)
    i_prev = shifted(i_hat, prev_rows)
    w_cur = shifted(w_hat, cur_rows)
    i_cur = shifted(i_hat, cur_rows)

    # reconstruction: decode all steps, plus the factor-anchor correction
    v_pred = _tape_g_v(tape, ids, gates, i_hat)
    recon = tape.mean(tape.square(tape.sub(v_pred, v_all)))
    if params.factor_cols is not None and cfg.align_weight > 0:
        recon = tape.add(recon, tape.scale(tape.mean(tape.square(w_delta)), cfg.align_weight))

    # causal consistency: one-step transition residuals of the encoded states
    pred_w = _tape_f_w(tape, ids, gates, w_prev, i_prev)
    pred_i = _tape_f_i(tape, ids, gates, w_cur, i_prev)
    causal = tape.add(
        tape.mean(tape.square(tape.sub(w_cur, pred_w))),
        tape.mean(tape.square(tape.sub(i_cur, pred_i))),
    )

    # counterfactual: null-consistency plus envelope realism on a random
    # small intervention
    l_cf = batch.cf_window.shape[0]
    cf_w_hat, cf_i_hat, _ = _tape_encode(tape, ids, params, batch.cf_window)
    cf_v = tape.leaf(batch.cf_window)
    cf_prev = [(0, l_cf - 1)]
    cf_curr = [(1, l_cf)]
    cfw_prev = shifted(cf_w_hat, cf_prev)
    cfi_prev = shifted(cf_i_hat, cf_prev)
    cfw_cur = shifted(cf_w_hat, cf_curr)
    cfi_cur = shifted(cf_i_hat, cf_curr)
    u_w_tail = tape.sub(cfw_cur, _tape_f_w(tape, ids, gates, cfw_prev, cfi_prev))
    u_i_tail = tape.sub(cfi_cur, _tape_f_i(tape, ids, gates, cfw_cur, cfi_prev))
    u_v_full = tape.sub(cf_v, _tape_g_v(tape, ids, gates, cf_i_hat))

    u_w_rows = [None] + [tape.slice(u_w_tail, t - 1, t, axis=0) for t in range(1, l_cf)]
    u_i_rows = [None] + [tape.slice(u_i_tail, t - 1, t, axis=0) for t in range(1, l_cf)]
    u_v_rows = [tape.slice(u_v_full, t, t + 1, axis=0) for t in range(l_cf)]
    cf_w_np = tape.value(cf_w_hat)

    v_null = _tape_rollout_cf(
        tape, ids, gates, params, cf_w_hat, cf_i_hat,
        u_w_rows, u_i_rows, u_v_rows, cf_w_np, None, l_cf,
    )
    null_term = tape.mean(tape.square(tape.sub(v_null, cf_v)))
    v_cf = _tape_rollout_cf(
        tape, ids, gates, params, cf_w_hat, cf_i_hat,
        u_w_rows, u_i_rows, u_v_rows, cf_w_np, batch.cf_spec, l_cf,
    )
    hi = tape.leaf(batch.envelope_hi)
    lo = tape.leaf(batch.envelope_lo)
    outside = tape.add(
        tape.mean(tape.square(tape.relu(tape.sub(v_cf, hi)))),
        tape.mean(tape.square(tape.relu(tape.sub(lo, v_cf)))),
    )
    counterfactual = tape.add(null_term, outside)

    # discovery penalties on the shared adjacency
    adj_eff = tape.hadamard(ids["adjacency"], tape.leaf(model_block_mask(dims).astype(float)))
    h = tape.sub(
        tape.matrix_exp_trace(tape.hadamard(adj_eff, adj_eff)), tape.leaf(float(dims.d))
    )
    discovery = tape.add(h, tape.scale(tape.sum(tape.abs(adj_eff)), cfg.sparsity_weight))

    total = tape.add(recon, tape.scale(causal, weights.lambda_causal))
    total = tape.add(total, tape.scale(counterfactual, weights.lambda_counterfactual))
    total = tape.add(total, tape.scale(discovery, weights.lambda_discovery))
    return total, recon, causal, counterfactual, discovery


def _episode_v(e) -> np.ndarray:
    return e.V if hasattr(e, "V") else np.asarray(e, dtype=np.float64)


def fit_normalization(params: ModelParams, episodes) -> ModelParams:
    stacked = np.concatenate([_episode_v(e) for e in episodes], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std < 1e-9] = 1.0
    out = params.copy()
    out.norm_mean = mean
    out.norm_std = std
    return out


def train(
    params: ModelParams,
    episodes,
    weights: LossWeights,
    cfg: TrainConfig,
    graphs: TemporalGraph | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Gradient descent with clipping on the four-term objective.

    With `graphs` provided, the shared adjacency is frozen to the mean of
    the provided matrices (discovery-initialized gating); otherwise it is
    learned jointly under the discovery penalties, which requires
    lambda_discovery > 0.
    """
    if not episodes:
        raise ValidationError("need at least one training episode")
    if graphs is None and weights.lambda_discovery == 0:
        raise ValidationError(
            "graphs must come from somewhere: pass frozen graphs or set lambda_discovery > 0"
        )
    params = fit_normalization(params, episodes)
    if graphs is not None:
        mean_mat = np.mean([graphs.at(t) for t in range(len(graphs))], axis=0)
        params.arrays["adjacency"] = mean_mat * model_block_mask(params.dims)
        params.train_adjacency = False

    v_eps = [params.standardize(_episode_v(e)) for e in episodes]
    for k, v in enumerate(v_eps):
        if v.shape[0] < cfg.window_length:
            raise ValidationError(f"episode {k} shorter than the training window")
    stacked = np.concatenate(v_eps, axis=0)
    envelope = (stacked.min(axis=0), stacked.max(axis=0))

    rng = np.random.default_rng([cfg.seed, 23])
    report = TrainReport()
    order = [name for name, _ in _param_order(params.dims, params.width)]
    log_every = max(1, cfg.steps // cfg.epochs)
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        batch = _prepare_batch(v_eps, cfg, rng, envelope, params.dims.d_W)
        tape = Tape()
        ids = _load_params(tape, params)
        total, recon, causal, counterfactual, discovery = build_training_loss(
            tape, ids, params, batch, weights, cfg
        )
        values = {
            "total": tape.scalar(total),
            "recon": tape.scalar(recon),
            "causal": tape.scalar(causal),
            "counterfactual": tape.scalar(counterfactual),
            "discovery": tape.scalar(discovery),
        }
        if not np.isfinite(values["total"]):
            report.wall_time_s = time.perf_counter() - t0
            report.steps_run = step
            raise TrainDivergenceError(
                f"non-finite loss at step {step}", report
            )
        grad = tape.backward(total)
        sq = 0.0
        grads = {}
        for name in order:
            if name == "adjacency" and not params.train_adjacency:
                continue
            g = grad.wrt(ids[name])
            grads[name] = g
            sq += float(np.sum(g * g))
        gnorm = np.sqrt(sq)
        factor = min(1.0, cfg.clip_norm / gnorm) if gnorm > 0 else 1.0
        for name, g in grads.items():
            params.arrays[name] = params.arrays[name] - cfg.step_size * factor * g
        if (step + 1) % log_every == 0 or step + 1 == cfg.steps:
            report.log(
                epoch=(step + 1) // log_every,
                step=step + 1,
                recon=values["recon"],
                causal=values["causal"],
                counterfactual=values["counterfactual"],
                discovery=values["discovery"],
                total=values["total"],
                grad_norm=gnorm,
            )
        report.steps_run = step + 1
    report.wall_time_s = time.perf_counter() - t0
    return params, report


def training_loss_report(
    params: ModelParams, episodes, weights: LossWeights, cfg: TrainConfig, seed: int = 0
) -> dict:
    """One forward evaluation of the objective on a fresh batch."""
    params = fit_normalization(params, episodes)
    v_eps = [params.standardize(_episode_v(e)) for e in episodes]
    stacked = np.concatenate(v_eps, axis=0)
    envelope = (stacked.min(axis=0), stacked.max(axis=0))
    rng = np.random.default_rng([seed, 23])
    batch = _prepare_batch(v_eps, cfg, rng, envelope, params.dims.d_W)
    tape = Tape()
    ids = _load_params(tape, params)
    total, recon, causal, counterfactual, discovery = build_training_loss(
        tape, ids, params, batch, weights, cfg
    )
    return {
        "total": tape.scalar(total),
        "recon": tape.scalar(recon),
        "causal": tape.scalar(causal),
        "counterfactual": tape.scalar(counterfactual),
        "discovery": tape.scalar(discovery),
    }


# --- checkpoint container: magic, version, JSON header, flat f64 payload


def save_checkpoint(params: ModelParams, path, meta: dict | None = None) -> None:
    header = {
        "dims": {
            "d_W": params.dims.d_W,
            "d_I": params.dims.d_I,
            "d_V": params.dims.d_V,
            "w_blocks": [[n, s] for n, s in params.dims.w_blocks],
        },
        "seed": params.seed,
        "width": params.width,
        "factor_cols": None if params.factor_cols is None else list(params.factor_cols),
        "train_adjacency": params.train_adjacency,
        "arrays": [[name, list(params.arrays[name].shape)] for name, _ in _param_order(params.dims, params.width)],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, _ in _param_order(params.dims, params.width):
            fh.write(np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.norm_mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.norm_std, dtype="<f8").tobytes())
    if meta is not None:
        with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, sort_keys=True, indent=2)
            fh.write("\n")


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise ValidationError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        dims = DimsConfig(
            d_W=header["dims"]["d_W"],
            d_I=header["dims"]["d_I"],
            d_V=header["dims"]["d_V"],
            w_blocks=tuple((n, s) for n, s in header["dims"]["w_blocks"]),
        )
        arrays = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape))
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValidationError(f"truncated checkpoint at array {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        norm_mean = np.frombuffer(fh.read(dims.d_V * 8), dtype="<f8").copy()
        norm_std = np.frombuffer(fh.read(dims.d_V * 8), dtype="<f8").copy()
    factor_cols = header["factor_cols"]
    return ModelParams(
        dims=dims,
        seed=header["seed"],
        width=header["width"],
        factor_cols=None if factor_cols is None else tuple(factor_cols),
        arrays=arrays,
        norm_mean=norm_mean,
        norm_std=norm_std,
        train_adjacency=header["train_adjacency"],
    )


def checkpoint_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
