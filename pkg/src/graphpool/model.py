"""The trainable graph pooling model.

Pipeline per utterance: optional trainable weighting of the encoder's
hidden-feature layers, projection into the attention space, one
adjacency built from pairwise cosines (reused across all message
rounds), T rounds of message passing and per-vertex update, then a
gated readout with a residual over the mean-pooled state of every
round.  The thin variant drops the readout gate branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from . import diffcore as dc
from .dataio import FeatureStack
from .diffcore import Value
from .errors import DegenerateWeightsError, ShapeError, UsageError

LAYER_WEIGHT_SUM_GUARD = 1e-8

_ACTIVATIONS = {"relu": dc.relu, "gelu": dc.gelu, "sigmoid": dc.sigmoid}


@dataclass
class ModelConfig:
    feature_dim: int = 768
    projected_dim: int | None = None  # None -> feature_dim
    rounds: int = 2
    mlp_hidden: int = 1024
    activation: str = "relu"
    use_layer_weighting: bool = True
    thin: bool = False
    n_layers: int = 13

    def __post_init__(self):
        if self.rounds < 1:
            raise UsageError(f"rounds must be >= 1, got {self.rounds}")
        if self.mlp_hidden < 1:
            raise UsageError(f"mlp_hidden must be >= 1, got {self.mlp_hidden}")
        if self.activation not in _ACTIVATIONS:
            raise UsageError(
                f"unknown activation {self.activation!r}, expected one of "
                f"{sorted(_ACTIVATIONS)}")

    @property
    def resolved_projected_dim(self) -> int:
        return self.projected_dim if self.projected_dim is not None else self.feature_dim


@dataclass
class Mlp:
    """One-hidden-layer perceptron acting on row-vector vertices."""

    w1: Value
    b1: Value
    w2: Value
    b2: Value

    def values(self) -> list[Value]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class UpdateBlock:
    mlp: Mlp
    ln_gain: Value
    ln_bias: Value

    def values(self) -> list[Value]:
        return self.mlp.values() + [self.ln_gain, self.ln_bias]


@dataclass
class ModelParams:
    attention: att.AttentionParams
    updates: list[UpdateBlock]
    readout_value: Mlp
    readout_gate: Mlp | None  # None for the thin variant
    layer_weights: list[Value] = field(default_factory=list)


def _init_mlp(in_dim: int, hidden: int, out_dim: int,
              rng: np.random.Generator, dtype, prefix: str) -> Mlp:
    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape).astype(dtype)

    return Mlp(
        w1=dc.parameter(uniform(in_dim, (in_dim, hidden)), name=f"{prefix}/w1"),
        b1=dc.parameter(np.zeros((1, hidden), dtype=dtype), name=f"{prefix}/b1"),
        w2=dc.parameter(uniform(hidden, (hidden, out_dim)), name=f"{prefix}/w2"),
        b2=dc.parameter(np.zeros((1, out_dim), dtype=dtype), name=f"{prefix}/b2"),
    )


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    rng = np.random.default_rng(seed)
    fp = config.resolved_projected_dim
    attention = att.init_attention(config.feature_dim, fp, rng=rng, dtype=dtype)
    updates = [
        UpdateBlock(
            mlp=_init_mlp(fp, config.mlp_hidden, fp, rng, dtype, f"model/update{t}"),
            ln_gain=dc.parameter(np.ones((1, fp), dtype=dtype), name=f"model/update{t}/ln_gain"),
            ln_bias=dc.parameter(np.zeros((1, fp), dtype=dtype), name=f"model/update{t}/ln_bias"),
        )
        for t in range(1, config.rounds + 1)
    ]
    readout_value = _init_mlp(fp, config.mlp_hidden, fp, rng, dtype, "model/readout_value")
    readout_gate = None
    if not config.thin:
        readout_gate = _init_mlp(fp, config.mlp_hidden, fp, rng, dtype, "model/readout_gate")
    layer_weights = []
    if config.use_layer_weighting:
        layer_weights = [
            dc.parameter(np.array([[1.0]], dtype=dtype), name=f"model/layer_weights/{i:02d}")
            for i in range(config.n_layers)
        ]
    return ModelParams(
        attention=attention,
        updates=updates,
        readout_value=readout_value,
        readout_gate=readout_gate,
        layer_weights=layer_weights,
    )


def named_parameters(params: ModelParams) -> dict[str, Value]:
    """Stable name -> tensor map used by the optimizer and checkpoints."""
    out: dict[str, Value] = {
        "model/attention/projection": params.attention.projection,
        "model/attention/temperature": params.attention.temperature,
    }
    for t, block in enumerate(params.updates, start=1):
        out[f"model/update{t}/w1"] = block.mlp.w1
        out[f"model/update{t}/b1"] = block.mlp.b1
        out[f"model/update{t}/w2"] = block.mlp.w2
        out[f"model/update{t}/b2"] = block.mlp.b2
        out[f"model/update{t}/ln_gain"] = block.ln_gain
        out[f"model/update{t}/ln_bias"] = block.ln_bias
    for part, mlp in (("readout_value", params.readout_value),
                      ("readout_gate", params.readout_gate)):
        if mlp is None:
            continue
        out[f"model/{part}/w1"] = mlp.w1
        out[f"model/{part}/b1"] = mlp.b1
        out[f"model/{part}/w2"] = mlp.w2
        out[f"model/{part}/b2"] = mlp.b2
    for i, w in enumerate(params.layer_weights):
        out[f"model/layer_weights/{i:02d}"] = w
    return out


def param_count(params: ModelParams) -> int:
    return sum(v.data.size for v in named_parameters(params).values())


# --------------------------------------------------------------------------
# Forward pieces
# --------------------------------------------------------------------------


def weight_layers(layers: list[Value], weights: list[Value]) -> Value:
    """Trainable normalized combination of the hidden-feature layers.

    Output = sum_i w_i x_i / sum_i w_i per frame; scale-invariant in the
    weights.  A near-zero weight sum is a training failure mode and is
    rejected rather than divided through.
    """
    if len(layers) != len(weights):
        raise ShapeError(
            f"weight_layers: {len(layers)} layers but {len(weights)} weights")
    shape = layers[0].shape
    for x in layers[1:]:
        if x.shape != shape:
            raise ShapeError("weight_layers: layer shapes disagree")
    w = np.array([wi.data[0, 0] for wi in weights])
    total = float(w.sum())
    if abs(total) < LAYER_WEIGHT_SUM_GUARD:
        raise DegenerateWeightsError(
            f"layer-weight sum {total:.3e} is below the {LAYER_WEIGHT_SUM_GUARD} guard")
    stacked = np.stack([x.data for x in layers])
    out_data = np.tensordot(w, stacked, axes=(0, 0)) / total
    out, tape = dc.emit("weight_layers", out_data, tuple(layers) + tuple(weights))
    if tape:
        def backward():
            g = out.grad
            for xi, wi in zip(layers, weights):
                if xi.requires_grad:
                    xi.grad += g * (wi.data[0, 0] / total)
                if wi.requires_grad:
                    wi.grad[0, 0] += (np.sum(g * xi.data) - np.sum(g * out.data)) / total
        tape.record("weight_layers", backward)
    return out


def message(adjacency: Value, states: Value) -> Value:
    """One-round neighbor aggregation: a first-order graph shift of the
    vertex states by the attention matrix."""
    if adjacency.shape[0] != adjacency.shape[1]:
        raise ShapeError(f"adjacency must be square, got {adjacency.shape}")
    if adjacency.shape[1] != states.shape[0]:
        raise ShapeError(
            f"message: adjacency {adjacency.shape} does not match states {states.shape}")
    return dc.matmul(adjacency, states)


def _apply_mlp(x: Value, mlp: Mlp, activation) -> Value:
    hidden = activation(dc.add(dc.matmul(x, mlp.w1), mlp.b1))
    return dc.add(dc.matmul(hidden, mlp.w2), mlp.b2)


def update(aggregated: Value, round_index: int, params: ModelParams,
           config: ModelConfig) -> Value:
    """Per-vertex MLP, layer norm, then activation (round_index is 1-based)."""
    if not 1 <= round_index <= config.rounds:
        raise UsageError(
            f"round_index must lie in [1, {config.rounds}], got {round_index}")
    act = _ACTIVATIONS[config.activation]
    block = params.updates[round_index - 1]
    y = _apply_mlp(aggregated, block.mlp, act)
    y = dc.layer_norm(y, block.ln_gain, block.ln_bias)
    return act(y)


def readout(history: list[Value], params: ModelParams, config: ModelConfig) -> Value:
    """Gate the final state, then add mean-pooled states of every round
    (the residual) to the max-pooled gated state."""
    if len(history) != config.rounds + 1:
        raise UsageError(
            f"readout needs the full history of {config.rounds + 1} states, "
            f"got {len(history)}")
    act = _ACTIVATIONS[config.activation]
    final = history[-1]
    value = _apply_mlp(final, params.readout_value, act)
    if params.readout_gate is None:
        gated = value
    else:
        gate = dc.sigmoid(_apply_mlp(final, params.readout_gate, act))
        gated = dc.mul(value, gate)
    residual = dc.mean_over_rows(history[0])
    for h in history[1:]:
        residual = dc.add(residual, dc.mean_over_rows(h))
    return dc.add(residual, dc.max_over_rows(gated))


def forward(stack: FeatureStack, params: ModelParams, config: ModelConfig) -> Value:
    """Full pooling pass: one utterance in, one embedding (1xF') out.

    The adjacency is built once from the projected round-0 states and
    reused for every message round.
    """
    dtype = params.attention.projection.data.dtype
    if config.use_layer_weighting:
        if stack.layers != config.n_layers:
            raise ShapeError(
                f"layer weighting expects {config.n_layers} layers, stack has {stack.layers}")
        layers = [dc.constant(stack.values[i].astype(dtype)) for i in range(stack.layers)]
        features = weight_layers(layers, params.layer_weights)
    else:
        if stack.layers != 1:
            raise ShapeError(
                f"single-layer model expects L=1, stack has {stack.layers}")
        features = dc.constant(stack.values[0].astype(dtype))
    if features.shape[1] != config.feature_dim:
        raise ShapeError(
            f"stack feature dim {features.shape[1]} != config {config.feature_dim}")
    adjacency = att.attend(features, params.attention)
    state = adjacency.projected
    history = [state]
    for t in range(1, config.rounds + 1):
        aggregated = message(adjacency.matrix, state)
        state = update(aggregated, t, params, config)
        history.append(state)
    return readout(history, params, config)
