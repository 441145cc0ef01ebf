"""Classical pooling baselines and their graph-shift reformulations.

The linear baselines (mean, first, middle, last, random) double as
shift operators: multiplying the feature matrix by a rank-1 selection
or averaging matrix reproduces each of them, which the test suite
checks mechanically.  Max pooling is nonlinear; a small trained MLP
applied to a shifted input stands in for it as an approximation
argument, not as a shipped model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import DomainError, ShapeError, UsageError

LINEAR_KINDS = ("mean", "first", "middle", "last", "random")
POOLING_KINDS = ("mean", "max", "mean_std", "quantile", "first", "middle", "last", "random")


@dataclass
class ShiftMatrix:
    """NxN shift operator; for the baselines here every row is identical,
    so any row of the shifted output serves as the pooled vector."""

    matrix: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.matrix, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ShapeError(f"shift matrix must be square, got {arr.shape}")
        self.matrix = arr

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def make_shift(kind: str, n: int, seed: int | None = None) -> ShiftMatrix:
    """Build the shift operator for a linear pooling kind.

    Vertex indices are 1-based to match the selection convention
    (first = 1, middle = floor(N/2) clamped to >= 1, last = N); random
    draws the index uniformly from a seeded generator.
    """
    if n < 1:
        raise DomainError(f"shift matrix needs N >= 1, got {n}")
    if kind == "mean":
        return ShiftMatrix(np.full((n, n), 1.0 / n))
    if kind == "first":
        index = 1
    elif kind == "middle":
        index = max(n // 2, 1)
    elif kind == "last":
        index = n
    elif kind == "random":
        if seed is None:
            raise UsageError("random pooling requires an explicit seed")
        index = int(np.random.default_rng(seed).integers(1, n + 1))
    else:
        raise UsageError(f"no shift form for pooling kind {kind!r}")
    matrix = np.zeros((n, n))
    matrix[:, index - 1] = 1.0
    return ShiftMatrix(matrix)


def shift(a: ShiftMatrix, features: np.ndarray) -> np.ndarray:
    """Apply the shift operator: features are FxN, output is NxF."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-D, got shape {x.shape}")
    if x.shape[1] != a.size:
        raise ShapeError(
            f"shift: matrix is {a.size}x{a.size} but features have {x.shape[1]} columns")
    return a.matrix @ x.T


def pool(kind: str, features: np.ndarray, seed: int | None = None) -> np.ndarray:
    """Pool an FxN feature matrix down to one vector.

    mean/max -> length F; mean_std -> mean then population std (2F);
    quantile -> quartiles 0.25/0.5/0.75 per dimension, linear
    interpolation (3F); first/middle/last/random -> the selected frame.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-D, got shape {x.shape}")
    n = x.shape[1]
    if n < 1:
        raise DomainError("pooling needs at least one frame")
    if kind == "mean":
        return x.mean(axis=1)
    if kind == "max":
        return x.max(axis=1)
    if kind == "mean_std":
        return np.concatenate([x.mean(axis=1), x.std(axis=1)])
    if kind == "quantile":
        q = np.quantile(x, [0.25, 0.5, 0.75], axis=1, method="linear")
        return q.reshape(-1)
    if kind in ("first", "middle", "last", "random"):
        sel = make_shift(kind, n, seed=seed)
        column = int(np.argmax(sel.matrix[0]))
        return x[:, column].copy()
    raise UsageError(f"unknown pooling kind {kind!r}")


# --------------------------------------------------------------------------
# MLP stand-in for max pooling
# --------------------------------------------------------------------------


@dataclass
class MaxApproxMlp:
    """Tiny regressor mapping a shifted feature block to max pooling.

    The shift matrix travels with the parameters so application matches
    the layout the model was fitted on.  Untrained instances refuse to
    run.
    """

    shift_matrix: ShiftMatrix
    weights: list[dc.Value] = field(default_factory=list)
    fitted: bool = False

    def apply(self, features: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise UsageError("MaxApproxMlp used before fitting")
        shifted = shift(self.shift_matrix, features)
        w1, b1, w2, b2 = self.weights
        flat = shifted.reshape(1, -1)
        hidden = np.maximum(flat @ w1.data + b1.data, 0.0)
        return (hidden @ w2.data + b2.data).reshape(-1)


def max_as_mlp(features: np.ndarray, trained_mlp: MaxApproxMlp) -> np.ndarray:
    """Evaluate the fitted max-pooling approximation on one FxN block."""
    return trained_mlp.apply(features)


def fit_max_mlp(feature_dim: int, n_frames: int,
                shift_matrix: ShiftMatrix | None = None,
                hidden: int = 16, steps: int = 2000, lr: float = 0.02,
                seed: int = 0) -> MaxApproxMlp:
    """Train the approximation on uniform [0,1] frames against exact max.

    The default shift operator is the identity: a rank-deficient shift
    (e.g. the all-1/N averaging matrix) destroys the per-frame
    information the regression target needs, so the approximation
    argument only holds for an information-preserving shift.
    """
    if shift_matrix is None:
        shift_matrix = ShiftMatrix(np.eye(n_frames))
    rng = np.random.default_rng(seed)
    in_dim = n_frames * feature_dim
    w1 = dc.parameter(rng.uniform(-1, 1, (in_dim, hidden)) / np.sqrt(in_dim), name="w1")
    b1 = dc.parameter(np.zeros((1, hidden)), name="b1")
    w2 = dc.parameter(rng.uniform(-1, 1, (hidden, feature_dim)) / np.sqrt(hidden), name="w2")
    b2 = dc.parameter(np.zeros((1, feature_dim)), name="b2")
    params = [w1, b1, w2, b2]

    # plain Adam, kept local: this is a test-harness fit, not the trainer
    moments = [(np.zeros_like(p.data), np.zeros_like(p.data)) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    batch = 64
    for step in range(1, steps + 1):
        x = rng.uniform(0.0, 1.0, (batch, feature_dim, n_frames))
        target = x.max(axis=2)
        shifted = np.einsum("ij,bfj->bif", shift_matrix.matrix, x).reshape(batch, in_dim)
        for p in params:
            p.zero_grad()
        with dc.Tape() as tape:
            h = dc.relu(dc.add(dc.matmul(dc.constant(shifted), w1), b1))
            pred = dc.add(dc.matmul(h, w2), b2)
            err = dc.add(pred, dc.constant(-target))
            loss = dc.scale(dc.sum_all(dc.mul(err, err)), 1.0 / (batch * feature_dim))
            tape.backward(loss)
        for p, (m, v) in zip(params, moments):
            m[...] = beta1 * m + (1 - beta1) * p.grad
            v[...] = beta2 * v + (1 - beta2) * p.grad ** 2
            m_hat = m / (1 - beta1 ** step)
            v_hat = v / (1 - beta2 ** step)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return MaxApproxMlp(shift_matrix=shift_matrix, weights=params, fitted=True)
