"""Additive angular margin softmax for speaker classification.

Logits are scaled cosines between the L2-normalized embedding and
L2-normalized per-class rows; the true-class cosine has the margin
added to its angle before scaling.  The loss is the cross entropy of
those logits, computed in one fused differentiable op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Value
from .errors import NumericError, ShapeError, UsageError

COSINE_CLAMP = 1e-7
ROW_NORM_FLOOR = 1e-12

DEFAULT_MARGIN = 0.2
DEFAULT_SCALE = 30.0


@dataclass
class AamHead:
    class_rows: Value  # C x F'
    margin: float = DEFAULT_MARGIN
    scale: float = DEFAULT_SCALE

    def __post_init__(self):
        if not 0.0 <= self.margin < np.pi:
            raise UsageError(f"margin must lie in [0, pi), got {self.margin}")
        if self.scale <= 0.0:
            raise UsageError(f"scale must be positive, got {self.scale}")

    @property
    def n_classes(self) -> int:
        return self.class_rows.shape[0]

    @property
    def dim(self) -> int:
        return self.class_rows.shape[1]


def init_aam_head(n_classes: int, dim: int, margin: float = DEFAULT_MARGIN,
                  scale: float = DEFAULT_SCALE, seed: int = 0,
                  dtype=np.float64) -> AamHead:
    if n_classes < 2:
        raise UsageError(f"need at least 2 classes, got {n_classes}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(dim)
    rows = rng.uniform(-bound, bound, (n_classes, dim)).astype(dtype)
    return AamHead(class_rows=dc.parameter(rows, name="aam/class_rows"),
                   margin=margin, scale=scale)


def aam_loss(embedding: Value, label: int, head: AamHead) -> Value:
    """Cross entropy of margin-adjusted scaled cosine logits (1x1 output)."""
    if embedding.shape[0] != 1:
        raise ShapeError(f"embedding must be a single row, got {embedding.shape}")
    if embedding.shape[1] != head.dim:
        raise ShapeError(
            f"embedding dim {embedding.shape[1]} != head dim {head.dim}")
    if not 0 <= label < head.n_classes:
        raise UsageError(
            f"label {label} outside [0, {head.n_classes})")

    rows = head.class_rows
    e = embedding.data[0]
    e_norm = float(np.linalg.norm(e))
    if e_norm < ROW_NORM_FLOOR:
        raise NumericError(
            f"embedding norm {e_norm:.3e} is too small to normalize")
    e_unit = e / e_norm

    row_norms = np.linalg.norm(rows.data, axis=1)
    denoms = np.maximum(row_norms, ROW_NORM_FLOOR)
    units = rows.data / denoms[:, None]
    cosines = units @ e_unit  # (C,)

    m, s = head.margin, head.scale
    c_y = cosines[label]
    clamped = np.clip(c_y, -1.0 + COSINE_CLAMP, 1.0 - COSINE_CLAMP)
    theta = np.arccos(clamped)
    logits = s * cosines
    logits[label] = s * np.cos(theta + m)

    # Work relative to the target logit: loss = logsumexp(logits - l_y).
    # When the target dominates, the sum is 1 + tiny, so log1p keeps the
    # near-zero loss accurate instead of rounding through 1.0.
    z = logits - logits[label]
    z_max = z.max()
    if z_max <= 0.0:
        others = np.delete(z, label)
        loss_value = np.log1p(np.exp(others).sum())
    else:
        loss_value = z_max + np.log(np.exp(z - z_max).sum())
    loss_data = np.array([[loss_value]])

    out, tape = dc.emit("aam_loss", loss_data, (embedding, rows))
    if tape:
        probs = np.exp(z - loss_value)  # softmax of the logits

        def backward():
            g = out.grad[0, 0]
            dlogits = g * probs
            dlogits[label] -= g
            # logit -> cosine: scale s everywhere; the true class also
            # goes through the angle-margin map, whose derivative is
            # zero outside the clamp window.
            dcos = dlogits * s
            if abs(c_y) < 1.0 - COSINE_CLAMP:
                dcos[label] *= np.cos(m) + clamped * np.sin(m) / np.sqrt(1.0 - clamped ** 2)
            else:
                dcos[label] = 0.0
            if embedding.requires_grad:
                de_unit = dcos @ units
                de = (de_unit - np.dot(de_unit, e_unit) * e_unit) / e_norm
                embedding.grad += de[None, :]
            if rows.requires_grad:
                du = dcos[:, None] * e_unit[None, :]
                above = row_norms > ROW_NORM_FLOOR
                proj = np.sum(du * units, axis=1, keepdims=True)
                drows = np.where(above[:, None],
                                 (du - proj * units) / denoms[:, None],
                                 du / ROW_NORM_FLOOR)
                rows.grad += drows
        tape.record("aam_loss", backward)
    return out
