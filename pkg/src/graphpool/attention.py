"""Attention adjacency built from projected vertex features.

Frames are graph vertices on a fully connected graph; edge weights are
a row-softmax over temperature-scaled pairwise cosines of the projected
features.  Row-softmax normalization makes the adjacency generally
asymmetric even though the cosine matrix is symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Value
from .errors import DomainError, ShapeError


@dataclass
class AttentionParams:
    """Learnable projection (F'xF) and softmax temperature (1x1)."""

    projection: Value
    temperature: Value

    @property
    def projected_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.projection.shape[1]


def init_attention(feature_dim: int, projected_dim: int | None = None,
                   rng: np.random.Generator | None = None,
                   dtype=np.float64) -> AttentionParams:
    """Uniform fan-in init for the projection; temperature starts at 1."""
    if projected_dim is None:
        projected_dim = feature_dim
    rng = rng or np.random.default_rng(0)
    bound = 1.0 / np.sqrt(feature_dim)
    w = rng.uniform(-bound, bound, (projected_dim, feature_dim)).astype(dtype)
    return AttentionParams(
        projection=dc.parameter(w, name="attention.projection"),
        temperature=dc.parameter(np.array([[1.0]], dtype=dtype), name="attention.temperature"),
    )


@dataclass
class Adjacency:
    """Row-stochastic NxN attention matrix plus the projected features
    it was built from (retained as the round-0 vertex state)."""

    matrix: Value
    projected: Value

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def project(features: Value, params: AttentionParams) -> Value:
    """Project per-vertex features (NxF rows) into the attention space."""
    if features.shape[1] != params.feature_dim:
        raise ShapeError(
            f"project: features have dim {features.shape[1]}, "
            f"projection expects {params.feature_dim}")
    return dc.matmul(features, dc.transpose(params.projection))


def build_adjacency(projected: Value, temperature: Value | float) -> Adjacency:
    """Row-softmax over temperature-scaled pairwise cosines.

    Every row sums to 1 and every entry is strictly positive;
    self-loops are kept (the diagonal term stays in the softmax).
    """
    if projected.shape[0] < 1:
        raise DomainError("adjacency needs at least one vertex")
    cosines = dc.cosine_similarity_matrix(projected)
    scaled = dc.scale(cosines, temperature)
    matrix = dc.row_softmax(scaled)
    return Adjacency(matrix=matrix, projected=projected)


def attend(features: Value, params: AttentionParams) -> Adjacency:
    """Project then build the adjacency in one call."""
    return build_adjacency(project(features, params), params.temperature)
