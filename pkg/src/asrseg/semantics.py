"""Semantic vectors, reconstruction weights and basis vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import GroupedFeatureMap
from .tensor import Tensor

DEGENERATE_EPS = 1e-12


class DegenerateSubvector(ValueError):
    """A channel group pooled to (numerically) the zero vector."""

    def __init__(self, group: int, norm: float):
        super().__init__(f"sub-vector of group {group} has norm {norm:.3g} < {DEGENERATE_EPS}")
        self.group = group
        self.norm = norm


@dataclass
class SemanticVector:
    values: Tensor
    groups: int
    group_dim: int

    def __post_init__(self):
        if self.values.shape != (self.groups * self.group_dim,):
            raise T.ShapeError(f"semantic vector shape {self.values.shape} != ({self.groups}*{self.group_dim},)")

    def sub_vector(self, b: int) -> Tensor:
        d = self.group_dim
        return self.values[b * d:(b + 1) * d]

    def matrix(self) -> Tensor:
        """Sub-vectors stacked as a B×D tensor."""
        return self.values.reshape(self.groups, self.group_dim)

    def sub_norms(self) -> Tensor:
        return T.norm(self.matrix(), axis=1)


@dataclass
class BasisSet:
    """B unit vectors of dimension D, one per channel group."""

    vectors: Tensor

    @property
    def groups(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def vector(self, b: int) -> Tensor:
        return self.vectors[b]


def semantic_vector(features: GroupedFeatureMap) -> SemanticVector:
    return SemanticVector(T.gap(features.values), features.groups, features.group_dim)


def masked_semantic_vector(features: GroupedFeatureMap) -> SemanticVector:
    """Masked average pooling: the spatial sum of a masked map over its mask area.

    Equals :func:`semantic_vector` scaled by H·W / |mask|, so the result
    does not shrink with the object's share of the frame.
    """
    if features.mask is None:
        raise ValueError("masked_semantic_vector needs a map produced by mask_features")
    area = float(features.mask.sum())
    if area < 1.0:
        raise T.DomainError("support mask is empty at feature resolution")
    scale = features.height * features.width / area
    return SemanticVector(T.gap(features.values) * scale, features.groups, features.group_dim)


def support_weights(v: SemanticVector) -> Tensor:
    """Softmax over the B sub-vector norms (length-B, on the simplex)."""
    return T.softmax(v.sub_norms())


def query_weight_map(features: GroupedFeatureMap) -> Tensor:
    """H×W×B map of raw per-pixel group norms (no normalisation across groups)."""
    return T.norm(features.grouped(), axis=3)


def unit_rows(m: Tensor) -> Tensor:
    """Normalise each row of a B×D tensor; raises on a (near-)zero row."""
    norms = T.norm(m, axis=1)
    small = np.flatnonzero(norms.data < DEGENERATE_EPS)
    if small.size:
        b = int(small[0])
        raise DegenerateSubvector(b, float(norms.data[b]))
    rows, cols = m.shape
    return m / T.broadcast_to(norms.reshape(rows, 1), (rows, cols))


def basis_set(v: SemanticVector) -> BasisSet:
    return BasisSet(unit_rows(v.matrix()))
