"""Basis reconstruction of support vectors and query feature maps."""

from __future__ import annotations

from typing import Sequence

from . import tensor as T
from .encoder import GroupedFeatureMap
from .semantics import BasisSet, SemanticVector, basis_set, query_weight_map, support_weights
from .tensor import Tensor

BASIS_MODES = ("self", "support")


def reconstruct_support(v: SemanticVector) -> Tensor:
    """Weighted sum of the unit sub-vectors, weights = softmax of their norms.

    A convex combination of unit vectors, so the result has norm <= 1.
    """
    w = support_weights(v)
    return T.matmul(w, basis_set(v).vectors)


def reconstruct_query(
    features: GroupedFeatureMap,
    basis_mode: str = "self",
    support_basis: BasisSet | None = None,
) -> GroupedFeatureMap:
    """Per-pixel reconstruction sum_b |F_b(x,y)| * v_b, returned as B=1, dim D.

    In ``self`` mode v_b is the pixel's own normalised group-b sub-vector, so
    the sum collapses to the plain groupwise sum of sub-vectors; computing it
    that way keeps zero pixels (weight 0, direction undefined) well behaved.
    ``support`` mode takes v_b from the episode's support basis instead.
    """
    h, w, bsz, d = features.height, features.width, features.groups, features.group_dim
    if basis_mode == "self":
        out = T.sum_(features.grouped(), axes=2)
    elif basis_mode == "support":
        if support_basis is None:
            raise ValueError("basis_mode='support' needs a support_basis")
        if (support_basis.groups, support_basis.dim) != (bsz, d):
            raise T.ShapeError(
                f"support basis {support_basis.groups}x{support_basis.dim} vs features {bsz}x{d}"
            )
        out = T.matmul(query_weight_map(features), support_basis.vectors)
    else:
        raise ValueError(f"unknown basis_mode {basis_mode!r}; expected one of {BASIS_MODES}")
    return GroupedFeatureMap(out.reshape(h, w, d), 1, d)


def kshot_aggregate(vectors: Sequence[Tensor]) -> Tensor:
    if not vectors:
        raise ValueError("kshot_aggregate needs at least one vector")
    dims = {v.shape for v in vectors}
    if len(dims) != 1:
        raise T.ShapeError(f"mismatched vector shapes {sorted(dims)}")
    if len(vectors) == 1:
        return vectors[0]
    total = vectors[0]
    for v in vectors[1:]:
        total = total + v
    return total * (1.0 / len(vectors))
