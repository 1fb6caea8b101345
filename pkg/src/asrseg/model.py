"""Per-mode forward pipelines shared by training, evaluation and gradient checks.

Modes, cumulative in the order of the module ablation:

* ``baseline``: masked-average support vector tiled onto the raw query
  features ("comparison features"), decoded; segmentation loss only.
* ``reconst_only``: the comparison features plus a reconstruction branch,
  the reconstructed query map concatenated with the reconstructed support
  vector; segmentation loss only.
* ``reconst_span``: adds the decoupling and (gated) contrastive losses.
* ``full_asr``: the reconstruction branch is fused with ``filter_strategy``
  (projection by default) instead of plain concatenation.

Every mode keeps the baseline's comparison features, so each row of the
ablation differs from the previous one by a single module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import GroupedFeatureMap, ModelParams, encode, mask_features
from .filtering import concat_map, decode, fuse, fused_channels
from .losses import LossWeights, contrastive_loss, decoupling_loss, segmentation_loss, total_loss
from .reconstruction import kshot_aggregate, reconstruct_query, reconstruct_support
from .semantics import SemanticVector, basis_set, masked_semantic_vector, semantic_vector, support_weights
from .tensor import Tensor

MODES = ("baseline", "reconst_only", "reconst_span", "full_asr")


def decoder_in_channels(mode: str, filter_strategy: str, groups: int, dim: int) -> int:
    comparison = 2 * groups * dim
    if mode == "baseline":
        return comparison
    if mode in ("reconst_only", "reconst_span"):
        return comparison + 2 * dim
    if mode == "full_asr":
        return comparison + fused_channels(filter_strategy, dim)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


@dataclass
class PipelineSpec:
    """The slice of a training config the forward pass depends on."""

    mode: str
    groups: int
    dim: int
    filter_strategy: str = "projection"
    basis_mode: str = "self"


@dataclass
class ForwardResult:
    logits: Tensor
    support_vectors: list[SemanticVector]
    query_vector: SemanticVector
    reconstructed_support: Tensor | None = None
    losses: dict[str, Tensor] = field(default_factory=dict)

    def weights(self) -> np.ndarray:
        """Mean support reconstruction weights over the shots."""
        return np.mean([support_weights(v).data for v in self.support_vectors], axis=0)


def encode_support(params: ModelParams, spec: PipelineSpec, pairs) -> list[GroupedFeatureMap]:
    out = []
    for image, mask in pairs:
        feats = encode(image, params.encoder, spec.groups, spec.dim)
        out.append(mask_features(feats, mask))
    return out


def encode_query(params: ModelParams, spec: PipelineSpec, image) -> GroupedFeatureMap:
    return encode(image, params.encoder, spec.groups, spec.dim)


def forward(
    params: ModelParams,
    spec: PipelineSpec,
    masked_support: list[GroupedFeatureMap],
    query: GroupedFeatureMap,
    query_mask=None,
    class_index: int | None = None,
    with_contrastive: bool = False,
) -> ForwardResult:
    """Logits for the query plus every loss the mode defines.

    Losses are computed only when ``query_mask`` (segmentation) and
    ``class_index`` (span losses) are supplied.
    """
    if not masked_support:
        raise ValueError("at least one support shot is required")
    if spec.mode not in MODES:
        raise ValueError(f"unknown mode {spec.mode!r}; expected one of {MODES}")
    sv = [masked_semantic_vector(f) for f in masked_support]
    qv = semantic_vector(query)
    proto = kshot_aggregate([v.values for v in sv])
    fused = concat_map(query, proto)
    recon = None
    if spec.mode != "baseline":
        recon = kshot_aggregate([reconstruct_support(v) for v in sv])
        basis = None
        if spec.basis_mode == "support":
            basis = basis_set(SemanticVector(proto, spec.groups, spec.dim))
        rq = reconstruct_query(query, spec.basis_mode, basis)
        if spec.mode == "full_asr":
            branch = fuse(spec.filter_strategy, rq, recon)
        else:
            branch = concat_map(rq, recon)
        fused = GroupedFeatureMap(T.concat([fused.values, branch.values], axis=2), 1,
                                  fused.values.shape[2] + branch.values.shape[2])
    logits = decode(fused, params.decoder)
    result = ForwardResult(logits, sv, qv, recon)
    if query_mask is not None:
        result.losses["seg"] = segmentation_loss(logits, query_mask)
    if class_index is not None and spec.mode in ("reconst_span", "full_asr"):
        decs = [decoupling_loss(support_weights(v), class_index) for v in sv]
        result.losses["dec"] = kshot_aggregate(decs)
        if with_contrastive:
            cons = [contrastive_loss(v, qv) for v in sv]
            result.losses["con"] = kshot_aggregate(cons)
    return result


def combined_loss(result: ForwardResult, weights: LossWeights, step: int) -> Tensor:
    """Weighted loss for one step; absent terms count as zero."""
    zero = Tensor(0.0)
    l_dec = result.losses.get("dec", zero)
    l_seg = result.losses.get("seg", zero)
    l_con = result.losses.get("con")
    if weights.contrastive_active(step) and l_con is None:
        l_con = zero
    return total_loss(l_dec, l_seg, l_con, weights, step)


def episode_forward(params, spec, support_pairs, query_image, query_mask=None,
                    class_index=None, with_contrastive=False) -> ForwardResult:
    masked = encode_support(params, spec, support_pairs)
    q = encode_query(params, spec, query_image)
    return forward(params, spec, masked, q, query_mask, class_index, with_contrastive)


def own_group_direction(v: SemanticVector, group: int) -> np.ndarray | None:
    """Unit direction of sub-vector ``group``; None if it is degenerate."""
    sub = v.sub_vector(group).data
    n = np.linalg.norm(sub)
    return sub / n if n >= 1e-12 else None
