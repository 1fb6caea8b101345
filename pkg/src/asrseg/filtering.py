"""Semantic filtering of reconstructed query features and mask decoding."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import DOWNSAMPLE, DecoderParams, GroupedFeatureMap
from .tensor import Tensor

STRATEGIES = ("projection", "cosine", "concat", "none")


class DegenerateSupportVector(ValueError):
    pass


def _unit(support_vec: Tensor) -> Tensor:
    n = T.norm(support_vec, axis=0)
    if n.item() < T.DIV_EPS:
        raise DegenerateSupportVector(f"support vector norm {n.item():.3g} is below {T.DIV_EPS}")
    return support_vec / n


def project(recon_query: GroupedFeatureMap, support_vec: Tensor) -> GroupedFeatureMap:
    """Replace every pixel vector by its signed projection onto the support direction."""
    d = recon_query.values.shape[2]
    if support_vec.shape != (d,):
        raise T.ShapeError(f"support vector {support_vec.shape} vs {d} feature channels")
    u = _unit(support_vec)
    coeff = T.matmul(recon_query.values, u)  # H×W
    h, w = coeff.shape
    out = T.matmul(coeff.reshape(h, w, 1), u.reshape(1, d))
    return GroupedFeatureMap(out, 1, d)


def cosine_map(recon_query: GroupedFeatureMap, support_vec: Tensor) -> GroupedFeatureMap:
    """Per-pixel cosine to the support vector; zero pixels map to 0."""
    u = _unit(support_vec)
    x = recon_query.values
    dots = T.matmul(x, u)
    norms = T.norm(x, axis=2)
    zero = (norms.data < T.DIV_EPS).astype(np.float64)
    cos = dots / (norms + Tensor(zero))
    h, w = cos.shape
    return GroupedFeatureMap(cos.reshape(h, w, 1), 1, 1)


def concat_map(recon_query: GroupedFeatureMap, support_vec: Tensor) -> GroupedFeatureMap:
    x = recon_query.values
    h, w, c = x.shape
    if support_vec.data.ndim != 1:
        raise T.ShapeError(f"support vector must be 1-d, got {support_vec.shape}")
    n = support_vec.shape[0]
    tiled = T.broadcast_to(support_vec.reshape(1, 1, n), (h, w, n))
    return GroupedFeatureMap(T.concat([x, tiled], axis=2), 1, c + n)


def fuse(strategy: str, recon_query: GroupedFeatureMap, support_vec: Tensor) -> GroupedFeatureMap:
    if strategy == "projection":
        return project(recon_query, support_vec)
    if strategy == "cosine":
        return cosine_map(recon_query, support_vec)
    if strategy == "concat":
        _unit(support_vec)
        return concat_map(recon_query, support_vec)
    if strategy == "none":
        return recon_query
    raise ValueError(f"unknown filter strategy {strategy!r}; expected one of {STRATEGIES}")


def fused_channels(strategy: str, dim: int) -> int:
    """Channel count :func:`fuse` produces for ``dim``-channel inputs."""
    return {"projection": dim, "cosine": 1, "concat": 2 * dim, "none": dim}[strategy]


def decode(fused: GroupedFeatureMap, params: DecoderParams) -> Tensor:
    """Two 3×3 conv+relu layers, a 1×1 conv to 2 logits, ×4 bilinear upsample."""
    x = fused.values
    if x.shape[2] != params.conv1_w.shape[2]:
        raise T.ShapeError(f"decoder expects {params.conv1_w.shape[2]} channels, got {x.shape[2]}")
    x = T.relu(T.conv2d(x, params.conv1_w, params.conv1_b))
    x = T.relu(T.conv2d(x, params.conv2_w, params.conv2_b))
    x = T.conv2d(x, params.out_w, params.out_b)
    return T.upsample_bilinear(x, DOWNSAMPLE)


def predict_mask(logits) -> np.ndarray:
    """Per-pixel argmax; exact ties go to background."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (z[..., 1] > z[..., 0]).astype(np.uint8)


def foreground_probability(logits) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    # logistic of the logit margin, in a form that cannot overflow
    return 0.5 * (1.0 + np.tanh(0.5 * (z[..., 1] - z[..., 0])))
