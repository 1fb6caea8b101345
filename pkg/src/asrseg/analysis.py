"""Two-basis reconstruction algebra and diagnostic statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class ReconSpec2D:
    """Weights of u1 = w11 v1 + (1-w11) v2 and u2 = w21 v1 + (1-w21) v2.

    The scaling constants of the two reconstructions are fixed at 1.
    """

    w11: float
    w21: float
    cos_theta: float

    def __post_init__(self):
        for name in ("w11", "w21"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not -1.0 <= self.cos_theta <= 1.0:
            raise ValueError("cos_theta must lie in [-1, 1]")


def mixture_cosine_identity(spec: ReconSpec2D) -> float:
    """Closed form 1 + (w11 + w21 - 2 w11 w21)(cos θ - 1).

    Exact for the inner product <u1, u2> of the unnormalised combinations;
    it is not the normalised cosine of u1 and u2.
    """
    a, b = spec.w11, spec.w21
    return 1.0 + (a + b - 2.0 * a * b) * (spec.cos_theta - 1.0)


def _identity_arrays(w11, w21, cos_t):
    return 1.0 + (w11 + w21 - 2.0 * w11 * w21) * (cos_t - 1.0)


@dataclass
class IdentityCheck:
    max_abs_error: float
    max_normalized_gap: float
    n_samples: int


def identity_errors(w11, w21, theta) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample |<u1,u2> - identity| and |cos(u1,u2) - identity| on explicit 2-D vectors."""
    w11, w21, theta = (np.asarray(x, dtype=np.float64) for x in (w11, w21, theta))
    v1 = np.stack([np.ones_like(theta), np.zeros_like(theta)], axis=-1)
    v2 = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    u1 = w11[..., None] * v1 + (1 - w11)[..., None] * v2
    u2 = w21[..., None] * v1 + (1 - w21)[..., None] * v2
    inner = (u1 * u2).sum(-1)
    closed = _identity_arrays(w11, w21, np.cos(theta))
    n1 = np.linalg.norm(u1, axis=-1)
    n2 = np.linalg.norm(u2, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where((n1 > 0) & (n2 > 0), inner / (n1 * n2), np.nan)
    return np.abs(inner - closed), np.abs(cos - closed)


def verify_identity(n_samples: int, seed: int = 0) -> IdentityCheck:
    """Sample (w11, w21, θ) uniformly and compare the closed form to explicit vectors."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    w11 = rng.uniform(0, 1, n_samples)
    w21 = rng.uniform(0, 1, n_samples)
    theta = rng.uniform(0, np.pi, n_samples)
    err, gap = identity_errors(w11, w21, theta)
    return IdentityCheck(float(err.max()), float(np.nanmax(gap)) if np.isfinite(gap).any() else float("nan"),
                         n_samples)


@dataclass
class OrthogonalityResult:
    class_ids: list[int]
    matrix: np.ndarray
    mean_offdiag: float


def orthogonality_matrix(class_vectors: Sequence[tuple[int, np.ndarray]], tol: float = 1e-6) -> OrthogonalityResult:
    """|cos| between unit class vectors; diagonal is 1."""
    if len(class_vectors) < 2:
        raise ValueError("need at least two class vectors")
    ids = [int(c) for c, _ in class_vectors]
    m = np.stack([np.asarray(v, dtype=np.float64) for _, v in class_vectors])
    norms = np.linalg.norm(m, axis=1)
    if np.abs(norms - 1.0).max() > tol:
        raise ValueError("class vectors must have unit norm")
    mat = np.abs(m @ m.T)
    np.fill_diagonal(mat, 1.0)
    n = len(ids)
    off = (mat.sum() - n) / (n * (n - 1))
    return OrthogonalityResult(ids, mat, float(off))


def entropy(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=np.float64)
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class SparsityProfile:
    mean_weights: dict[int, np.ndarray]
    entropy: dict[int, float]


def sparsity_profile(weight_vectors: dict[int, Sequence[np.ndarray]], tol: float = 1e-9) -> SparsityProfile:
    """Mean reconstruction weights per class and their Shannon entropy (nats)."""
    means, ents = {}, {}
    for c, ws in weight_vectors.items():
        if len(ws) == 0:
            raise ValueError(f"class {c} has no weight vectors")
        arr = np.stack([np.asarray(w, dtype=np.float64) for w in ws])
        if (arr < -tol).any() or np.abs(arr.sum(axis=1) - 1.0).max() > tol:
            raise ValueError(f"weights of class {c} are off the simplex")
        mean = arr.mean(axis=0)
        means[c] = mean
        ents[c] = entropy(mean)
    return SparsityProfile(means, ents)


def confusion_matrix(eval_records: Iterable[tuple[np.ndarray, np.ndarray]], n_labels: int) -> np.ndarray:
    """Foreground-pixel confusion counts over labels ``0..n_labels-1``.

    Label 0 is background.  Each record is (true label map, predicted label
    map); only pixels whose true label is nonzero are counted, so row 0
    stays empty and row i sums to the foreground pixel count of label i.
    """
    out = np.zeros((n_labels, n_labels), dtype=np.int64)
    for truth, pred in eval_records:
        t = np.asarray(truth, dtype=np.int64).ravel()
        p = np.asarray(pred, dtype=np.int64).ravel()
        if t.shape != p.shape:
            raise ValueError("label maps differ in shape")
        if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= n_labels):
            raise ValueError(f"label ids must lie in [0, {n_labels})")
        fg = t > 0
        out += np.bincount(t[fg] * n_labels + p[fg], minlength=n_labels * n_labels).reshape(n_labels, n_labels)
    return out


def assign_labels(fg_probs: Sequence[np.ndarray]) -> np.ndarray:
    """Label map from per-candidate foreground probabilities (candidate i -> label i+1).

    A pixel goes to the most probable candidate when that probability
    exceeds 0.5, otherwise to background (label 0).
    """
    stack = np.stack(fg_probs)
    best = stack.argmax(axis=0)
    return np.where(stack.max(axis=0) > 0.5, best + 1, 0)


def max_sparsity_term(resolution: float = 0.01) -> tuple[float, list[tuple[float, float]]]:
    """Grid-search the maximum of w11 + w21 - 2 w11 w21 over the unit square."""
    g = np.round(np.arange(0.0, 1.0 + resolution / 2, resolution), 10)
    a, b = np.meshgrid(g, g, indexing="ij")
    val = a + b - 2 * a * b
    best = val.max()
    where = np.argwhere(np.isclose(val, best, atol=1e-12))
    return float(best), [(float(g[i]), float(g[j])) for i, j in where]
