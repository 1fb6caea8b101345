"""Training loop, episodic evaluation, ablation table and D sweep."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .analysis import assign_labels, confusion_matrix, orthogonality_matrix, sparsity_profile
from .encoder import ModelParams, init_params
from .episodes import (
    Dataset, DatasetConfig, Episode, hflip_pair, make_dataset, rng_for, sample_episode, support_for_class,
)
from .filtering import STRATEGIES, foreground_probability, predict_mask
from .losses import LossWeights
from .metrics import IoUAccumulator
from .model import (
    MODES, PipelineSpec, combined_loss, decoder_in_channels, encode_query, encode_support, forward,
    own_group_direction,
)
from .reconstruction import BASIS_MODES
from .semantics import masked_semantic_vector

log = logging.getLogger(__name__)

_TAG_TRAIN_STREAM = 21
_TAG_EVAL_STREAM = 22
_TAG_FLIP = 23
_TAG_ORTHO = 24
MAX_CURVE_POINTS = 500
ORTHO_SAMPLES_PER_CLASS = 8


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    b: int = 8
    d: int = 8
    stem_channels: int = 16
    image_size: int = 64
    k_shot: int = 1
    steps: int = 2000
    lr0: float = 0.05
    poly_power: float = 0.9
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    tau: float = 0.5
    filter_strategy: str = "projection"
    basis_mode: str = "self"
    mode: str = "full_asr"
    n_classes: int = 12
    n_base: int = 8
    max_objects_per_query: int = 3
    seed: int = 0
    decoder_channels: int = 16
    grad_clip: float = 5.0
    # separate norm cap for the contrastive gradient; None folds it into grad_clip
    con_clip: float | None = 0.1

    def __post_init__(self):
        problems = []
        if self.steps < 1:
            problems.append("steps must be >= 1")
        if self.lr0 <= 0:
            problems.append("lr0 must be > 0")
        if self.b != self.n_base:
            problems.append(f"b ({self.b}) must equal n_base ({self.n_base})")
        if self.d < 1 or self.b < 1 or self.stem_channels < 1 or self.decoder_channels < 1:
            problems.append("b, d, stem_channels and decoder_channels must be positive")
        if self.k_shot < 1:
            problems.append("k_shot must be >= 1")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}")
        if self.filter_strategy not in STRATEGIES:
            problems.append(f"filter_strategy must be one of {STRATEGIES}")
        if self.basis_mode not in BASIS_MODES:
            problems.append(f"basis_mode must be one of {BASIS_MODES}")
        if self.con_clip is not None and self.con_clip <= 0:
            problems.append("con_clip must be > 0 or null")
        if self.grad_clip < 0:
            problems.append("grad_clip must be >= 0 (0 disables clipping)")
        try:
            self.loss_weights()
            self.dataset_config()
        except ValueError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError("; ".join(problems))

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.tau, self.steps)

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(self.n_classes, self.n_base, self.image_size, self.max_objects_per_query, self.seed)

    def pipeline(self) -> PipelineSpec:
        return PipelineSpec(self.mode, self.b, self.d, self.filter_strategy, self.basis_mode)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a flat JSON object")
        return cls.from_dict(raw)


@dataclass
class TrainResult:
    params: ModelParams
    loss_log: list[dict]
    config: TrainConfig
    wall_time_s: float = 0.0

    def total_curve(self) -> list[float]:
        return [r["total"] for r in self.loss_log]


def poly_lr(lr0: float, step: int, steps: int, power: float) -> float:
    return lr0 * (1.0 - step / steps) ** power


def build_params(config: TrainConfig, requires_grad: bool = True) -> ModelParams:
    return init_params(
        config.b, config.d, config.stem_channels, config.seed,
        decoder_in=decoder_in_channels(config.mode, config.filter_strategy, config.b, config.d),
        decoder_channels=config.decoder_channels, requires_grad=requires_grad,
    )


def _grads(tensors) -> list[np.ndarray]:
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in tensors]


def _clip(grads: list[np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def train(
    config: TrainConfig,
    dataset: Dataset | None = None,
    on_step: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Plain SGD over base-split episodes with a poly learning-rate decay."""
    t0 = time.perf_counter()
    dataset = dataset or make_dataset(config.dataset_config())
    spec = config.pipeline()
    weights = config.loss_weights()
    params = build_params(config)
    tensors = params.tensors()
    stream = int(rng_for(config.seed, _TAG_TRAIN_STREAM).integers(2**63))
    span = config.mode in ("reconst_span", "full_asr")
    loss_log = []
    for step in range(config.steps):
        ep = sample_episode("base", config.k_shot, step, dataset, episode_seed=stream)
        flips = rng_for(config.seed, _TAG_FLIP, step).random(ep.k) < 0.5
        support = [hflip_pair(*pair) if f else pair for pair, f in zip(ep.support, flips)]
        for p in tensors:
            p.zero_grad()
        with_con = span and weights.gamma > 0 and weights.contrastive_active(step)
        try:
            masked = encode_support(params, spec, support)
            q = encode_query(params, spec, ep.query[0])
            res = forward(params, spec, masked, q, ep.query[1],
                          ep.class_id if span else None, with_con)
            loss = combined_loss(res, weights, step)
            con_grads = None
            if with_con and config.con_clip is not None:
                # the contrastive gradient gets its own norm cap so it cannot
                # crowd the other terms out of the clipped update
                (res.losses["con"] * weights.gamma).backward(retain_graph=True)
                con_grads = _grads(tensors)
                for p in tensors:
                    p.zero_grad()
                rest = res.losses["dec"] * weights.alpha + res.losses["seg"] * weights.beta
                rest.backward()
            else:
                loss.backward()
        except T.NonFiniteError as exc:
            raise TrainingDiverged(step, str(exc)) from None
        grads = _grads(tensors)
        if not all(np.isfinite(g).all() for g in grads):
            raise TrainingDiverged(step, "non-finite gradient")
        gnorm = _clip(grads, config.grad_clip)
        if con_grads is not None:
            if not all(np.isfinite(g).all() for g in con_grads):
                raise TrainingDiverged(step, "non-finite gradient")
            _clip(con_grads, config.con_clip)
            grads = [g + c for g, c in zip(grads, con_grads)]
        lr = poly_lr(config.lr0, step, config.steps, config.poly_power)
        for p, g in zip(tensors, grads):
            p.data = p.data - lr * g
            p.grad = None
        rec = {"step": step, "total": loss.item(), "lr": lr, "grad_norm": gnorm}
        for name, v in res.losses.items():
            rec[name] = v.item()
        loss_log.append(rec)
        if on_step is not None:
            on_step(step, rec)
    return TrainResult(params, loss_log, config, time.perf_counter() - t0)


def downsample_curve(values: Sequence[float], max_points: int = MAX_CURVE_POINTS) -> list[float]:
    """Bin means so at most ``max_points`` values remain."""
    values = list(values)
    if len(values) <= max_points:
        return values
    edges = np.linspace(0, len(values), max_points + 1).astype(int)
    return [float(np.mean(values[a:b])) for a, b in zip(edges[:-1], edges[1:])]


@dataclass
class Report:
    per_class_iou: dict[str, float]
    miou: float
    fb_iou: float
    confusion: dict
    mean_offdiag_cos: float | None
    sparsity_entropy: dict[str, float]
    loss_curve: list[float]
    config: dict
    wall_time_s: float
    extras: dict = field(default_factory=dict)

    def to_dict(self, include_time: bool = True) -> dict:
        d = asdict(self)
        if not include_time:
            d.pop("wall_time_s")
        return d

    def to_json(self, include_time: bool = True) -> str:
        return json.dumps(self.to_dict(include_time), indent=1, sort_keys=True, allow_nan=False)


# predictor(episode, candidate_class, support_pairs) -> foreground probability map
Predictor = Callable[[Episode, int, list], np.ndarray]


def oracle_predictor(episode: Episode, candidate: int, support) -> np.ndarray:
    """Ground-truth injection: probability 1 exactly on the candidate's pixels."""
    return (episode.query_labels == candidate).astype(np.float64)


def _nan_to_none(x: float) -> float | None:
    return None if x is None or not np.isfinite(x) else float(x)


def evaluate(
    params: ModelParams | None,
    config: TrainConfig,
    split: str = "novel",
    n_episodes: int = 200,
    seed: int | None = None,
    dataset: Dataset | None = None,
    k_shot: int | None = None,
    predictor: Predictor | None = None,
    loss_log: Sequence[dict] | None = None,
) -> Report:
    """Run ``n_episodes`` deterministic episodes and fill a :class:`Report`.

    Every query is also probed with supports of each candidate class of the
    split so pixels can be assigned a class for the confusion matrix.
    """
    t0 = time.perf_counter()
    dataset = dataset or make_dataset(config.dataset_config())
    k = k_shot or config.k_shot
    spec = config.pipeline()
    stream = int(rng_for(config.seed if seed is None else seed, _TAG_EVAL_STREAM).integers(2**63))
    candidates = list(dataset.split_ids(split))
    label_of = {c: i + 1 for i, c in enumerate(candidates)}
    if params is not None:
        _check_shapes(params, config)

    acc = IoUAccumulator()
    conf_records = []
    weights_by_class: dict[int, list[np.ndarray]] = {}
    with T.no_grad():
        for i in range(n_episodes):
            ep = sample_episode(split, k, i, dataset, episode_seed=stream)
            q = encode_query(params, spec, ep.query[0]) if predictor is None else None
            probs = []
            for cand in candidates:
                support = ep.support if cand == ep.class_id else support_for_class(cand, k, i, dataset, stream)
                if predictor is not None:
                    prob = predictor(ep, cand, support)
                    pred = (prob > 0.5).astype(np.uint8)
                else:
                    res = forward(params, spec, encode_support(params, spec, support), q)
                    prob = foreground_probability(res.logits)
                    pred = predict_mask(res.logits)
                    if cand == ep.class_id:
                        weights_by_class.setdefault(cand, []).append(res.weights())
                if cand == ep.class_id:
                    acc.add(pred, ep.query[1], ep.class_id)
                probs.append(prob)
            truth = np.vectorize(lambda c: label_of.get(int(c), 0))(ep.query_labels)
            conf_records.append((truth, assign_labels(probs)))

    iou = acc.result()
    conf = confusion_matrix(conf_records, len(candidates) + 1)
    sparsity = sparsity_profile(weights_by_class) if weights_by_class else None
    ortho = orthogonality_report(params, config, dataset) if params is not None else None
    extras = {
        "split": split,
        "k_shot": k,
        "n_episodes": n_episodes,
        "iou_counts": {str(c): list(v) for c, v in iou.counts.items()},
    }
    if sparsity is not None:
        extras["sparsity_mean_weights"] = {str(c): [float(x) for x in w] for c, w in sparsity.mean_weights.items()}
    if ortho is not None:
        extras["orthogonality_matrix"] = ortho.matrix.round(12).tolist()
        extras["orthogonality_classes"] = ortho.class_ids
    return Report(
        per_class_iou={str(c): float(v) for c, v in iou.per_class.items()},
        miou=_nan_to_none(iou.miou),
        fb_iou=_nan_to_none(iou.fb_iou),
        confusion={"labels": ["background"] + [str(c) for c in candidates], "counts": conf.tolist()},
        mean_offdiag_cos=_nan_to_none(ortho.mean_offdiag) if ortho is not None else None,
        sparsity_entropy={str(c): float(v) for c, v in sparsity.entropy.items()} if sparsity else {},
        loss_curve=downsample_curve([r["total"] for r in loss_log]) if loss_log else [],
        config=asdict(config),
        wall_time_s=time.perf_counter() - t0,
        extras=extras,
    )


def _check_shapes(params: ModelParams, config: TrainConfig) -> None:
    expected = build_params(config, requires_grad=False)
    for (name, a), (_, b) in zip(params.named(), expected.named()):
        if a.shape != b.shape:
            raise T.ShapeError(f"parameter {name} has shape {a.shape}, config expects {b.shape}")


def orthogonality_report(params: ModelParams, config: TrainConfig, dataset: Dataset,
                         per_class: int = ORTHO_SAMPLES_PER_CLASS):
    """|cos| matrix of each base class's mean own-group sub-vector direction.

    For base class b the direction of sub-vector b (its basis vector) is
    averaged over ``per_class`` rendered supports; classes whose group is
    dead on every sample are left out.
    """
    spec = config.pipeline()
    stream = int(rng_for(config.seed, _TAG_ORTHO).integers(2**63))
    vectors = []
    with T.no_grad():
        for b, cid in enumerate(dataset.base_ids):
            dirs = []
            for pair in support_for_class(cid, per_class, 0, dataset, stream):
                (masked,) = encode_support(params, spec, [pair])
                u = own_group_direction(masked_semantic_vector(masked), b)
                if u is not None:
                    dirs.append(u)
            if dirs:
                m = np.mean(dirs, axis=0)
                n = np.linalg.norm(m)
                if n > 1e-12:
                    vectors.append((cid, m / n))
    if len(vectors) < 2:
        return None
    return orthogonality_matrix(vectors)


def ablation_variants(base: TrainConfig) -> list[TrainConfig]:
    """Four module-ablation modes, then the three fusion strategies under full_asr."""
    out = [replace(base, mode=m) for m in MODES]
    out += [replace(base, mode="full_asr", filter_strategy=s) for s in ("projection", "cosine", "concat")]
    return out


def _train_eval(cfg: TrainConfig, n_episodes: int, cache: dict | None) -> tuple[TrainResult, Report]:
    key = json.dumps(asdict(cfg), sort_keys=True)
    if cache is not None and key in cache:
        return cache[key]
    tr = train(cfg)
    rep = evaluate(tr.params, cfg, "novel", n_episodes, loss_log=tr.loss_log)
    if cache is not None:
        cache[key] = (tr, rep)
    return tr, rep


def ablate(base: TrainConfig, seeds: Sequence[int] = (0,), n_episodes: int = 200,
           out_csv=None, cache: dict | None = None) -> list[dict]:
    rows = []
    cache = {} if cache is None else cache
    for seed in seeds:
        for i, cfg in enumerate(ablation_variants(replace(base, seed=seed))):
            tr, rep = _train_eval(cfg, n_episodes, cache)
            rows.append({
                "group": "module" if i < len(MODES) else "filter",
                "mode": cfg.mode,
                "filter_strategy": cfg.filter_strategy if cfg.mode == "full_asr" else "",
                "seed": seed,
                "miou": rep.miou,
                "fb_iou": rep.fb_iou,
                "mean_offdiag_cos": rep.mean_offdiag_cos,
            })
            log.info("ablate %s/%s seed=%d miou=%.4f", cfg.mode, cfg.filter_strategy, seed, rep.miou or float("nan"))
    if out_csv is not None:
        write_csv(out_csv, rows)
    return rows


def sweep_d(base: TrainConfig, d_values: Sequence[int], seeds: Sequence[int] = (0,),
            n_episodes: int = 200, out_csv=None, cache: dict | None = None) -> list[dict]:
    if not d_values:
        raise ValueError("d_values must be nonempty")
    rows = []
    cache = {} if cache is None else cache
    for d in d_values:
        for seed in seeds:
            cfg = replace(base, d=int(d), seed=seed)
            _, rep = _train_eval(cfg, n_episodes, cache)
            rows.append({"d": int(d), "seed": seed, "miou": rep.miou, "fb_iou": rep.fb_iou})
            log.info("sweep D=%d seed=%d miou=%.4f", d, seed, rep.miou or float("nan"))
    if out_csv is not None:
        write_csv(out_csv, rows)
    return rows


def write_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else [])
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in r.items()})
