"""Deterministic synthetic few-shot segmentation benchmark.

Scenes are smooth noise backgrounds carrying patterned, coloured shapes.
Classes are (shape, pattern, colour) triples; novel classes share a shape
or a pattern with several base classes but never both with the same one,
so their appearance can be expressed through base-class semantics.

All randomness flows from ``numpy.random.default_rng`` seeded with an
entropy list ``[seed, tag, index, role]``; numpy's SeedSequence hashing is
the mixing function, so every episode is a pure function of those values.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import DOWNSAMPLE, downsample_mask

SHAPES = ("circle", "square", "triangle", "cross", "ring", "bar")
PATTERNS = ("solid", "stripes", "checker")
PALETTE = (
    (0.95, 0.25, 0.20),
    (0.25, 0.85, 0.30),
    (0.25, 0.45, 0.95),
    (0.95, 0.85, 0.20),
    (0.90, 0.30, 0.90),
    (0.20, 0.90, 0.90),
)
BACKGROUND_MAX = 0.4
# lower bound on pixel coverage / bounding-box area over SHAPES (the bar,
# nominally 1/2, loses a little to discretisation at small sizes)
MIN_FILL = 0.4
PLACEMENT_ATTEMPTS = 100

_TAG_SPECS = 1
_TAG_EPISODE = 2
_TAG_SCENE = 3
_SPLIT_TAG = {"base": 11, "novel": 12}
_ROLE_CLASS, _ROLE_DISTRACTORS, _ROLE_SUPPORT, _ROLE_QUERY = 0, 1, 2, 3


def rng_for(*parts: int) -> np.random.Generator:
    return np.random.default_rng([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    shape: str
    pattern: str
    base_color: tuple[float, float, float]


@dataclass(frozen=True)
class DatasetConfig:
    n_classes: int = 12
    n_base: int = 8
    image_size: int = 64
    max_objects_per_query: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_base < self.n_classes:
            raise ValueError(f"need 1 <= n_base < n_classes, got {self.n_base}/{self.n_classes}")
        if self.n_classes > len(SHAPES) * len(PATTERNS):
            raise ValueError(f"at most {len(SHAPES) * len(PATTERNS)} classes supported")
        if self.image_size < 32 or self.image_size % 4:
            raise ValueError(f"image_size must be a multiple of 4 and >= 32, got {self.image_size}")
        if self.max_objects_per_query < 1:
            raise ValueError("max_objects_per_query must be >= 1")

    @property
    def min_object_size(self) -> int:
        return int(np.ceil(self.image_size / 6))

    @property
    def max_object_size(self) -> int:
        return self.image_size // 3


@dataclass
class Dataset:
    config: DatasetConfig
    specs: list[ClassSpec]
    base_ids: list[int]
    novel_ids: list[int]

    def split_ids(self, split: str) -> list[int]:
        if split == "base":
            return self.base_ids
        if split == "novel":
            return self.novel_ids
        raise ValueError(f"unknown split {split!r}")


@dataclass
class Episode:
    support: list[tuple[np.ndarray, np.ndarray]]
    query: tuple[np.ndarray, np.ndarray]
    class_id: int
    distractor_ids: list[int] = field(default_factory=list)
    # per-pixel class id of the query scene, -1 on background
    query_labels: np.ndarray | None = None

    @property
    def k(self) -> int:
        return len(self.support)


def _shares(a: tuple[str, str], b: tuple[str, str]) -> int:
    return int(a[0] == b[0]) + int(a[1] == b[1])


def make_dataset(config: DatasetConfig, max_tries: int = 1000) -> Dataset:
    """Seeded class specs; ids ``< n_base`` are base classes, the rest novel."""
    rng = rng_for(config.seed, _TAG_SPECS)
    combos = [(s, p) for s in SHAPES for p in PATTERNS]
    n_novel = config.n_classes - config.n_base
    for _ in range(max_tries):
        order = rng.permutation(len(combos))
        base = [combos[i] for i in order[:config.n_base]]
        rest = [combos[i] for i in order[config.n_base:]]
        # (shape, pattern) pairs are unique, so no novel class matches a base
        # class on both attributes; require kinship with at least two bases
        novel = [c for c in rest if sum(_shares(c, b) > 0 for b in base) >= 2][:n_novel]
        if len(novel) == n_novel:
            break
    else:
        raise ValueError("could not draw class specs satisfying the sharing constraints")
    colors = rng.integers(0, len(PALETTE), size=config.n_classes)
    specs = [
        ClassSpec(i, shape, pattern, PALETTE[int(colors[i])])
        for i, (shape, pattern) in enumerate(base + novel)
    ]
    ids = list(range(config.n_classes))
    return Dataset(config, specs, ids[:config.n_base], ids[config.n_base:])


def _shape_mask(shape: str, size: int, n: int, x0: int, y0: int) -> np.ndarray:
    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    half = size / 2.0
    dx = xs - (x0 + half)
    dy = ys - (y0 + half)
    inside_box = (np.abs(dx) < half) & (np.abs(dy) < half)
    r = np.hypot(dx, dy)
    if shape == "circle":
        m = r <= half
    elif shape == "square":
        m = inside_box
    elif shape == "triangle":
        # apex at the top edge, base along the bottom edge
        depth = (dy + half) / size
        m = inside_box & (np.abs(dx) <= half * depth)
    elif shape == "cross":
        arm = size / 4.0
        m = inside_box & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    elif shape == "ring":
        m = (r <= half) & (r >= 0.4 * half)
    elif shape == "bar":
        m = inside_box & (np.abs(dy) <= size / 4.0)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def _pattern_field(pattern: str, n: int, x0: int, y0: int) -> np.ndarray:
    ys, xs = np.mgrid[0:n, 0:n]
    if pattern == "solid":
        return np.zeros((n, n), dtype=bool)
    if pattern == "stripes":
        return ((xs - x0) // 2) % 2 == 1
    if pattern == "checker":
        return (((xs - x0) // 2) + ((ys - y0) // 2)) % 2 == 1
    raise ValueError(f"unknown pattern {pattern!r}")


def _background(rng: np.random.Generator, n: int) -> np.ndarray:
    coarse = rng.uniform(0.0, BACKGROUND_MAX, size=(5, 5, 3))
    pos = np.linspace(0, 4, n)
    lo = np.minimum(np.floor(pos).astype(int), 3)
    f = pos - lo
    rows = coarse[lo] * (1 - f)[:, None, None] + coarse[lo + 1] * f[:, None, None]
    img = rows[:, lo] * (1 - f)[None, :, None] + rows[:, lo + 1] * f[None, :, None]
    return np.clip(img, 0.0, BACKGROUND_MAX)


def render_scene(specs: list[ClassSpec], seed: int, config: DatasetConfig):
    """Render ``specs`` as non-overlapping objects on a noise background.

    Returns ``(image H×W×3 float64, masks)`` with one binary uint8 mask per
    spec; every mask keeps at least one pixel on the encoder's feature grid.  Sizes are integers in [image_size/6, image_size/3]; after
    ``PLACEMENT_ATTEMPTS`` failed draws the size ceiling shrinks by one pixel.
    """
    if not 1 <= len(specs) <= config.max_objects_per_query:
        raise ValueError(f"scene needs 1..{config.max_objects_per_query} objects, got {len(specs)}")
    n = config.image_size
    rng = rng_for(seed, _TAG_SCENE)
    image = _background(rng, n)
    occupied = np.zeros((n, n), dtype=bool)
    masks = []
    lo_size, hi_size = config.min_object_size, config.max_object_size
    for spec in specs:
        placed = False
        ceiling = hi_size
        while not placed:
            for _ in range(PLACEMENT_ATTEMPTS):
                size = int(rng.integers(lo_size, ceiling + 1))
                x0 = int(rng.integers(0, n - size + 1))
                y0 = int(rng.integers(0, n - size + 1))
                # one-pixel moat keeps objects separate components
                ya, yb = max(0, y0 - 1), min(n, y0 + size + 1)
                xa, xb = max(0, x0 - 1), min(n, x0 + size + 1)
                if occupied[ya:yb, xa:xb].any():
                    continue
                m = _shape_mask(spec.shape, size, n, x0, y0)
                # a thin shape can fall between feature-grid sample points
                if downsample_mask(m, n // DOWNSAMPLE, n // DOWNSAMPLE).any():
                    placed = True
                    break
            if not placed:
                if ceiling == lo_size:
                    raise PlacementError(f"could not place {len(specs)} objects in {n}x{n}")
                ceiling -= 1
        occupied[y0:y0 + size, x0:x0 + size] = True
        alt = _pattern_field(spec.pattern, n, x0, y0)
        base = np.asarray(spec.base_color)
        light = 0.5 * base + 0.5
        color = np.where(alt[:, :, None], light[None, None, :], base[None, None, :])
        image = np.where(m[:, :, None], color, image)
        masks.append(m.astype(np.uint8))
    return image, masks


def sample_episode(
    split: str,
    k: int,
    index: int,
    dataset: Dataset,
    episode_seed: int | None = None,
) -> Episode:
    """Episode ``index`` of ``split``: K single-object supports and one query.

    The query holds the target plus 0..max_objects_per_query-1 distractors.
    Base-split distractors are base classes only, so training never renders
    a novel class; novel-split distractors may be any other class.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cfg = dataset.config
    ids = dataset.split_ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    seed = cfg.seed if episode_seed is None else episode_seed
    tag = _SPLIT_TAG[split]
    class_id = int(rng_for(seed, _TAG_EPISODE, tag, index, _ROLE_CLASS).choice(ids))
    return _build_episode(dataset, split, k, index, seed, class_id)


def _build_episode(dataset: Dataset, split: str, k: int, index: int, seed: int, class_id: int) -> Episode:
    cfg = dataset.config
    tag = _SPLIT_TAG[split]
    pool = dataset.base_ids if split == "base" else list(range(cfg.n_classes))
    others = [c for c in pool if c != class_id]
    rng = rng_for(seed, _TAG_EPISODE, tag, index, _ROLE_DISTRACTORS)
    n_distract = int(rng.integers(0, min(cfg.max_objects_per_query - 1, len(others)) + 1))
    distractors = [int(c) for c in rng.choice(others, size=n_distract, replace=False)] if n_distract else []

    support = []
    for shot in range(k):
        sub = int(rng_for(seed, _TAG_EPISODE, tag, index, _ROLE_SUPPORT, class_id, shot).integers(2**63))
        img, (m,) = render_scene([dataset.specs[class_id]], sub, cfg)
        support.append((img, m))

    scene = [class_id] + distractors
    order = rng.permutation(len(scene))
    scene = [scene[i] for i in order]
    sub = int(rng_for(seed, _TAG_EPISODE, tag, index, _ROLE_QUERY).integers(2**63))
    img, masks = render_scene([dataset.specs[c] for c in scene], sub, cfg)
    labels = np.full((cfg.image_size, cfg.image_size), -1, dtype=np.int64)
    for c, m in zip(scene, masks):
        labels[m.astype(bool)] = c
    qmask = (labels == class_id).astype(np.uint8)
    return Episode(support, (img, qmask), class_id, distractors, labels)


def support_for_class(
    class_id: int, k: int, index: int, dataset: Dataset, episode_seed: int | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """K support pairs of ``class_id`` tied to episode ``index`` (for multi-class probing)."""
    cfg = dataset.config
    seed = cfg.seed if episode_seed is None else episode_seed
    out = []
    for shot in range(k):
        sub = int(rng_for(seed, _TAG_EPISODE, 99, index, _ROLE_SUPPORT, class_id, shot).integers(2**63))
        img, (m,) = render_scene([dataset.specs[class_id]], sub, cfg)
        out.append((img, m))
    return out


def hflip_pair(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image[:, ::-1].copy(), mask[:, ::-1].copy()


def _write_pnm(path: Path, arr: np.ndarray) -> None:
    a = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    magic = b"P6" if a.ndim == 3 else b"P5"
    h, w = a.shape[:2]
    path.write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + a.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    magic, w, h, _ = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4], dtype=np.uint8)
    return data.reshape(h, w, 3) if magic == b"P6" else data.reshape(h, w)


def export_dataset(dataset: Dataset, out_dir, n_episodes: int = 20, k: int = 1,
                   episode_seed: int | None = None) -> Path:
    """Write PPM images, PGM masks (0/255) and an ``index.json`` for both splits."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = dataset.config.seed if episode_seed is None else episode_seed
    index = {
        "config": asdict(dataset.config),
        "classes": [asdict(s) for s in dataset.specs],
        "splits": {"base": dataset.base_ids, "novel": dataset.novel_ids},
        "episode_seed": seed,
        "episodes": [],
    }
    for split in ("base", "novel"):
        for i in range(n_episodes):
            ep = sample_episode(split, k, i, dataset, episode_seed=seed)
            stem = f"{split}_{i:05d}"
            files = {"support": [], "query": {}}
            for s, (img, m) in enumerate(ep.support):
                _write_pnm(out / f"{stem}_s{s}.ppm", img * 255)
                _write_pnm(out / f"{stem}_s{s}_mask.pgm", m * 255)
                files["support"].append({"image": f"{stem}_s{s}.ppm", "mask": f"{stem}_s{s}_mask.pgm"})
            _write_pnm(out / f"{stem}_q.ppm", ep.query[0] * 255)
            _write_pnm(out / f"{stem}_q_mask.pgm", ep.query[1] * 255)
            files["query"] = {"image": f"{stem}_q.ppm", "mask": f"{stem}_q_mask.pgm"}
            index["episodes"].append({
                "split": split, "index": i, "class_id": ep.class_id,
                "distractor_ids": ep.distractor_ids, "files": files,
            })
    path = out / "index.json"
    path.write_text(json.dumps(index, indent=1))
    return path
