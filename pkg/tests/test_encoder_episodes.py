import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from asrseg import tensor as T
from asrseg.encoder import GroupedFeatureMap, downsample_mask, encode, init_params, mask_features
from asrseg.episodes import (
    BACKGROUND_MAX, MIN_FILL, PATTERNS, SHAPES, DatasetConfig, PlacementError, export_dataset, make_dataset,
    read_pnm, render_scene, sample_episode, support_for_class,
)
from asrseg.semantics import masked_semantic_vector, semantic_vector
from asrseg.tensor import Tensor

CFG = DatasetConfig()
DS = make_dataset(CFG)


# ---- encoder ---------------------------------------------------------------------------

def test_init_params_deterministic_and_seeded():
    a = init_params(2, 3, 4, seed=0)
    b = init_params(2, 3, 4, seed=0)
    c = init_params(2, 3, 4, seed=1)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.tensors(), b.tensors()))
    assert any(not np.array_equal(x.data, y.data) for x, y in zip(a.tensors(), c.tensors()))
    w = a.encoder.stem_w.data
    assert np.abs(w).max() <= np.sqrt(6 / (3 * 3 * 3))
    assert not a.encoder.stem_b.data.any()
    with pytest.raises(ValueError):
        init_params(2, 3, 0, seed=0)


def test_encode_shape_and_zero_image():
    p = init_params(2, 3, 4, seed=0)
    img = np.random.default_rng(0).uniform(size=(64, 64, 3))
    f = encode(img, p.encoder, 2, 3)
    assert f.values.shape == (16, 16, 6)
    assert (f.height, f.width) == (16, 16)
    zero = encode(np.zeros((32, 32, 3)), p.encoder, 2, 3)
    assert not zero.values.data.any()


def test_encode_errors():
    p = init_params(2, 3, 4, seed=0)
    with pytest.raises(T.ShapeError):
        encode(np.zeros((30, 32, 3)), p.encoder, 2, 3)
    with pytest.raises(T.DomainError):
        encode(np.full((32, 32, 3), 1.5), p.encoder, 2, 3)


def test_encoder_grad_check():
    p = init_params(2, 2, 3, seed=4)
    img = np.random.default_rng(1).uniform(size=(8, 8, 3))
    for b in (p.encoder.stem_b, p.encoder.conv2_b, p.encoder.pyr1_b, p.encoder.merge_b):
        b.data = np.random.default_rng(2).normal(size=b.shape) * 0.1
    params = p.encoder.tensors()
    err = T.grad_check(lambda: T.sum_(encode(img, p.encoder, 2, 2).values), params, 200, seed=1)
    assert err <= 1e-4


def fm(arr, b=1, d=None):
    arr = np.asarray(arr, dtype=np.float64)
    return GroupedFeatureMap(Tensor(arr), b, d or arr.shape[2] // b)


def test_mask_features_examples():
    x = np.random.default_rng(0).normal(size=(4, 4, 4))
    np.testing.assert_array_equal(mask_features(fm(x, 2), np.ones((4, 4))).values.data, x)
    assert not mask_features(fm(x, 2), np.zeros((16, 16))).values.data.any()
    col = fm([[[3.0]], [[5.0]]])
    np.testing.assert_array_equal(mask_features(col, np.array([[1.0], [0.0]])).values.data.ravel(), [3.0, 0.0])


def test_mask_features_idempotent_and_commutes_with_groups():
    rng = np.random.default_rng(1)
    x = fm(rng.normal(size=(4, 4, 6)), 3)
    mask = rng.integers(0, 2, size=(16, 16))
    once = mask_features(x, mask)
    twice = mask_features(once, mask)
    np.testing.assert_array_equal(once.values.data, twice.values.data)
    small = downsample_mask(mask, 4, 4)
    for b in range(3):
        np.testing.assert_array_equal(once.group(b).data, x.group(b).data * small[:, :, None])


def test_mask_features_errors():
    x = fm(np.ones((4, 4, 2)))
    with pytest.raises(T.DomainError):
        mask_features(x, np.full((4, 4), 0.5))
    with pytest.raises(T.ShapeError):
        mask_features(x, np.ones((6, 4)))


def test_masked_average_pooling_divides_by_mask_area():
    x = np.random.default_rng(2).normal(size=(4, 4, 2))
    mask = np.zeros((4, 4))
    mask[1:3, 1:3] = 1
    masked = mask_features(fm(x), mask)
    v = masked_semantic_vector(masked).values.data
    np.testing.assert_allclose(v, x[1:3, 1:3].reshape(4, 2).mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(v, semantic_vector(masked).values.data * 4, atol=1e-12)
    with pytest.raises(ValueError):
        masked_semantic_vector(fm(x))
    with pytest.raises(T.DomainError):
        masked_semantic_vector(mask_features(fm(x), np.zeros((4, 4))))


# ---- dataset -------------------------------------------------------------------------------

def test_make_dataset_split_and_sharing():
    assert DS.base_ids == list(range(8)) and DS.novel_ids == list(range(8, 12))
    assert not set(DS.base_ids) & set(DS.novel_ids)
    combos = {(s.shape, s.pattern) for s in DS.specs}
    assert len(combos) == 12
    for n in DS.novel_ids:
        spec = DS.specs[n]
        kin = [b for b in DS.base_ids
               if DS.specs[b].shape == spec.shape or DS.specs[b].pattern == spec.pattern]
        assert len(kin) >= 2
    again = make_dataset(CFG)
    assert again.specs == DS.specs


def test_dataset_config_guards():
    with pytest.raises(ValueError):
        DatasetConfig(n_classes=8, n_base=8)
    with pytest.raises(ValueError):
        DatasetConfig(image_size=30)
    with pytest.raises(ValueError):
        DatasetConfig(n_classes=len(SHAPES) * len(PATTERNS) + 1)


def test_render_scene_deterministic_and_disjoint():
    specs = [DS.specs[0], DS.specs[3], DS.specs[5]]
    img, masks = render_scene(specs, 42, CFG)
    img2, masks2 = render_scene(specs, 42, CFG)
    assert np.array_equal(img, img2) and all(np.array_equal(a, b) for a, b in zip(masks, masks2))
    total = np.sum(masks, axis=0)
    assert total.max() == 1
    assert img.min() >= 0 and img.max() <= 1
    bg = total == 0
    assert img[bg].max() <= BACKGROUND_MAX


@pytest.mark.parametrize("seed", range(100))
def test_single_object_geometry(seed):
    spec = DS.specs[seed % 12]
    _, (m,) = render_scene([spec], seed, CFG)
    _, n_comp = ndimage.label(m)
    assert n_comp == 1
    frac = m.mean()
    n = CFG.image_size
    lo = MIN_FILL * (CFG.min_object_size / n) ** 2
    hi = (CFG.max_object_size / n) ** 2
    assert lo <= frac <= hi
    # survives the 4x nearest-neighbour downsample used by the encoder
    assert downsample_mask(m, n // 4, n // 4).sum() >= 1


def test_render_scene_errors():
    with pytest.raises(ValueError):
        render_scene([], 0, CFG)
    tight = DatasetConfig(image_size=32, max_objects_per_query=18, n_classes=18, n_base=8)
    ds = make_dataset(tight)
    with pytest.raises(PlacementError):
        render_scene(ds.specs, 0, tight)


def test_sample_episode_contract():
    for i in range(30):
        ep = sample_episode("novel", 1, i, DS)
        assert ep.class_id in DS.novel_ids
        assert ep.class_id not in ep.distractor_ids
        assert 0 <= len(ep.distractor_ids) <= CFG.max_objects_per_query - 1
        assert all(m.sum() >= 1 for _, m in ep.support)
        np.testing.assert_array_equal(ep.query[1], (ep.query_labels == ep.class_id).astype(np.uint8))
        tr = sample_episode("base", 1, i, DS)
        assert tr.class_id in DS.base_ids and set(tr.distractor_ids) <= set(DS.base_ids)
    a = sample_episode("novel", 5, 7, DS)
    b = sample_episode("novel", 5, 7, DS)
    assert a.k == 5 and a.class_id == b.class_id
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a.support, b.support))
    assert np.array_equal(a.query[0], b.query[0])
    with pytest.raises(ValueError):
        sample_episode("novel", 0, 0, DS)


def test_support_for_class_probe():
    sup = support_for_class(9, 2, 3, DS)
    assert len(sup) == 2 and all(m.sum() > 0 for _, m in sup)


def test_export_roundtrip(tmp_path):
    path = export_dataset(DS, tmp_path, n_episodes=2)
    index = json.loads(path.read_text())
    out = path.parent
    assert index["splits"]["novel"] == DS.novel_ids
    pgms = sorted(out.rglob("*.pgm"))
    ppms = sorted(out.rglob("*.ppm"))
    assert pgms and ppms
    mask = read_pnm(pgms[0])
    assert set(np.unique(mask)) <= {0, 255}
    assert read_pnm(ppms[0]).shape == (64, 64, 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_episode_is_pure_function_of_seed(seed):
    a = sample_episode("base", 1, 3, DS, episode_seed=seed)
    b = sample_episode("base", 1, 3, DS, episode_seed=seed)
    assert a.class_id == b.class_id and np.array_equal(a.query_labels, b.query_labels)
