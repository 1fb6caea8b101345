import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asrseg import tensor as T
from asrseg.encoder import DecoderParams, GroupedFeatureMap, init_params
from asrseg.filtering import (
    DegenerateSupportVector, concat_map, cosine_map, decode, foreground_probability, fuse, fused_channels,
    predict_mask, project,
)
from asrseg.losses import LossWeights, contrastive_loss, decoupling_loss, segmentation_loss, total_loss
from asrseg.semantics import SemanticVector
from asrseg.tensor import Tensor

LOG_1P_EINV = np.log1p(np.exp(-1.0))


def svec(values, b, d):
    return SemanticVector(Tensor(np.asarray(values, dtype=np.float64)), b, d)


# ---- decoupling ---------------------------------------------------------------------

def test_decoupling_examples():
    assert decoupling_loss(Tensor([1.0, 0.0]), 0).item() == pytest.approx(0.313262, abs=1e-6)
    assert decoupling_loss(Tensor([1.0, 0.0]), 0).item() == pytest.approx(LOG_1P_EINV, abs=1e-12)
    assert decoupling_loss(Tensor([1.0, 0.0]), 1).item() == pytest.approx(np.log(2), abs=1e-12)
    assert decoupling_loss(Tensor(np.full(5, 0.2)), 3).item() == pytest.approx(0.598139, abs=1e-6)
    with pytest.raises(IndexError):
        decoupling_loss(Tensor([0.5, 0.5]), 2)


def test_decoupling_gradient_range():
    for wc in (0.0, 0.3, 0.999):
        w = Tensor([wc, 1 - wc], requires_grad=True)
        decoupling_loss(w, 0).backward()
        g = w.grad[0]
        assert g == pytest.approx(-np.exp(-wc) / (1 + np.exp(-wc)), abs=1e-12)
        assert -0.5 <= g < -0.268
        assert w.grad[1] == 0.0


# ---- contrastive --------------------------------------------------------------------

def test_contrastive_closed_values():
    eye = np.eye(4).ravel()
    assert contrastive_loss(svec(eye, 4, 4), svec(eye, 4, 4)).item() == pytest.approx(np.exp(-3), abs=1e-9)
    aliased = svec([1, 0, 1, 0], 2, 2)
    assert contrastive_loss(aliased, aliased).item() == pytest.approx(np.e, abs=1e-9)
    assert contrastive_loss(svec([1.0, 2.0], 1, 2), svec([2.0, 4.0], 1, 2)).item() == pytest.approx(1.0)


def test_contrastive_scale_invariance():
    rng = np.random.default_rng(0)
    s, q = rng.normal(size=12), rng.normal(size=12)
    base = contrastive_loss(svec(s, 3, 4), svec(q, 3, 4)).item()
    s2 = s.copy()
    s2[4:8] *= 7
    assert contrastive_loss(svec(s2, 3, 4), svec(q, 3, 4)).item() == pytest.approx(base, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_contrastive_increases_with_aliasing(seed, eps):
    # tilting one query sub-vector towards another group's direction raises the loss
    rng = np.random.default_rng(seed)
    b = 3
    eye = np.eye(b)
    q = eye.copy()
    q[1] = eye[1] + eps * eye[0]
    lo = contrastive_loss(svec(eye.ravel(), b, b), svec(eye.ravel(), b, b)).item()
    hi = contrastive_loss(svec(eye.ravel(), b, b), svec(q.ravel(), b, b)).item()
    assert lo == pytest.approx(np.exp(1 - b), abs=1e-12)
    assert hi > lo


def test_contrastive_degenerate_raises():
    with pytest.raises(ValueError):
        contrastive_loss(svec([0, 0, 1, 0], 2, 2), svec([1, 0, 0, 1], 2, 2))


# ---- segmentation -------------------------------------------------------------------

def test_segmentation_examples():
    mask = np.random.default_rng(0).integers(0, 2, size=(4, 4))
    assert segmentation_loss(Tensor(np.zeros((4, 4, 2))), mask).item() == pytest.approx(np.log(2), abs=1e-12)
    onehot = np.stack([1 - mask, mask], axis=-1) * 20.0
    assert segmentation_loss(Tensor(onehot), mask).item() <= 1e-8
    one = segmentation_loss(Tensor([[[0.0, np.log(3.0)]]]), np.array([[1]]))
    assert one.item() == pytest.approx(-np.log(0.75), abs=1e-12)


def test_segmentation_channel_swap_symmetry():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(5, 6, 2))
    m = rng.integers(0, 2, size=(5, 6))
    a = segmentation_loss(Tensor(z), m).item()
    b = segmentation_loss(Tensor(z[..., ::-1].copy()), 1 - m).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_segmentation_errors():
    with pytest.raises(T.ShapeError):
        segmentation_loss(Tensor(np.zeros((2, 2, 2))), np.zeros((3, 2)))
    with pytest.raises(T.DomainError):
        segmentation_loss(Tensor(np.zeros((1, 1, 2))), np.array([[0.5]]))


# ---- total --------------------------------------------------------------------------

def test_total_loss_gating_and_weights():
    w = LossWeights(1.0, 2.0, 0.5, tau=0.5, total_steps=10)
    assert total_loss(0.3, 0.7, 0.05, w, 5).item() == pytest.approx(1.725, abs=1e-12)
    assert total_loss(0.3, 0.7, 0.05, w, 4).item() == pytest.approx(1.7, abs=1e-12)
    assert total_loss(0.3, 0.7, None, w, 0).item() == pytest.approx(1.7, abs=1e-12)
    ones = LossWeights(1.0, 1.0, 1.0, tau=0.0, total_steps=3)
    assert total_loss(0.1, 0.2, 0.3, ones, 0).item() == pytest.approx(0.6, abs=1e-12)
    with pytest.raises(ValueError):
        total_loss(0.1, 0.2, 0.3, w, 10)
    with pytest.raises(ValueError):
        LossWeights(tau=1.5)


# ---- projection ----------------------------------------------------------------------

def single(pixel):
    p = np.asarray(pixel, dtype=np.float64)
    return GroupedFeatureMap(Tensor(p.reshape(1, 1, -1)), 1, p.size)


def test_projection_examples():
    v = Tensor([1.0, 2.0])
    np.testing.assert_allclose(project(single([2.0, 4.0]), v).values.data.ravel(), [2.0, 4.0], atol=1e-12)
    np.testing.assert_allclose(project(single([2.0, -1.0]), v).values.data.ravel(), [0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(project(single([3.0, 4.0]), Tensor([1.0, 0.0])).values.data.ravel(), [3.0, 0.0])
    # signed: an anti-aligned pixel keeps its negative coefficient
    np.testing.assert_allclose(project(single([-2.0, 0.0]), Tensor([1.0, 0.0])).values.data.ravel(), [-2.0, 0.0])
    with pytest.raises(DegenerateSupportVector):
        project(single([1.0, 1.0]), Tensor([0.0, 0.0]))


def _random_pairs(n, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1, d)) * rng.uniform(0.01, 100, size=(n, 1, 1))
    v = rng.normal(size=d)
    return x, v


@pytest.mark.parametrize("seed", range(5))
def test_projection_algebra_properties(seed):
    x, v = _random_pairs(2000, 8, seed)
    fm = GroupedFeatureMap(Tensor(x), 1, 8)
    p1 = project(fm, Tensor(v))
    p2 = project(p1, Tensor(v))
    np.testing.assert_allclose(p2.values.data, p1.values.data, atol=1e-10)
    assert (np.linalg.norm(p1.values.data, axis=2) <= np.linalg.norm(x, axis=2) + 1e-10).all()
    for s in (1e-3, 0.5, 7.0, 1e4):
        np.testing.assert_allclose(project(fm, Tensor(s * v)).values.data, p1.values.data, atol=1e-10)
    u = v / np.linalg.norm(v)
    coeff = p1.values.data @ u
    np.testing.assert_allclose(p1.values.data, coeff[..., None] * u, atol=1e-10)


def test_cosine_and_concat_examples():
    v = Tensor([0.0, 1.0])
    assert cosine_map(single([0.0, 3.0]), v).values.data.item() == pytest.approx(1.0)
    assert cosine_map(single([0.0, 0.0]), v).values.data.item() == 0.0
    np.testing.assert_allclose(concat_map(single([1.0, 2.0]), v).values.data.ravel(), [1, 2, 0, 1])
    x, vv = _random_pairs(500, 4, 9)
    c = cosine_map(GroupedFeatureMap(Tensor(x), 1, 4), Tensor(vv)).values.data
    assert (np.abs(c) <= 1 + 1e-12).all()


def test_fuse_dispatch_and_channels():
    fm = GroupedFeatureMap(Tensor(np.ones((2, 2, 3))), 1, 3)
    v = Tensor([1.0, 0.0, 0.0])
    for s in ("projection", "cosine", "concat", "none"):
        assert fuse(s, fm, v).values.shape[2] == fused_channels(s, 3)
    with pytest.raises(ValueError):
        fuse("conv", fm, v)
    with pytest.raises(DegenerateSupportVector):
        fuse("concat", fm, Tensor(np.zeros(3)))


# ---- decoding -------------------------------------------------------------------------

def _decoder(cin, seed=0, zero_bias=True):
    return init_params(2, 2, 4, seed, decoder_in=cin, decoder_channels=5, requires_grad=False).decoder


def test_decode_shape_and_zero_input():
    dec = _decoder(3)
    out = decode(GroupedFeatureMap(Tensor(np.random.default_rng(0).normal(size=(16, 16, 3))), 1, 3), dec)
    assert out.shape == (64, 64, 2)
    zero = decode(GroupedFeatureMap(Tensor(np.zeros((16, 16, 3))), 1, 3), dec)
    assert not zero.data.any()
    with pytest.raises(T.ShapeError):
        decode(GroupedFeatureMap(Tensor(np.zeros((4, 4, 2))), 1, 2), dec)


def test_decode_grad_check():
    rng = np.random.default_rng(1)
    dec = init_params(2, 2, 4, 3, decoder_in=3, decoder_channels=4).decoder
    for name in ("conv1_b", "conv2_b", "out_b"):
        getattr(dec, name).data = rng.normal(size=getattr(dec, name).shape) * 0.1
    x = Tensor(rng.normal(size=(4, 4, 3)), requires_grad=True)
    fm = GroupedFeatureMap(x, 1, 3)
    mask = rng.integers(0, 2, size=(16, 16))
    err = T.grad_check(lambda: segmentation_loss(decode(fm, dec), mask), [x] + dec.tensors(), 200, seed=2)
    assert err <= 1e-4


def test_predict_mask_rules():
    z = np.zeros((2, 3, 2))
    z[..., 1] = 1.0
    assert predict_mask(z).all()
    assert not predict_mask(np.zeros((2, 3, 2))).any()
    z = np.array([[[0.0, 1.0], [2.0, -1.0]], [[0.5, 0.5], [-3.0, -2.0]]])
    np.testing.assert_array_equal(predict_mask(z), [[1, 0], [0, 1]])
    p = foreground_probability(z)
    np.testing.assert_allclose(p[1, 0], 0.5)
    assert ((p > 0.5) == predict_mask(z).astype(bool)).all()
