"""Toy convolutional encoder producing channel-grouped feature maps."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor

DOWNSAMPLE = 4


@dataclass
class GroupedFeatureMap:
    """H×W×(B·D) features; group ``b`` owns channels ``[b·D, (b+1)·D)``.

    ``mask`` is the feature-resolution binary mask applied by
    :func:`mask_features`, or None for an unmasked map.
    """

    values: Tensor
    groups: int
    group_dim: int
    mask: np.ndarray | None = None

    def __post_init__(self):
        shape = self.values.shape
        if len(shape) != 3 or shape[2] != self.groups * self.group_dim:
            raise T.ShapeError(
                f"feature map {shape} does not carry {self.groups}x{self.group_dim} channels"
            )

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def group(self, b: int) -> Tensor:
        d = self.group_dim
        return self.values[:, :, b * d:(b + 1) * d]

    def grouped(self) -> Tensor:
        """View as H×W×B×D."""
        return self.values.reshape(self.height, self.width, self.groups, self.group_dim)


@dataclass
class _ParamSet:
    def named(self, prefix: str = ""):
        for f in fields(self):
            yield prefix + f.name, getattr(self, f.name)

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]


@dataclass
class EncoderParams(_ParamSet):
    stem_w: Tensor
    stem_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    pyr1_w: Tensor
    pyr1_b: Tensor
    pyr2_w: Tensor
    pyr2_b: Tensor
    merge_w: Tensor
    merge_b: Tensor


@dataclass
class DecoderParams(_ParamSet):
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    out_w: Tensor
    out_b: Tensor


@dataclass
class ModelParams:
    encoder: EncoderParams
    decoder: DecoderParams

    def named(self):
        yield from self.encoder.named("encoder.")
        yield from self.decoder.named("decoder.")

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    @classmethod
    def from_named(cls, named: dict[str, Tensor], requires_grad: bool = True) -> "ModelParams":
        def pick(kind, prefix):
            kw = {}
            for f in fields(kind):
                t = named[prefix + f.name]
                kw[f.name] = Tensor(t.data, requires_grad=requires_grad)
            return kind(**kw)

        return cls(pick(EncoderParams, "encoder."), pick(DecoderParams, "decoder."))


def _uniform(rng: np.random.Generator, shape, fan_in: int, requires_grad: bool) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=requires_grad)


def _conv(rng, k, cin, cout, requires_grad):
    w = _uniform(rng, (k, k, cin, cout), k * k * cin, requires_grad)
    b = Tensor(np.zeros(cout), requires_grad=requires_grad)
    return w, b


def init_params(
    groups: int,
    group_dim: int,
    stem_channels: int,
    seed: int,
    decoder_in: int | None = None,
    decoder_channels: int = 16,
    requires_grad: bool = True,
) -> ModelParams:
    """Fan-in scaled uniform kernels (bound sqrt(6/fan_in)), zero biases.

    ``decoder_in`` is the channel count the fusion stage hands to the
    decoder; it defaults to ``group_dim``.
    """
    for name, v in (("groups", groups), ("group_dim", group_dim),
                    ("stem_channels", stem_channels), ("decoder_channels", decoder_channels)):
        if v < 1:
            raise ValueError(f"{name} must be positive, got {v}")
    decoder_in = group_dim if decoder_in is None else decoder_in
    if decoder_in < 1:
        raise ValueError(f"decoder_in must be positive, got {decoder_in}")
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    c = stem_channels
    enc = EncoderParams(
        *_conv(rng, 3, 3, c, requires_grad),
        *_conv(rng, 3, c, c, requires_grad),
        *_conv(rng, 3, c, c, requires_grad),
        *_conv(rng, 3, c, c, requires_grad),
        *_conv(rng, 1, c, groups * group_dim, requires_grad),
    )
    h = decoder_channels
    dec = DecoderParams(
        *_conv(rng, 3, decoder_in, h, requires_grad),
        *_conv(rng, 3, h, h, requires_grad),
        *_conv(rng, 1, h, 2, requires_grad),
    )
    return ModelParams(enc, dec)


def encode(image, params: EncoderParams, groups: int, group_dim: int) -> GroupedFeatureMap:
    """Image H0×W0×3 in [0,1] -> GroupedFeatureMap at H0/4 × W0/4."""
    image = T.as_tensor(image)
    if image.data.ndim != 3 or image.shape[2] != 3:
        raise T.ShapeError(f"expected an H×W×3 image, got {image.shape}")
    h0, w0, _ = image.shape
    if h0 % DOWNSAMPLE or w0 % DOWNSAMPLE:
        raise T.ShapeError(f"image size {h0}x{w0} not divisible by {DOWNSAMPLE}")
    if image.data.min() < 0.0 or image.data.max() > 1.0:
        raise T.DomainError("image values must lie in [0, 1]")
    p = params
    x = T.relu(T.conv2d(image, p.stem_w, p.stem_b))
    x = T.avg_pool2(x)
    x = T.relu(T.conv2d(x, p.conv2_w, p.conv2_b))
    x = T.avg_pool2(x)
    # pyramid block: fine (dilation 1) and coarse (dilation 2) branches, summed
    x = T.relu(T.conv2d(x, p.pyr1_w, p.pyr1_b, 1) + T.conv2d(x, p.pyr2_w, p.pyr2_b, 2))
    # linear head: a ReLU here lets whole groups die on the support mask,
    # leaving basis directions undefined
    x = T.conv2d(x, p.merge_w, p.merge_b)
    return GroupedFeatureMap(x, groups, group_dim)


def downsample_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resample sampling each output cell's centre."""
    mask = np.asarray(mask, dtype=np.float64)
    h0, w0 = mask.shape
    rows = ((np.arange(height) + 0.5) * h0 / height).astype(int)
    cols = ((np.arange(width) + 0.5) * w0 / width).astype(int)
    return mask[np.ix_(rows, cols)]


def mask_features(features: GroupedFeatureMap, mask) -> GroupedFeatureMap:
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if mask.ndim != 2:
        raise T.ShapeError(f"mask must be 2-d, got {mask.shape}")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise T.DomainError("mask must be binary")
    h, w = features.height, features.width
    if mask.shape != (h, w):
        h0, w0 = mask.shape
        if h0 % h or w0 % w or h0 // h != w0 // w:
            raise T.ShapeError(f"mask {mask.shape} does not match features {h}x{w}")
        mask = downsample_mask(mask, h, w)
    if features.mask is not None:
        mask = mask * features.mask
    c = features.values.shape[2]
    m = Tensor(np.broadcast_to(mask[:, :, None], (h, w, c)))
    return GroupedFeatureMap(features.values * m, features.groups, features.group_dim, mask)
