"""
Multi-branch classifier over one real and M generated stains.

All branches run the same trunk (one physical parameter set): a stem that
downsamples by 4 (two-path by default, or a single 7x7 entry conv and max pool),
then three residual stages. After each stage's residual
block a cross-stain attention block squeezes every branch's responses, passes
the concatenation through two dense layers and rescales each branch's channels.
Branch features are average-pooled, concatenated and mapped to logits.
"""
from typing import List, Literal, Sequence

import numpy as np
from pydantic import BaseModel

from engine import ops
from engine.tensor import Tensor
from models.errors import ConfigError, ShapeError
from models.reports import ParameterBreakdown
from nets.params import ParamSet, gaussian, he_normal, zeros

N_STAGES = 3


class ClassifierSpec(BaseModel):
    num_stains: int
    num_classes: int
    channels_base: int = 8
    expansion: int = 10
    reduction: int = 4
    attention_enabled: bool = True
    pool_layout: Literal["per_block", "final"] = "per_block"
    stem: Literal["two_path", "conv7"] = "two_path"
    seed: int = 0

    def stage_widths(self):
        return [self.channels_base * 2 ** s for s in range(N_STAGES)]


class ClassifierParams(ParamSet):
    kind = "classifier"

    @property
    def num_stains(self):
        return self.spec.num_stains

    @property
    def num_classes(self):
        return self.spec.num_classes

    def attention(self, stage, weights=None):
        w = weights if weights is not None else self.constants()
        return CrossStainAttention.from_weights(w, stage, self.spec.reduction)


class CrossStainAttention:
    """fc1: (M+1)C -> (M+1)C/r, fc2: back to (M+1)C"""

    def __init__(self, fc1_w, fc1_b, fc2_w, fc2_b, reduction):
        self.fc1_w = fc1_w
        self.fc1_b = fc1_b
        self.fc2_w = fc2_w
        self.fc2_b = fc2_b
        self.reduction = reduction

    @classmethod
    def from_weights(cls, w, stage, reduction):
        p = f"att{stage}"
        return cls(w[f"{p}.fc1.w"], w[f"{p}.fc1.b"], w[f"{p}.fc2.w"], w[f"{p}.fc2.b"], reduction)

    @property
    def width(self):
        return self.fc1_w.shape[0]

    def parameter_count(self):
        return int(sum(t.size for t in (self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b)))


def _attention_arrays(arrays, rng, stage, num_stains, channels, reduction):
    width = num_stains * channels
    hidden = max(1, width // reduction)
    arrays[f"att{stage}.fc1.w"] = he_normal(rng, (width, hidden), width)
    arrays[f"att{stage}.fc1.b"] = zeros((hidden,))
    arrays[f"att{stage}.fc2.w"] = gaussian(rng, (hidden, width), np.sqrt(1.0 / hidden))
    arrays[f"att{stage}.fc2.b"] = zeros((width,))


def build_classifier(num_stains, num_classes, channels_base=8, attention_enabled=True, seed=0,
                     expansion=10, reduction=4, pool_layout="per_block", stem="two_path"):
    """
    Builds the M+1-branch classifier

    With attention disabled this is the plain shared-trunk multi-branch net;
    with num_stains == 1 it is the single-stain baseline.

    Args:
        num_stains (int): M + 1, number of branches (>= 1)
        num_classes (int): >= 2
        channels_base (int): Stem output width (even, >= 4); stages use base, 2 base, 4 base
        attention_enabled (bool): Add one cross-stain attention block per stage
        expansion (int): Inner width of a residual block relative to its stage width
        reduction (int): Attention bottleneck ratio r
        stem (str): "two_path" (strided conv + pooled conv) or "conv7" (7x7 stride-2 conv, max pool)
    """
    if num_stains < 1:
        raise ConfigError("num_stains must be >= 1")
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if channels_base < 4 or channels_base % 2:
        raise ConfigError("channels_base must be even and >= 4")
    if expansion < 1 or reduction < 1:
        raise ConfigError("expansion and reduction must be >= 1")
    if stem not in ("two_path", "conv7"):
        raise ConfigError(f"unknown stem {stem!r}")
    spec = ClassifierSpec(
        num_stains=num_stains,
        num_classes=num_classes,
        channels_base=channels_base,
        expansion=expansion,
        reduction=reduction,
        attention_enabled=attention_enabled,
        pool_layout=pool_layout,
        stem=stem,
        seed=seed,
    )
    rng = np.random.default_rng(seed)
    arrays = {}

    if stem == "conv7":
        arrays["stem.entry.w"] = he_normal(rng, (channels_base, 3, 7, 7), 147)
        arrays["stem.entry.b"] = zeros((channels_base,))
    else:
        half = channels_base // 2
        arrays["stem.conv0.w"] = he_normal(rng, (half, 3, 3, 3), 27)
        arrays["stem.conv0.b"] = zeros((half,))
        arrays["stem.path_a.w"] = he_normal(rng, (half, half, 3, 3), 9 * half)
        arrays["stem.path_a.b"] = zeros((half,))
        arrays["stem.path_b.w"] = he_normal(rng, (half, half, 1, 1), half)
        arrays["stem.path_b.b"] = zeros((half,))

    c_in = channels_base
    for s, c_out in enumerate(spec.stage_widths()):
        inner = expansion * c_out
        arrays[f"stage{s}.conv0.w"] = he_normal(rng, (inner, c_in, 3, 3), 9 * c_in)
        arrays[f"stage{s}.conv0.b"] = zeros((inner,))
        arrays[f"stage{s}.conv1.w"] = he_normal(rng, (c_out, inner, 3, 3), 9 * inner)
        arrays[f"stage{s}.conv1.b"] = zeros((c_out,))
        if c_in != c_out:
            arrays[f"stage{s}.proj.w"] = he_normal(rng, (c_out, c_in, 1, 1), c_in)
            arrays[f"stage{s}.proj.b"] = zeros((c_out,))
        c_in = c_out

    if attention_enabled:
        for s, c in enumerate(spec.stage_widths()):
            _attention_arrays(arrays, rng, s, num_stains, c, reduction)

    arrays["head.w"] = gaussian(rng, (num_stains * c_in, num_classes), 0.01)
    arrays["head.b"] = zeros((num_classes,))
    return ClassifierParams(spec, arrays)


def stem_forward(params: ClassifierParams, x: Tensor, weights=None) -> Tensor:
    """Strided conv, then a strided-conv path and a pooled-conv path concatenated; /4 spatially"""
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] % 4 or x.shape[3] % 4:
        raise ShapeError(f"stem expects [N,3,H,W] with H, W divisible by 4, got {list(x.shape)}")
    w = weights if weights is not None else params.constants()
    if params.spec.stem == "conv7":
        h = ops.relu(ops.conv2d(x, w["stem.entry.w"], w["stem.entry.b"], stride=2, padding=3))
        return ops.max_pool2d(h, 2)
    h = ops.relu(ops.conv2d(x, w["stem.conv0.w"], w["stem.conv0.b"], stride=2, padding=1))
    a = ops.conv2d(h, w["stem.path_a.w"], w["stem.path_a.b"], stride=2, padding=1)
    b = ops.conv2d(ops.max_pool2d(h, 2), w["stem.path_b.w"], w["stem.path_b.b"])
    return ops.relu(ops.concat([a, b], axis=1))


def _residual_block(w, stage, x):
    h = ops.relu(ops.conv2d(x, w[f"stage{stage}.conv0.w"], w[f"stage{stage}.conv0.b"], padding=1))
    h = ops.conv2d(h, w[f"stage{stage}.conv1.w"], w[f"stage{stage}.conv1.b"], padding=1)
    if f"stage{stage}.proj.w" in w:
        shortcut = ops.conv2d(x, w[f"stage{stage}.proj.w"], w[f"stage{stage}.proj.b"])
    else:
        shortcut = x
    return ops.relu(h + shortcut)


def attention_scales(att: CrossStainAttention, feats: Sequence[Tensor]) -> Tensor:
    """Excitation vector [N, (M+1)C], one entry per (stain, channel) pair"""
    if not feats:
        raise ShapeError("cross-stain attention needs at least one branch")
    shape = feats[0].shape
    for f in feats:
        if f.shape != shape:
            raise ShapeError(f"cross-stain attention: ragged branch shapes {[f.shape for f in feats]}")
    if len(feats) * shape[1] != att.width:
        raise ShapeError(f"cross-stain attention sized for width {att.width}, got {len(feats)} x {shape[1]}")
    squeeze = ops.concat([ops.global_avg_pool(f) for f in feats], axis=1)
    hidden = ops.relu(ops.fully_connected(squeeze, att.fc1_w, att.fc1_b))
    return ops.sigmoid(ops.fully_connected(hidden, att.fc2_w, att.fc2_b))


def cross_stain_attention(att: CrossStainAttention, feats: Sequence[Tensor]) -> List[Tensor]:
    """Squeeze all branches, excite each branch's channels; shapes unchanged"""
    n, c = feats[0].shape[0], feats[0].shape[1]
    scales = ops.split(attention_scales(att, feats), len(feats), axis=1)
    return [f * ops.reshape(s, (n, c, 1, 1)) for f, s in zip(feats, scales)]


def _check_images(params, images):
    if len(images) != params.num_stains:
        raise ShapeError(f"classifier has {params.num_stains} branches, got {len(images)} images")
    shape = images[0].shape
    for image in images:
        if image.shape != shape:
            raise ShapeError(f"branch inputs differ in shape: {[i.shape for i in images]}")


def classifier_features(params: ClassifierParams, images: Sequence[Tensor], weights=None) -> List[Tensor]:
    """Per-branch globally pooled features [N, C_last] before the head"""
    _check_images(params, images)
    w = weights if weights is not None else params.constants()
    spec = params.spec

    feats = [stem_forward(params, image, w) for image in images]
    for s in range(N_STAGES):
        feats = [_residual_block(w, s, f) for f in feats]
        if spec.attention_enabled:
            feats = cross_stain_attention(CrossStainAttention.from_weights(w, s, spec.reduction), feats)
        if spec.pool_layout == "per_block" or s == N_STAGES - 1:
            feats = [ops.max_pool2d(f, 2) for f in feats]
    return [ops.global_avg_pool(f) for f in feats]


def classifier_forward(params: ClassifierParams, images: Sequence[Tensor], weights=None) -> Tensor:
    """t = c(I_0, I_1, ..., I_M): logits [N, num_classes]"""
    w = weights if weights is not None else params.constants()
    pooled = classifier_features(params, images, w)
    return ops.fully_connected(ops.concat(pooled, axis=1), w["head.w"], w["head.b"])


def count_parameters(params: ClassifierParams) -> ParameterBreakdown:
    trunk = params.count("stem.") + params.count("stage")
    attention = params.count("att")
    head = params.count("head.")
    return ParameterBreakdown(
        trunk=trunk,
        attention_total=attention,
        head=head,
        grand_total=params.count(),
    )
