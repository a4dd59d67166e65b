"""
Stain-translation generator and its patch discriminator.

Generator: reflect-padded 7x7 entry conv, two stride-2 3x3 down convs, a stack
of resolution-preserving residual blocks, two stride-2 4x4 transposed convs,
reflect-padded 7x7 exit conv and tanh. Every hidden conv is followed by
instance norm and ReLU. Widths double base -> 2 base -> 4 base.

Discriminator: stride-2 4x4 convs with leaky ReLU(0.2) and a 3x3 output conv
producing a map of real/fake scores.

Images inside these networks live in [-1, 1]; ``to_model_range`` /
``to_image_range`` convert from/to the [0, 1] corpus convention.
"""
import logging

import numpy as np
from pydantic import BaseModel

from engine import ops
from engine.tensor import Tensor
from models.errors import ConfigError, ShapeError
from nets.params import ParamSet, gaussian, zeros

logger = logging.getLogger("g2c-nets")

INIT_STD = 0.02


class GeneratorSpec(BaseModel):
    channels_base: int
    image_size: int
    n_residual_blocks: int = 6
    source_stain: int = 0
    target_stain: int = 1
    seed: int = 0


class DiscriminatorSpec(BaseModel):
    channels_base: int
    image_size: int
    n_layers: int = 4
    instance_norm: bool = True
    seed: int = 0


class GeneratorParams(ParamSet):
    kind = "generator"

    @property
    def stain_pair(self):
        return self.spec.source_stain, self.spec.target_stain


class DiscriminatorParams(ParamSet):
    kind = "discriminator"


def _conv_params(arrays, rng, name, c_in, c_out, k, norm=True, transpose=False):
    shape = (c_in, c_out, k, k) if transpose else (c_out, c_in, k, k)
    arrays[f"{name}.w"] = gaussian(rng, shape, INIT_STD)
    arrays[f"{name}.b"] = zeros((c_out,))
    if norm:
        arrays[f"{name}.gamma"] = gaussian(rng, (c_out,), INIT_STD, mean=1.0)
        arrays[f"{name}.beta"] = zeros((c_out,))


def build_generator(channels_base, image_size, seed, n_residual_blocks=6, source_stain=0, target_stain=1):
    """
    Builds one generator g_m

    Weights are drawn from N(0, 0.02); instance-norm scales from N(1, 0.02).

    Args:
        channels_base (int): Width after the entry conv (>= 4)
        image_size (int): Square input size, divisible by 4
        seed (int): Initialization seed
        n_residual_blocks (int): 6 unless explicitly overridden

    Returns:
        GeneratorParams
    """
    if image_size % 4 != 0:
        raise ConfigError(f"image_size {image_size} must be divisible by 4 (two stride-2 stages)")
    if channels_base < 4:
        raise ConfigError("channels_base must be >= 4")
    if n_residual_blocks < 1:
        raise ConfigError("need at least one residual block")
    spec = GeneratorSpec(
        channels_base=channels_base,
        image_size=image_size,
        n_residual_blocks=n_residual_blocks,
        source_stain=source_stain,
        target_stain=target_stain,
        seed=seed,
    )
    rng = np.random.default_rng(seed)
    b = channels_base
    arrays = {}
    _conv_params(arrays, rng, "entry", 3, b, 7)
    _conv_params(arrays, rng, "down0", b, 2 * b, 3)
    _conv_params(arrays, rng, "down1", 2 * b, 4 * b, 3)
    for i in range(n_residual_blocks):
        _conv_params(arrays, rng, f"res{i}.conv0", 4 * b, 4 * b, 3)
        _conv_params(arrays, rng, f"res{i}.conv1", 4 * b, 4 * b, 3)
    _conv_params(arrays, rng, "up0", 4 * b, 2 * b, 4, transpose=True)
    _conv_params(arrays, rng, "up1", 2 * b, b, 4, transpose=True)
    _conv_params(arrays, rng, "exit", b, 3, 7, norm=False)
    return GeneratorParams(spec, arrays)


def _conv_norm(w, name, x, stride=1, padding=0, act=ops.relu):
    h = ops.conv2d(x, w[f"{name}.w"], w[f"{name}.b"], stride=stride, padding=padding)
    h = ops.instance_norm(h, w[f"{name}.gamma"], w[f"{name}.beta"])
    return act(h) if act is not None else h


def generator_forward(params: GeneratorParams, x: Tensor, weights=None) -> Tensor:
    """
    I_m = g_m(I_0): translates [N,3,H,W] images in [-1,1] to the target stain

    Args:
        params (GeneratorParams): Architecture and arrays
        x (Tensor): Input batch at the configured resolution
        weights (dict, optional): Bound tensors from params.bind(tape); constants when omitted
    """
    size = params.spec.image_size
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
        raise ShapeError(f"generator expects [N,3,{size},{size}], got {list(x.shape)}")
    w = weights if weights is not None else params.constants()

    h = _conv_norm(w, "entry", ops.reflect_pad(x, 3))
    h = _conv_norm(w, "down0", h, stride=2, padding=1)
    h = _conv_norm(w, "down1", h, stride=2, padding=1)
    for i in range(params.spec.n_residual_blocks):
        r = _conv_norm(w, f"res{i}.conv0", ops.reflect_pad(h, 1))
        r = _conv_norm(w, f"res{i}.conv1", ops.reflect_pad(r, 1), act=None)
        h = h + r
    for name in ("up0", "up1"):
        h = ops.conv2d_transpose(h, w[f"{name}.w"], w[f"{name}.b"], stride=2, padding=1)
        h = ops.relu(ops.instance_norm(h, w[f"{name}.gamma"], w[f"{name}.beta"]))
    h = ops.conv2d(ops.reflect_pad(h, 3), w["exit.w"], w["exit.b"])
    return ops.tanh(h)


def build_discriminator(channels_base, image_size, seed, n_layers=4, instance_norm=True):
    """PatchGAN-style discriminator; image_size must be divisible by 2**n_layers"""
    if image_size % (2 ** n_layers) != 0:
        raise ConfigError(f"image_size {image_size} must be divisible by {2 ** n_layers}")
    spec = DiscriminatorSpec(
        channels_base=channels_base,
        image_size=image_size,
        n_layers=n_layers,
        instance_norm=instance_norm,
        seed=seed,
    )
    rng = np.random.default_rng(seed)
    arrays = {}
    c_in = 3
    for i in range(n_layers):
        c_out = channels_base * 2 ** i
        _conv_params(arrays, rng, f"d{i}", c_in, c_out, 4, norm=instance_norm and i > 0)
        c_in = c_out
    _conv_params(arrays, rng, "out", c_in, 1, 3, norm=False)
    return DiscriminatorParams(spec, arrays)


def discriminator_forward(params: DiscriminatorParams, x: Tensor, weights=None) -> Tensor:
    """[N,3,S,S] -> [N,1,S/16,S/16] unbounded scores (four stride-2 layers)"""
    spec = params.spec
    size = spec.image_size
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
        raise ShapeError(f"discriminator expects [N,3,{size},{size}], got {list(x.shape)}")
    w = weights if weights is not None else params.constants()

    h = x
    for i in range(spec.n_layers):
        h = ops.conv2d(h, w[f"d{i}.w"], w[f"d{i}.b"], stride=2, padding=1)
        if f"d{i}.gamma" in w:
            h = ops.instance_norm(h, w[f"d{i}.gamma"], w[f"d{i}.beta"])
        h = ops.leaky_relu(h, 0.2)
    return ops.conv2d(h, w["out.w"], w["out.b"], stride=1, padding=1)


def receptive_window(spec: DiscriminatorSpec, row, col):
    """
    Input pixels that can influence one output score

    Exact only without instance norm, which mixes whole planes.

    Returns:
        tuple: (row_start, row_stop, col_start, col_stop), half-open, clipped to the image
    """
    layers = [(4, 2, 1)] * spec.n_layers + [(3, 1, 1)]
    r0, r1, c0, c1 = row, row, col, col
    for k, s, p in reversed(layers):
        r0, r1 = r0 * s - p, r1 * s - p + k - 1
        c0, c1 = c0 * s - p, c1 * s - p + k - 1
    size = spec.image_size
    return max(r0, 0), min(r1 + 1, size), max(c0, 0), min(c1 + 1, size)


def to_model_range(images01):
    return images01 * 2.0 - 1.0


def to_image_range(images11):
    return (images11 + 1.0) * 0.5


def as_translator(params: GeneratorParams, batch_size=16):
    """Wraps a generator as a [0,1] -> [0,1] numpy image function"""
    def translate(images01):
        outputs = []
        for start in range(0, len(images01), batch_size):
            x = Tensor(to_model_range(np.asarray(images01[start:start + batch_size], dtype=np.float32)))
            outputs.append(to_image_range(generator_forward(params, x).data))
        return np.concatenate(outputs, axis=0)
    return translate
