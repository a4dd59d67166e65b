"""
Gradient checks for every primitive and for the composed
generator -> classifier -> focal loss graph on miniature shapes.
"""
import logging

import numpy as np

from engine import ops
from engine.gradcheck import MIN_SAMPLES, grad_check
from engine.tensor import Tensor
from models.config import LossConfig
from nets.classifier import CrossStainAttention, build_classifier, classifier_forward, cross_stain_attention
from nets.generator import build_discriminator, build_generator, discriminator_forward, generator_forward
from nets.losses import cycle_loss, focal_loss, lsgan_losses

logger = logging.getLogger("g2c-engine")


def _projection(rng, shape):
    """Fixed random weights turning a tensor output into a scalar"""
    weights = rng.standard_normal(shape)
    return lambda out: ops.sum(out * Tensor(weights))


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def primitive_cases(seed=0):
    """name -> (f, params) pairs, one per differentiable primitive"""
    rng = np.random.default_rng(seed)
    cases = {}

    def add_case(name, fn, params, out_shape):
        project = _projection(rng, out_shape)
        cases[name] = (lambda w, fn=fn, project=project: project(fn(w)), params)

    a, b = rng.standard_normal((3, 4)), rng.standard_normal((1, 4))
    add_case("add", lambda w: w["a"] + w["b"], {"a": a, "b": b}, (3, 4))
    add_case("sub", lambda w: w["a"] - w["b"], {"a": a, "b": b}, (3, 4))
    add_case("mul", lambda w: w["a"] * w["b"], {"a": a, "b": b}, (3, 4))
    add_case("div", lambda w: w["a"] / w["b"], {"a": a, "b": rng.uniform(0.5, 2.0, (1, 4))}, (3, 4))
    add_case("power", lambda w: ops.power(w["a"], 3), {"a": a}, (3, 4))
    add_case("exp", lambda w: ops.exp(w["a"]), {"a": a}, (3, 4))
    add_case("log", lambda w: ops.log(w["a"]), {"a": rng.uniform(0.5, 2.0, (3, 4))}, (3, 4))
    add_case("abs", lambda w: ops.abs(w["a"]), {"a": _away_from_zero(rng, (3, 4))}, (3, 4))
    add_case("relu", lambda w: ops.relu(w["a"]), {"a": _away_from_zero(rng, (3, 4))}, (3, 4))
    add_case("leaky_relu", lambda w: ops.leaky_relu(w["a"], 0.2), {"a": _away_from_zero(rng, (3, 4))}, (3, 4))
    add_case("sigmoid", lambda w: ops.sigmoid(w["a"]), {"a": a}, (3, 4))
    add_case("tanh", lambda w: ops.tanh(w["a"]), {"a": a}, (3, 4))
    add_case("clip_min", lambda w: ops.clip_min(w["a"], 0.1), {"a": 0.1 + _away_from_zero(rng, (3, 4))}, (3, 4))
    add_case("sum", lambda w: ops.sum(w["a"], axis=1, keepdims=True), {"a": a}, (3, 1))
    add_case("mean", lambda w: ops.mean(w["a"], axis=0), {"a": a}, (4,))
    add_case("reshape", lambda w: ops.reshape(w["a"], (2, 6)), {"a": a}, (2, 6))
    add_case("concat_split", lambda w: ops.concat(ops.split(w["a"], 2, axis=1)[::-1], axis=1), {"a": a}, (3, 4))

    x = rng.standard_normal((2, 3, 5, 5))
    add_case("reflect_pad", lambda w: ops.reflect_pad(w["x"], 2), {"x": x}, (2, 3, 9, 9))
    conv_w, conv_b = rng.standard_normal((4, 3, 3, 3)) * 0.3, rng.standard_normal(4) * 0.1
    add_case("conv2d", lambda w: ops.conv2d(w["x"], w["w"], w["b"], stride=1, padding=1),
             {"x": x, "w": conv_w, "b": conv_b}, (2, 4, 5, 5))
    add_case("conv2d_strided", lambda w: ops.conv2d(w["x"], w["w"], w["b"], stride=2, padding=1),
             {"x": x, "w": conv_w, "b": conv_b}, (2, 4, 3, 3))
    tw, tb = rng.standard_normal((3, 2, 4, 4)) * 0.3, rng.standard_normal(2) * 0.1
    add_case("conv2d_transpose", lambda w: ops.conv2d_transpose(w["x"], w["w"], w["b"], stride=2, padding=1),
             {"x": x, "w": tw, "b": tb}, (2, 2, 10, 10))
    add_case("instance_norm", lambda w: ops.instance_norm(w["x"], w["g"], w["b"]),
             {"x": x, "g": rng.uniform(0.5, 1.5, 3), "b": rng.standard_normal(3)}, (2, 3, 5, 5))
    add_case("max_pool2d", lambda w: ops.max_pool2d(w["x"], 2), {"x": x}, (2, 3, 3, 3))
    add_case("global_avg_pool", lambda w: ops.global_avg_pool(w["x"]), {"x": x}, (2, 3))
    add_case("fully_connected", lambda w: ops.fully_connected(w["x"], w["w"], w["b"]),
             {"x": a, "w": rng.standard_normal((4, 5)), "b": rng.standard_normal(5)}, (3, 5))
    add_case("log_softmax", lambda w: ops.log_softmax(w["a"]), {"a": a}, (3, 4))

    labels = np.array([0, 3, 1])
    cases["pick"] = (lambda w: ops.sum(ops.pick(w["a"], labels)), {"a": a})
    loss_cfg = LossConfig(gamma=2.0, alpha=[1.0, 2.0, 0.5, 1.5])
    cases["focal_loss"] = (lambda w: focal_loss(w["a"], labels, loss_cfg), {"a": a})
    y = rng.standard_normal((2, 3, 4, 4))
    cases["cycle_loss"] = (lambda w: cycle_loss(w["x"], Tensor(y), 10.0), {"x": rng.standard_normal((2, 3, 4, 4)) + 3.0})

    def lsgan(w):
        d_loss, g_loss = lsgan_losses(w["real"], w["fake"])
        return d_loss + g_loss * 0.5
    cases["lsgan"] = (lsgan, {"real": rng.standard_normal((2, 1, 2, 2)), "fake": rng.standard_normal((2, 1, 2, 2))})
    return cases


def network_cases(seed=0):
    """Miniature generator, discriminator, attention and the composed graph"""
    rng = np.random.default_rng(seed)
    cases = {}

    gen = build_generator(4, 8, seed=seed, n_residual_blocks=1)
    x = rng.uniform(-1, 1, (2, 3, 8, 8))
    project = _projection(rng, (2, 3, 8, 8))
    cases["generator"] = (lambda w: project(generator_forward(gen, Tensor(x), w)), dict(gen.arrays))

    disc = build_discriminator(4, 16, seed=seed, n_layers=2)
    xd = rng.uniform(-1, 1, (2, 3, 16, 16))
    project_d = _projection(rng, (2, 1, 4, 4))
    cases["discriminator"] = (lambda w: project_d(discriminator_forward(disc, Tensor(xd), w)), dict(disc.arrays))

    cls = build_classifier(num_stains=2, num_classes=2, channels_base=4, seed=seed, expansion=2, reduction=2)
    att = cls.attention(0)
    feats = [rng.standard_normal((2, 4, 3, 3)) for _ in range(2)]
    project_a = _projection(rng, (2, 4, 3, 3))

    def attention(w):
        block = CrossStainAttention(w["fc1.w"], w["fc1.b"], w["fc2.w"], w["fc2.b"], att.reduction)
        out = cross_stain_attention(block, [w["f0"], w["f1"]])
        return project_a(out[0]) + project_a(out[1])
    cases["cross_stain_attention"] = (attention, {
        "fc1.w": att.fc1_w.data, "fc1.b": att.fc1_b.data, "fc2.w": att.fc2_w.data, "fc2.b": att.fc2_b.data,
        "f0": feats[0], "f1": feats[1],
    })

    composed_gen = build_generator(4, 8, seed=seed + 1, n_residual_blocks=1)
    images = rng.uniform(-1, 1, (2, 3, 8, 8))
    labels = np.array([0, 1])
    loss_cfg = LossConfig(gamma=2.0, alpha=[0.7, 1.3])
    params = {f"g/{k}": v for k, v in composed_gen.arrays.items()}
    params.update({f"c/{k}": v for k, v in cls.arrays.items()})

    def composed(w):
        gw = {k[2:]: v for k, v in w.items() if k.startswith("g/")}
        cw = {k[2:]: v for k, v in w.items() if k.startswith("c/")}
        x0 = Tensor(images)
        logits = classifier_forward(cls, [x0, generator_forward(composed_gen, x0, gw)], cw)
        return focal_loss(logits, labels, loss_cfg)
    cases["generator_classifier_focal"] = (composed, params)
    return cases


def run_suite(seed=0, tol=1e-2, samples=MIN_SAMPLES):
    """
    Runs every case; returns the list of GradCheckReports
    """
    reports = []
    for name, (f, params) in {**primitive_cases(seed), **network_cases(seed)}.items():
        eps = 1e-4 if name in ("generator", "discriminator", "generator_classifier_focal") else 1e-3
        report = grad_check(f, params, eps=eps, tol=tol, samples=samples, seed=seed, name=name)
        level = logging.INFO if report.passed else logging.ERROR
        logger.log(level, f"gradcheck {name}: max_rel_err={report.max_rel_err:.2e} passed={report.passed}")
        reports.append(report)
    return reports
