"""
Tests for the tensor engine: primitives against loop oracles, the tape,
checked mode and finite-difference gradient checks.
"""
import threading

import numpy as np
import pytest

from engine import Tape, Tensor, backward, checked_mode, custom_op, default_dtype, grad_check, ops
from evaluation.gradcheck_suite import network_cases, primitive_cases, run_suite
from models.errors import NonFiniteError, ShapeError, TapeError


def naive_conv2d(x, w, b, stride, padding):
    """Direct seven-loop cross-correlation"""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for i in range(n):
        for o in range(k):
            for r in range(ho):
                for s in range(wo):
                    window = xp[i, :, r * stride:r * stride + kh, s * stride:s * stride + kw]
                    out[i, o, r, s] = np.sum(window * w[o]) + b[o]
    return out


def naive_conv2d_transpose(x, w, b, stride, padding, output_padding=0):
    """Scatter every input pixel through the kernel, then crop the padding"""
    n, c, h, wd = x.shape
    _, k, kh, kw = w.shape
    hf = (h - 1) * stride + kh + output_padding
    wf = (wd - 1) * stride + kw + output_padding
    full = np.zeros((n, k, hf, wf))
    for i in range(n):
        for ci in range(c):
            for r in range(h):
                for s in range(wd):
                    full[i, :, r * stride:r * stride + kh, s * stride:s * stride + kw] += x[i, ci, r, s] * w[ci]
    return full[:, :, padding:hf - padding, padding:wf - padding] + b[None, :, None, None]


# =============================================================================
# Primitives
# =============================================================================

class TestConvolution:

    def test_all_ones(self):
        out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, [[[[9.0]]]])

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 1, 5, 5)).astype(np.float32)
        kernel = np.zeros((1, 1, 3, 3), dtype=np.float32)
        kernel[0, 0, 1, 1] = 1.0
        np.testing.assert_allclose(ops.conv2d(Tensor(x), Tensor(kernel), padding=1).data, x)

    def test_matches_loop_oracle(self, rng):
        with default_dtype(np.float64):
            for _ in range(60):
                n, c, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
                kh = int(rng.choice([1, 3, 4]))
                stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 3))
                h = int(rng.integers(max(1, kh - 2 * padding), 8))
                x = rng.standard_normal((n, c, h, h))
                w = rng.standard_normal((k, c, kh, kh))
                b = rng.standard_normal(k)
                out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
                np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, padding), rtol=1e-10, atol=1e-10)

    def test_transpose_is_adjoint(self, rng):
        with default_dtype(np.float64):
            for _ in range(50):
                c, k = rng.integers(1, 4), rng.integers(1, 4)
                kh = int(rng.choice([3, 4]))
                stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
                h = int(rng.integers(kh, 9))
                remainder = (h + 2 * padding - kh) % stride
                x = rng.standard_normal((2, c, h, h))
                w = rng.standard_normal((k, c, kh, kh))
                y_shape = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).shape
                y = rng.standard_normal(y_shape)

                forward = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
                adjoint = ops.conv2d_transpose(Tensor(y), Tensor(w), stride=stride, padding=padding,
                                               output_padding=remainder).data
                assert adjoint.shape == x.shape
                assert np.sum(forward * y) == pytest.approx(np.sum(x * adjoint), rel=1e-9)

    def test_transpose_matches_loop_oracle(self, rng):
        with default_dtype(np.float64):
            for _ in range(50):
                c, k = rng.integers(1, 4), rng.integers(1, 4)
                kh = int(rng.choice([1, 3, 4]))
                stride = int(rng.integers(1, 3))
                padding = int(rng.integers(0, (kh + 1) // 2))
                output_padding = int(rng.integers(0, stride))
                h = int(rng.integers(1, 6))
                x = rng.standard_normal((2, c, h, h))
                w = rng.standard_normal((c, k, kh, kh))
                b = rng.standard_normal(k)
                out = ops.conv2d_transpose(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding,
                                           output_padding=output_padding)
                expected = naive_conv2d_transpose(x, w, b, stride, padding, output_padding)
                np.testing.assert_allclose(out.data, expected, rtol=1e-10, atol=1e-10)

    def test_transpose_single_pixel(self):
        out = ops.conv2d_transpose(Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.ones((1, 1, 4, 4))),
                                   Tensor(np.zeros(1)), stride=2, padding=1)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.0))

    def test_transpose_of_zeros_is_bias(self, rng):
        w = Tensor(rng.standard_normal((2, 3, 4, 4)))
        out = ops.conv2d_transpose(Tensor(np.zeros((1, 2, 3, 3))), w, Tensor(np.array([0.5, -1.0, 2.0])),
                                   stride=2, padding=1)
        assert out.shape == (1, 3, 6, 6)
        for channel, value in enumerate([0.5, -1.0, 2.0]):
            np.testing.assert_array_equal(out.data[0, channel], np.full((6, 6), value, dtype=np.float32))

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 3, 4, 4\).*\(2, 2, 3, 3\)"):
            ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


class TestElementwise:

    def test_broadcast_add(self):
        out = Tensor(np.ones((2, 3))) + Tensor(np.arange(3.0))
        np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])

    def test_incompatible_broadcast(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))

    def test_max_pool_keeps_odd_edge(self):
        x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
        np.testing.assert_array_equal(ops.max_pool2d(x, 2).data[0, 0], [[4, 5], [7, 8]])

    def test_log_softmax_is_stable(self):
        out = ops.log_softmax(Tensor(np.array([[1000.0, 0.0]], dtype=np.float32)))
        np.testing.assert_allclose(out.data, [[0.0, -1000.0]], atol=1e-3)

    def test_max_pool_single_window(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        np.testing.assert_array_equal(ops.max_pool2d(x, 2).data, [[[[4.0]]]])

    def test_global_avg_pool(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]], [[0.0, 0.0], [0.0, 0.0]]]]))
        np.testing.assert_array_equal(ops.global_avg_pool(x).data, [[2.5, 0.0]])

    def test_fully_connected_identity(self, rng):
        x = rng.standard_normal((3, 5)).astype(np.float32)
        out = ops.fully_connected(Tensor(x), Tensor(np.eye(5)), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(out.data, x)

    def test_clip_min_blocks_gradient_below_floor(self):
        tape = Tape()
        x = tape.watch(Tensor([0.0, 0.5, 2.0]))
        out = ops.clip_min(x, 0.5)
        backward(tape, ops.sum(out))
        np.testing.assert_array_equal(out.data, [0.5, 0.5, 2.0])
        np.testing.assert_array_equal(tape.grad(x).data, [0.0, 0.0, 1.0])


class TestInstanceNorm:

    def test_hand_example(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), dtype=np.float64)
        out = ops.instance_norm(x, Tensor(np.ones(1), dtype=np.float64), Tensor(np.zeros(1), dtype=np.float64))
        expected = (np.array([[1.0, 2.0], [3.0, 4.0]]) - 2.5) / np.sqrt(1.25 + 1e-5)
        np.testing.assert_allclose(out.data[0, 0], expected, rtol=1e-12)

    def test_affine_map(self, rng):
        with default_dtype(np.float64):
            x = Tensor(rng.standard_normal((2, 3, 4, 4)))
            plain = ops.instance_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data
            out = ops.instance_norm(x, Tensor([2.0, 1.0, 0.5]), Tensor([1.0, 0.0, -1.0])).data
        np.testing.assert_allclose(out, plain * np.array([2.0, 1.0, 0.5])[None, :, None, None]
                                   + np.array([1.0, 0.0, -1.0])[None, :, None, None], rtol=1e-12)

    def test_planes_are_standardized(self, rng):
        with default_dtype(np.float64):
            x = Tensor(3.0 + 5.0 * rng.standard_normal((2, 3, 8, 8)))
            out = ops.instance_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        np.testing.assert_allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(2, 3)), 1.0, rtol=1e-3)

    def test_constant_plane_maps_to_beta(self):
        out = ops.instance_norm(Tensor(np.full((1, 2, 3, 3), 7.0)), Tensor(np.ones(2)), Tensor([0.25, -0.5]))
        np.testing.assert_allclose(out.data[0, 0], 0.25, atol=1e-6)
        np.testing.assert_allclose(out.data[0, 1], -0.5, atol=1e-6)

    def test_single_pixel_plane_rejected(self):
        with pytest.raises(ShapeError):
            ops.instance_norm(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


# =============================================================================
# Tensors and the tape
# =============================================================================

class TestTensor:

    def test_tensor_is_read_only(self):
        t = Tensor(np.zeros(3))
        with pytest.raises(ValueError):
            t.data[0] = 1.0

    def test_construction_copies(self):
        source = np.zeros(3, dtype=np.float32)
        t = Tensor(source)
        source[0] = 5.0
        assert t.data[0] == 0.0

    def test_integer_data_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.arange(3), dtype=np.int64)


class TestTape:

    def test_gradients_of_simple_graph(self):
        tape = Tape()
        a = tape.watch(Tensor([2.0, 3.0]))
        b = tape.watch(Tensor([4.0, 5.0]))
        loss = ops.sum(a * b + a)
        backward(tape, loss)
        np.testing.assert_allclose(tape.grad(a).data, [5.0, 6.0])
        np.testing.assert_allclose(tape.grad(b).data, [2.0, 3.0])

    def test_unused_leaf_gets_exact_zeros(self):
        tape = Tape()
        a = tape.watch(Tensor([1.0, 2.0]))
        unused = tape.watch(Tensor(np.ones((2, 2))))
        backward(tape, ops.sum(a * a))
        np.testing.assert_array_equal(tape.grad(unused).data, np.zeros((2, 2)))

    def test_constants_are_not_recorded(self):
        tape = Tape()
        a = tape.watch(Tensor([1.0]))
        ops.exp(Tensor([1.0]))
        assert len(tape) == 1
        assert (a * 2.0).tape is tape

    def test_loss_must_be_scalar(self):
        tape = Tape()
        a = tape.watch(Tensor([1.0, 2.0]))
        with pytest.raises(ShapeError):
            backward(tape, a * 2.0)

    def test_mixing_tapes_fails(self):
        a = Tape().watch(Tensor([1.0]))
        b = Tape().watch(Tensor([1.0]))
        with pytest.raises(TapeError):
            a + b

    def test_tape_is_thread_confined(self):
        tape = Tape()
        errors = []

        def worker():
            try:
                tape.watch(Tensor([1.0]))
            except TapeError as error:
                errors.append(error)

        thread = threading.Thread(target=worker)
        thread.start()
        thread.join()
        assert len(errors) == 1


class TestCheckedMode:

    def test_non_finite_value_raises(self):
        with checked_mode(True):
            with pytest.raises(NonFiniteError, match="log"):
                with np.errstate(invalid="ignore"):
                    ops.log(Tensor([-1.0]))

    def test_unchecked_mode_propagates_nan(self):
        with checked_mode(False):
            with np.errstate(invalid="ignore"):
                out = ops.log(Tensor([-1.0]))
        assert np.isnan(out.data[0])


# =============================================================================
# Gradient checks
# =============================================================================

class TestGradCheck:

    @pytest.mark.parametrize("name", sorted(primitive_cases(0)))
    def test_primitive(self, name):
        f, params = primitive_cases(0)[name]
        report = grad_check(f, params, eps=1e-3, tol=1e-2, samples=64, name=name)
        assert report.passed, report

    @pytest.mark.parametrize("name", sorted(network_cases(0)))
    def test_network(self, name):
        f, params = network_cases(0)[name]
        report = grad_check(f, params, eps=1e-4, tol=1e-2, samples=64, name=name)
        assert report.passed, report

    def test_wrong_backward_is_detected(self):
        def bad_square(x):
            # backward drops the factor 2
            return custom_op("bad_square", [x], x.data * x.data, lambda g: (g * x.data,))

        report = grad_check(lambda w: ops.sum(bad_square(w["x"])), {"x": np.array([0.5, 1.0, -2.0])})
        assert not report.passed
        assert report.max_rel_err > 0.3

    def test_eps_range_enforced(self):
        with pytest.raises(ValueError):
            grad_check(lambda w: ops.sum(w["x"]), {"x": np.ones(2)}, eps=0.1)

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError, match="at least 64"):
            grad_check(lambda w: ops.sum(w["x"]), {"x": np.ones(2)}, samples=16)
        with pytest.raises(ValueError):
            run_suite(seed=0, samples=63)

    @pytest.mark.slow
    def test_suite_reports_every_case(self):
        reports = run_suite(seed=0)
        names = {r.name for r in reports}
        assert {"conv2d", "instance_norm", "generator_classifier_focal"} <= names
        assert all(r.passed for r in reports), [r for r in reports if not r.passed]
