"""Autodiff engine: every primitive's gradient against central differences."""

import numpy as np
import pytest

from descriptor_slam import autodiff as ad
from descriptor_slam.autodiff import AutodiffError, ShapeError, Tape
from descriptor_slam.nn import ParameterStore

FD_EPS = 1e-5


def finite_difference(f, x: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_gradient(build, *input_shapes, seed=0, rtol=1e-4, atol=1e-7):
    """Compare analytic gradients of sum(build(inputs)) against FD for each input."""
    rng = np.random.default_rng(seed)
    values = [rng.uniform(-1.5, 1.5, s) for s in input_shapes]

    for target in range(len(values)):
        store = ParameterStore()
        store["x"] = values[target].copy()

        def scalar_of(x):
            vals = [v.copy() for v in values]
            vals[target] = x
            tape = Tape()
            tensors = [tape.constant(v) for v in vals]
            return float(ad.sum_all(build(tape, *tensors)).data)

        tape = Tape()
        tensors = []
        for i, v in enumerate(values):
            tensors.append(tape.param(store, "x") if i == target else tape.constant(v))
        loss = ad.sum_all(build(tape, *tensors))
        analytic = ad.backward(tape, loss, store)["x"]
        fd = finite_difference(lambda x: scalar_of(x), values[target].copy())
        np.testing.assert_allclose(analytic, fd, rtol=rtol, atol=atol)


class TestPrimitiveForward:
    def test_softmax_uniform(self):
        tape = Tape()
        out = ad.softmax(tape.constant(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.full(3, 1 / 3), atol=1e-15)

    def test_cosine_similarity_self_is_one(self):
        tape = Tape()
        v = tape.constant(np.array([[1.0, 2.0, -3.0], [0.5, 0.0, 4.0]]))
        out = ad.cosine_similarity(v, v)
        np.testing.assert_allclose(out.data, [1.0, 1.0], atol=1e-12)

    def test_layer_norm_zero_mean_unit_variance(self):
        tape = Tape()
        rng = np.random.default_rng(0)
        x = tape.constant(rng.uniform(-5, 5, (4, 16)))
        gain = tape.constant(np.ones(16))
        bias = tape.constant(np.zeros(16))
        out = ad.layer_norm(x, gain, bias)
        np.testing.assert_allclose(out.data.mean(axis=1), 0, atol=1e-6)
        np.testing.assert_allclose(out.data.var(axis=1), 1, atol=1e-6)

    def test_shape_mismatch_reports_both_shapes(self):
        tape = Tape()
        a = tape.constant(np.zeros((2, 3)))
        b = tape.constant(np.zeros((4, 5)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.add(a, b)

    def test_non_finite_forward_rejected(self):
        tape = Tape()
        a = tape.constant(np.array([0.0]))
        with pytest.raises(AutodiffError):
            ad.log(a)  # log(0) = -inf

    def test_segment_max_forward(self):
        tape = Tape()
        x = tape.constant(np.array([[1.0, 5.0], [2.0, 1.0], [9.0, 0.0]]))
        out = ad.segment_max(x, [2, 1])
        np.testing.assert_array_equal(out.data, [[2.0, 5.0], [9.0, 0.0]])

    def test_gather_rows_repeats(self):
        tape = Tape()
        x = tape.constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = ad.gather_rows(x, np.array([1, 1, 0]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0], [3.0, 4.0], [1.0, 2.0]])


class TestPrimitiveGradients:
    """Each primitive against the central finite-difference oracle."""

    def test_matmul(self):
        check_gradient(lambda t, a, b: ad.matmul(a, b), (4, 3), (3, 2))

    def test_add_same_shape(self):
        check_gradient(lambda t, a, b: ad.mul(ad.add(a, b), a), (3, 4), (3, 4))

    def test_add_bias_broadcast(self):
        check_gradient(lambda t, a, b: ad.square(ad.add(a, b)), (5, 3), (3,))

    def test_sub_mul(self):
        check_gradient(lambda t, a, b: ad.mul(ad.sub(a, b), b), (2, 6), (2, 6))

    def test_scale_add_scalar(self):
        check_gradient(lambda t, a: ad.add_scalar(ad.scale(a, -2.5), 0.75), (7,))

    def test_relu(self):
        # offset inputs away from the kink at 0
        check_gradient(lambda t, a: ad.relu(ad.add_scalar(a, 0.01)), (6, 5), seed=3)

    def test_exp_log(self):
        check_gradient(lambda t, a: ad.log(ad.add_scalar(ad.exp(a), 1.0)), (4, 4))

    def test_sqrt(self):
        check_gradient(lambda t, a: ad.sqrt(ad.add_scalar(ad.square(a), 0.5)), (9,))

    def test_sigmoid(self):
        check_gradient(lambda t, a: ad.sigmoid(a), (3, 7))

    def test_softmax(self):
        check_gradient(lambda t, a: ad.mul(ad.softmax(a), a), (5, 6))

    def test_layer_norm_all_inputs(self):
        check_gradient(
            lambda t, x, g, b: ad.layer_norm(x, g, b), (4, 8), (8,), (8,), rtol=2e-4
        )

    def test_concat(self):
        check_gradient(lambda t, a, b: ad.square(ad.concat(a, b)), (3, 2), (3, 4))

    def test_concat_rows(self):
        check_gradient(lambda t, a, b: ad.square(ad.concat_rows(a, b)), (2, 3), (4, 3))

    def test_transpose(self):
        check_gradient(lambda t, a: ad.matmul(a, ad.transpose(a)), (3, 5))

    def test_mean_max_pool(self):
        check_gradient(lambda t, a: ad.mul(ad.mean_pool(a), ad.max_pool(a)), (6, 4))

    def test_row_sum_mean_all(self):
        check_gradient(lambda t, a: ad.square(ad.row_sum(a)), (5, 3))

    def test_gather_rows(self):
        idx = np.array([2, 0, 2, 1])
        check_gradient(lambda t, a: ad.square(ad.gather_rows(a, idx)), (3, 4))

    def test_slice_cols(self):
        check_gradient(lambda t, a: ad.square(ad.slice_cols(a, 1, 3)), (4, 5))

    def test_segment_max(self):
        check_gradient(lambda t, a: ad.square(ad.segment_max(a, [3, 2, 2])), (7, 4))

    def test_row_l2_normalize(self):
        check_gradient(lambda t, a: ad.row_l2_normalize(ad.add_scalar(a, 2.0)), (4, 5))

    def test_cosine_similarity(self):
        check_gradient(
            lambda t, a, b: ad.cosine_similarity(
                ad.add_scalar(a, 2.0), ad.add_scalar(b, 2.0)
            ),
            (4, 6),
            (4, 6),
        )

    def test_clip_passes_gradient_inside_range(self):
        check_gradient(lambda t, a: ad.clip(ad.scale(a, 0.1), -0.9, 0.9), (5,))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        store = ParameterStore()
        store["x"] = np.arange(6, dtype=float).reshape(2, 3)
        tape = Tape()
        loss = ad.sum_all(tape.param(store, "x"))
        grads = ad.backward(tape, loss, store)
        np.testing.assert_array_equal(grads["x"], np.ones((2, 3)))

    def test_unreachable_parameter_gets_zero(self):
        store = ParameterStore()
        store["used"] = np.ones(3)
        store["unused"] = np.ones(4)
        tape = Tape()
        loss = ad.sum_all(ad.square(tape.param(store, "used")))
        grads = ad.backward(tape, loss, store)
        np.testing.assert_array_equal(grads["unused"], np.zeros(4))
        assert grads["used"].shape == (3,)

    def test_gradients_in_store_order(self):
        store = ParameterStore()
        store["b"] = np.ones(2)
        store["a"] = np.ones(2)
        tape = Tape()
        loss = ad.sum_all(ad.add(tape.param(store, "a"), tape.param(store, "b")))
        grads = ad.backward(tape, loss, store)
        assert list(grads.keys()) == ["b", "a"]  # insertion order of the store

    def test_shared_parameter_accumulates(self):
        store = ParameterStore()
        store["w"] = np.array([2.0])
        tape = Tape()
        w1 = tape.param(store, "w")
        w2 = tape.param(store, "w")  # same node
        assert w1.node == w2.node
        loss = ad.sum_all(ad.mul(w1, w2))  # w^2 -> grad 2w = 4
        grads = ad.backward(tape, loss, store)
        np.testing.assert_allclose(grads["w"], [4.0])

    def test_non_scalar_loss_rejected(self):
        store = ParameterStore()
        store["x"] = np.ones(3)
        tape = Tape()
        x = tape.param(store, "x")
        with pytest.raises(AutodiffError):
            ad.backward(tape, x, store)

    def test_grad_disabled_tape_rejects_backward(self):
        tape = Tape(grad_enabled=False)
        store = ParameterStore()
        store["x"] = np.ones(3)
        loss = ad.sum_all(tape.param(store, "x"))
        with pytest.raises(AutodiffError):
            ad.backward(tape, loss, store)

    def test_forward_bit_deterministic(self):
        def run():
            tape = Tape()
            rng = np.random.default_rng(42)
            a = tape.constant(rng.uniform(-1, 1, (8, 8)))
            return ad.softmax(ad.matmul(a, ad.transpose(a))).data.tobytes()

        assert run() == run()
