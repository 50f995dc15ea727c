import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import signal

from hfrestore import gradcheck as gc
from hfrestore import tensor as T
from hfrestore.errors import ConfigurationError, ContractError, ShapeError, TapeExhaustedError
from hfrestore.tensor import SortIndex, Tensor

from oracles import dft2_direct

GRAD_TOL = 1e-4
PROBES = range(5)


def rand(seed, *shape):
    return np.random.default_rng(seed).normal(size=shape)


def scalar_check(fn, arrays, out_shape, seed, **kw):
    return gc.check(gc.projected(fn, out_shape, seed), arrays, seed=seed, **kw)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_row_times_column(self):
        assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]

    def test_sum_gradient_matches_fd(self):
        a, b = rand(0, 3, 4), rand(1, 4, 2)
        err = gc.check(lambda x, y: T.tsum(T.matmul(x, y)), [a, b])
        assert err < 1e-6

    @pytest.mark.parametrize("seed", PROBES)
    def test_batched_broadcast_gradient(self, seed):
        a, b = rand(seed, 2, 3, 4), rand(seed + 10, 4, 5)
        assert scalar_check(T.matmul, [a, b], (2, 3, 5), seed) < GRAD_TOL

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_large_logit_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1, 0, 0], atol=1e-12)

    def test_gradient_length5(self):
        err = scalar_check(lambda x: T.softmax(x, 0), [rand(3, 5)], (5,), 3)
        assert err < 1e-6

    @given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        y = T.softmax(Tensor(x), axis=1).data
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((y >= 0) & (y <= 1))
        np.testing.assert_allclose(T.softmax(Tensor(x + c), axis=1).data, y, atol=1e-12)

    def test_bad_axis(self):
        with pytest.raises(ContractError):
            T.softmax(Tensor(np.ones(3)), axis=2)


def unfused_attention(q, k, v, scale):
    kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    return T.matmul(T.softmax(T.mul(T.matmul(q, kt), scale), axis=-1), v)


class TestAttention:
    @pytest.mark.parametrize("shapes", [((5, 3), (7, 3), (7, 4)), ((2, 3, 6, 3), (3, 6, 3), (1, 6, 2))])
    def test_matches_unfused(self, shapes):
        arrays = [rand(i, *s) for i, s in enumerate(shapes)]
        fused = T.attention(*[Tensor(a) for a in arrays], 0.7).data
        ref = unfused_attention(*[Tensor(a) for a in arrays], 0.7).data
        np.testing.assert_allclose(fused, ref, atol=1e-14)

    def test_row_chunks_match_single_block(self, monkeypatch):
        arrays = [rand(1, 2, 40, 4), rand(2, 2, 30, 4), rand(3, 2, 30, 5)]
        whole = T.attention(*[Tensor(a) for a in arrays], 0.5).data
        monkeypatch.setattr(T, "_ATTN_BLOCK", 64)
        np.testing.assert_allclose(T.attention(*[Tensor(a) for a in arrays], 0.5).data, whole, atol=1e-14)
        fn = lambda q, k, v: T.attention(q, k, v, 0.5)
        assert scalar_check(fn, arrays, (2, 40, 5), 0) < GRAD_TOL

    @pytest.mark.parametrize("seed", PROBES)
    def test_broadcast_gradient(self, seed):
        arrays = [rand(seed, 2, 4, 3), rand(seed + 1, 5, 3), rand(seed + 2, 1, 5, 2)]
        fn = lambda q, k, v: T.attention(q, k, v, 0.6)
        assert scalar_check(fn, arrays, (2, 4, 2), seed) < GRAD_TOL

    def test_constant_keys_get_no_gradient(self):
        q = Tensor(rand(0, 3, 2), requires_grad=True)
        k, v = Tensor(rand(1, 4, 2)), Tensor(rand(2, 4, 2))
        with T.Tape() as tape:
            loss = T.tsum(T.attention(q, k, v, 1.0))
        tape.backward(loss)
        assert q.grad.shape == (3, 2)
        assert k.grad is None and v.grad is None

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.attention(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 3))), Tensor(np.ones((4, 2))), 1.0)
        with pytest.raises(ShapeError):
            T.attention(Tensor(np.ones((2, 3, 2))), Tensor(np.ones((3, 4, 2))), Tensor(np.ones((4, 2))), 1.0)


class TestSortGather:
    def test_sort_example(self):
        out, idx = T.sort_with_index(Tensor([3.0, 1.0, 2.0]))
        assert out.data.tolist() == [1, 2, 3]
        assert idx.order.tolist() == [1, 2, 0]

    def test_sorted_input_gives_identity(self):
        _, idx = T.sort_with_index(Tensor(np.arange(6.0)))
        assert idx.order.tolist() == list(range(6))

    def test_ties_are_stable(self):
        _, idx = T.sort_with_index(Tensor([2.0, 1.0, 2.0, 1.0]))
        assert idx.order.tolist() == [1, 3, 0, 2]

    def test_order_recorder(self):
        with T.record_orders() as orders:
            T.sort_with_index(Tensor([3.0, 1.0, 2.0]))
            T.sort_with_index(Tensor([[1.0, 0.0]]), axis=1)
        assert [o.tolist() for o in orders] == [[1, 2, 0], [[1, 0]]]
        T.sort_with_index(Tensor([1.0, 0.0]))
        assert len(orders) == 2

    def test_sum_gradient_is_ones(self):
        x = Tensor(rand(0, 7), requires_grad=True)
        with T.Tape() as tape:
            out, _ = T.sort_with_index(x)
            loss = T.tsum(out)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones(7))

    @pytest.mark.parametrize("seed", PROBES)
    def test_sort_gradient(self, seed):
        assert scalar_check(lambda x: T.sort_with_index(x, axis=1)[0], [rand(seed, 3, 6)], (3, 6), seed) < GRAD_TOL

    def test_gather_example(self):
        out = T.gather(Tensor([10.0, 20.0, 30.0]), SortIndex(np.array([2, 0, 1]), 0))
        assert out.data.tolist() == [30, 10, 20]

    def test_gather_identity(self):
        x = rand(0, 5)
        np.testing.assert_array_equal(T.gather(Tensor(x), SortIndex(np.arange(5), 0)).data, x)

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            T.gather(Tensor([1.0, 2.0]), SortIndex(np.array([0, 2]), 0))

    def test_gather_rejects_non_permutation(self):
        with pytest.raises(IndexError):
            T.gather(Tensor([1.0, 2.0]), SortIndex(np.array([0, 0]), 0))

    @pytest.mark.parametrize("seed", PROBES)
    def test_gather_gradient_4x6(self, seed):
        order = np.argsort(np.random.default_rng(seed).random((4, 6)), axis=1)
        idx = SortIndex(order, 1)
        assert scalar_check(lambda x: T.gather(x, idx), [rand(seed, 4, 6)], (4, 6), seed) < GRAD_TOL

    @pytest.mark.parametrize("seed", PROBES)
    def test_scatter_gradient(self, seed):
        order = np.argsort(np.random.default_rng(seed).random((3, 5)), axis=0)
        idx = SortIndex(order, 0)
        assert scalar_check(lambda x: T.scatter(x, idx), [rand(seed, 3, 5)], (3, 5), seed) < GRAD_TOL

    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
                      elements=st.floats(-1e6, 1e6)), st.integers(0, 1))
    @settings(max_examples=100, deadline=None)
    def test_sort_then_inverse_gather_is_identity(self, x, axis):
        s, idx = T.sort_with_index(Tensor(x), axis=axis)
        assert np.all(np.diff(s.data, axis=axis) >= 0)
        np.testing.assert_array_equal(T.gather(s, idx.inverse()).data, x)
        np.testing.assert_array_equal(T.scatter(s, idx).data, x)

    @pytest.mark.parametrize("seed", PROBES)
    def test_take_with_repeats_gradient(self, seed):
        idx = np.array([0, 2, 2, 4, 4, 4])
        assert scalar_check(lambda x: T.take(x, idx, axis=1), [rand(seed, 2, 5)], (2, 6), seed) < GRAD_TOL


class TestConv:
    def test_pointwise_identity(self):
        x = rand(0, 3, 5, 5)
        out = T.conv2d(Tensor(x), Tensor(np.eye(3)), mode="pointwise")
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("k", [3, 5, 7])
    def test_depthwise_center_identity(self, k):
        x = rand(0, 2, 6, 6)
        w = np.zeros((2, k, k))
        w[:, k // 2, k // 2] = 1.0
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w), mode="depthwise").data, x)

    def test_full_identity_kernel(self):
        x = rand(1, 3, 4, 4)
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)

    def test_full_matches_scipy_correlation(self):
        x, w = rand(2, 2, 6, 6), rand(3, 3, 2, 5, 5)
        ref = np.stack([sum(signal.correlate2d(x[ci], w[co, ci], mode="same") for ci in range(2))
                        for co in range(3)])
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w)).data, ref, atol=1e-12)

    def test_depthwise_matches_scipy_correlation(self):
        x, w = rand(4, 3, 5, 7), rand(5, 3, 3, 3)
        ref = np.stack([signal.correlate2d(x[c], w[c], mode="same") for c in range(3)])
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), mode="depthwise").data, ref, atol=1e-12)

    @pytest.mark.parametrize("k", [3, 5])
    def test_large_depthwise_matches_scipy_correlation(self, k):
        # 40x40 is above the size where depthwise convs switch to scipy.ndimage
        x, w = rand(4, 2, 40, 40), rand(5, 2, k, k)
        ref = np.stack([signal.correlate2d(x[c], w[c], mode="same") for c in range(2)])
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), mode="depthwise").data, ref, atol=1e-12)

    @pytest.mark.parametrize("seed", PROBES)
    def test_large_depthwise_gradient(self, seed):
        fn = lambda x, w: T.conv2d(x, w, mode="depthwise")
        arrays = [rand(seed, 2, 32, 32), rand(seed + 1, 2, 5, 5)]
        assert scalar_check(fn, arrays, (2, 32, 32), seed) < GRAD_TOL

    def test_strided_is_subsampled_same_conv(self):
        x, w = rand(6, 2, 8, 8), rand(7, 4, 2, 3, 3)
        full = T.conv2d(Tensor(x), Tensor(w)).data
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), stride=2).data, full[:, ::2, ::2], atol=1e-12)

    @pytest.mark.parametrize("seed", PROBES)
    def test_depthwise3_gradient(self, seed):
        fn = lambda x, w: T.conv2d(x, w, mode="depthwise")
        assert scalar_check(fn, [rand(seed, 2, 5, 5), rand(seed + 1, 2, 3, 3)], (2, 5, 5), seed) < 1e-6

    @pytest.mark.parametrize("seed", PROBES)
    def test_full_strided_gradient(self, seed):
        fn = lambda x, w, b: T.conv2d(x, w, b, stride=2)
        arrays = [rand(seed, 2, 6, 6), rand(seed + 1, 3, 2, 3, 3), rand(seed + 2, 3)]
        assert scalar_check(fn, arrays, (3, 3, 3), seed) < GRAD_TOL

    @pytest.mark.parametrize("seed", PROBES)
    def test_pointwise_gradient(self, seed):
        fn = lambda x, w, b: T.conv2d(x, w, b, mode="pointwise")
        arrays = [rand(seed, 3, 4, 4), rand(seed + 1, 2, 3), rand(seed + 2, 2)]
        assert scalar_check(fn, arrays, (2, 4, 4), seed) < GRAD_TOL

    def test_unsupported_kernel_size(self):
        with pytest.raises(ConfigurationError):
            T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 2, 2))), mode="depthwise")
        with pytest.raises(ConfigurationError):
            T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 9, 9))))


class TestLayerNorm:
    def test_constant_input_gives_zeros(self):
        out = T.layernorm(Tensor(np.full((4, 3, 3), 2.5)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_standardized_input_unchanged(self):
        x = rand(0, 8, 5, 5)
        x = (x - x.mean(axis=0)) / x.std(axis=0)
        np.testing.assert_allclose(T.layernorm(Tensor(x)).data, x, atol=1e-6)

    @pytest.mark.parametrize("seed", PROBES)
    def test_gradient_4_channels(self, seed):
        fn = lambda x, w, b: T.layernorm(x, w, b, axis=0)
        arrays = [rand(seed, 4, 2, 3), rand(seed + 1, 4), rand(seed + 2, 4)]
        assert scalar_check(fn, arrays, (4, 2, 3), seed) < GRAD_TOL


class TestFFT:
    def test_constant_image(self):
        c = 0.7
        out = T.fft2_realimag(Tensor(np.full((1, 4, 8), c))).data
        assert out[0, 0, 0, 0] == pytest.approx(c * 32, rel=1e-14)
        rest = out.copy()
        rest[0, 0, 0, 0] = 0.0
        np.testing.assert_allclose(rest, 0.0, atol=1e-12)

    def test_zero_image(self):
        np.testing.assert_array_equal(T.fft2_realimag(Tensor(np.zeros((2, 8, 8)))).data, 0.0)

    def test_matches_direct_dft_and_parseval(self):
        x = rand(0, 3, 8, 8)
        out = T.fft2_realimag(Tensor(x)).data
        ref = dft2_direct(x)
        np.testing.assert_allclose(out[:, 0], ref.real, atol=1e-10)
        np.testing.assert_allclose(out[:, 1], ref.imag, atol=1e-10)
        energy = (out ** 2).sum()
        assert abs(energy - 64 * (x ** 2).sum()) / energy < 1e-8

    def test_linearity(self):
        x, y = rand(1, 2, 8, 8), rand(2, 2, 8, 8)
        lhs = T.fft2_realimag(Tensor(2.5 * x - 0.75 * y)).data
        rhs = 2.5 * T.fft2_realimag(Tensor(x)).data - 0.75 * T.fft2_realimag(Tensor(y)).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    @pytest.mark.parametrize("seed", PROBES)
    def test_gradient(self, seed):
        assert scalar_check(T.fft2_realimag, [rand(seed, 2, 4, 8)], (2, 2, 4, 8), seed) < GRAD_TOL

    def test_non_power_of_two(self):
        with pytest.raises(ConfigurationError, match="power-of-two"):
            T.fft2_realimag(Tensor(np.ones((1, 6, 8))))


class TestResize:
    def test_down_is_block_average(self):
        x = rand(0, 2, 4, 6)
        ref = x.reshape(2, 2, 2, 3, 2).mean(axis=(2, 4))
        np.testing.assert_allclose(T.bilinear_resize(Tensor(x), 0.5).data, ref, atol=1e-14)

    def test_up_matches_torch_half_pixel(self):
        torch = pytest.importorskip("torch")
        x = rand(1, 3, 4, 5)
        ref = torch.nn.functional.interpolate(torch.from_numpy(x)[None], scale_factor=2, mode="bilinear",
                                              align_corners=False)[0].numpy()
        np.testing.assert_allclose(T.bilinear_resize(Tensor(x), 2).data, ref, atol=1e-12)

    @pytest.mark.parametrize("seed", PROBES)
    @pytest.mark.parametrize("scale", [2, 0.5])
    def test_gradient(self, seed, scale):
        out = (2, int(4 * scale), int(4 * scale))
        assert scalar_check(lambda x: T.bilinear_resize(x, scale), [rand(seed, 2, 4, 4)], out, seed) < GRAD_TOL

    def test_bad_scale(self):
        with pytest.raises(ConfigurationError):
            T.bilinear_resize(Tensor(np.ones((1, 4, 4))), 3)


@pytest.mark.parametrize("seed", PROBES)
class TestElementwiseGradients:
    def test_relu(self, seed):
        x = rand(seed, 3, 4)
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        assert scalar_check(T.relu, [x], (3, 4), seed) < GRAD_TOL

    def test_sigmoid(self, seed):
        assert scalar_check(T.sigmoid, [3 * rand(seed, 3, 4)], (3, 4), seed) < GRAD_TOL

    def test_add_mul_broadcast(self, seed):
        fn = lambda a, b, c: a * b + c
        arrays = [rand(seed, 2, 3, 4), rand(seed + 1, 3, 1), rand(seed + 2, 4)]
        assert scalar_check(fn, arrays, (2, 3, 4), seed) < GRAD_TOL

    def test_div_sub(self, seed):
        fn = lambda a, b: (a - b) / (b * b + 1.0)
        assert scalar_check(fn, [rand(seed, 5), rand(seed + 1, 5)], (5,), seed) < GRAD_TOL

    def test_huber(self, seed):
        x = 2 * rand(seed, 10)
        x[np.abs(np.abs(x) - 1) < 1e-3] = 0.3
        assert scalar_check(T.huber, [x], (10,), seed) < GRAD_TOL

    def test_split_concat(self, seed):
        def fn(x):
            a, b = T.split(x, [1, 3], axis=0)
            return T.concat([b * 2.0, a, a], axis=0)
        assert scalar_check(fn, [rand(seed, 4, 3)], (5, 3), seed) < GRAD_TOL

    def test_reshape_transpose(self, seed):
        fn = lambda x: T.transpose(T.reshape(x, (3, 2, 4)), (2, 0, 1))
        assert scalar_check(fn, [rand(seed, 6, 4)], (4, 3, 2), seed) < GRAD_TOL

    def test_sum_mean(self, seed):
        fn = lambda x: T.mean(x, axis=1) * T.tsum(x, axis=(0, 1), keepdims=False)
        assert scalar_check(fn, [rand(seed, 3, 4, 2)], (3, 2), seed) < GRAD_TOL


class TestTape:
    def test_sum_gradient_is_ones(self):
        x = Tensor(rand(0, 2, 3), requires_grad=True)
        with T.Tape() as tape:
            loss = T.tsum(x)
        T.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_half_square_gradient_is_x(self):
        x = Tensor(rand(1, 4), requires_grad=True)
        with T.Tape() as tape:
            loss = T.tsum(x * x) * 0.5
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, x.data, atol=1e-15)

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.Tape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_second_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.Tape() as tape:
            loss = T.tsum(x)
        tape.backward(loss)
        with pytest.raises(TapeExhaustedError):
            tape.backward(loss)

    def test_no_tape_means_no_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        assert not T.tsum(x).requires_grad

    def test_gradients_accumulate_across_tapes(self):
        x = Tensor(np.ones(2), requires_grad=True)
        for _ in range(2):
            with T.Tape() as tape:
                loss = T.tsum(x * 3.0)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_deterministic(self):
        def run():
            x = Tensor(rand(3, 4, 4), requires_grad=True)
            with T.Tape() as tape:
                loss = T.tsum(T.softmax(T.matmul(x, x), axis=1) * x)
            tape.backward(loss)
            return x.grad
        np.testing.assert_array_equal(run(), run())
