import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ovdet import autodiff as ad
from ovdet.autodiff import Tensor
from ovdet.gradcheck import check_gradients


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_hand_product(self):
        assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_zero_annihilates(self):
        a = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        assert not ad.matmul(a, Tensor(np.zeros((4, 2)))).data.any()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward_formulas(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        dc = rng.normal(size=(3, 2))
        ad.backward(ad.sum_(ad.matmul(a, b) * dc))
        np.testing.assert_allclose(a.grad, dc @ b.data.T, atol=1e-14)
        np.testing.assert_allclose(b.grad, a.data.T @ dc, atol=1e-14)

    @given(arrays(np.float64, (3, 3), elements=st.integers(-50, 50).map(float)))
    def test_identity_is_exact(self, a):
        eye = Tensor(np.eye(3))
        assert np.array_equal(ad.matmul(eye, Tensor(a)).data, a)
        assert np.array_equal(ad.matmul(Tensor(a), eye).data, a)


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(ad.softmax_rows(Tensor([[0.0, 0, 0]])).data, [[1 / 3] * 3])

    def test_masked_uniform(self):
        out = ad.softmax_rows(Tensor([[0.0, 0, 0]]), np.array([True, True, False])).data
        assert out.tolist() == [[0.5, 0.5, 0.0]]

    def test_reference_values(self):
        out = ad.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
        np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_all_masked_row_raises(self):
        with pytest.raises(ad.DegenerateMaskError):
            ad.softmax_rows(Tensor([[1.0, 2.0]]), np.array([False, False]))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-30, 30)),
           arrays(bool, (6,)).filter(lambda m: m.any()))
    def test_rows_sum_to_one_and_masked_are_zero(self, x, mask):
        t = leaf(x)
        out = ad.softmax_rows(t, mask)
        np.testing.assert_allclose(out.data[:, mask].sum(axis=1), 1.0, atol=1e-12)
        assert (out.data[:, ~mask] == 0.0).all()
        w = np.random.default_rng(0).normal(size=x.shape)
        ad.backward(ad.sum_(out * w))
        assert (t.grad[:, ~mask] == 0.0).all()


class TestSigmoid:
    def test_values(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5
        assert ad.sigmoid(Tensor(-50.0)).item() < 1e-20
        assert abs(ad.sigmoid(Tensor(1.0)).item() - 0.7310586) < 1e-6

    def test_chain_rule(self):
        w = leaf(1.0)
        ad.backward(ad.sigmoid(Tensor(0.0)) * w)
        assert w.grad == 0.5


class TestL2Normalize:
    def test_pythagorean(self):
        np.testing.assert_allclose(ad.l2_normalize_rows(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]])

    def test_unit_fixed_point(self):
        v = np.array([[0.0, 1.0, 0.0]])
        assert np.array_equal(ad.l2_normalize_rows(Tensor(v)).data, v)

    def test_zero_row(self):
        assert not ad.l2_normalize_rows(Tensor(np.zeros((1, 3))), eps=1e-12).data.any()


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(4.0).reshape(2, 2))
        ad.backward(ad.sum_(x))
        assert np.array_equal(x.grad, np.ones((2, 2)))

    def test_non_scalar_rejected(self):
        x = leaf(np.ones((2, 2)))
        with pytest.raises(ValueError):
            ad.backward(x * 2.0)

    def test_matmul_chain_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        a, b, c = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(5, 2)))
        err, _ = check_gradients(lambda: ad.sum_(ad.sin(ad.matmul(ad.matmul(a, b), c))), [a, b, c])
        assert err < 1e-6

    def test_two_consumers_add(self):
        rng = np.random.default_rng(4)
        x0 = rng.normal(size=(3,))

        def grad_of(fn):
            x = leaf(x0)
            ad.backward(fn(x))
            return x.grad

        g1 = grad_of(lambda x: ad.sum_(ad.exp(x)))
        g2 = grad_of(lambda x: ad.sum_(x * x))
        both = grad_of(lambda x: ad.sum_(ad.exp(x)) + ad.sum_(x * x))
        np.testing.assert_allclose(both, g1 + g2, atol=1e-14)

    def test_each_node_visited_once(self):
        x = leaf(2.0)
        y = x * x          # shared by two consumers below
        z = y * 3.0 + y
        ad.backward(z)
        assert x.grad == pytest.approx(16.0)

    def test_tape_discarded(self):
        x = leaf(1.0)
        y = ad.exp(x) * 2.0
        ad.backward(y)
        assert y._parents == () or not y._parents
        with pytest.raises(ValueError):
            ad.backward(y)

    def test_no_grad_builds_no_tape(self):
        x = leaf(1.0)
        with ad.no_grad():
            y = x * 2.0
        assert not y.requires_grad


class TestFiniteness:
    def test_log_of_zero_raises(self):
        with pytest.raises(ad.NonFiniteError):
            ad.log(Tensor(0.0))

    def test_overflow_raises(self):
        with pytest.raises(ad.NonFiniteError):
            ad.exp(Tensor(1000.0))

    def test_grad_shape_matches(self):
        x = leaf(np.ones((2, 3)))
        ad.backward(ad.sum_(x * Tensor(np.ones(3))))
        assert x.grad.shape == x.shape
