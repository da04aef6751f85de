import numpy as np
import pytest

from pccnn import autodiff as ad
from pccnn.autodiff import Parameter, Tensor, backward, zero_grads
from pccnn.gradcheck import check_gradients


def make_param(rng, shape, name):
    return Parameter(rng.standard_normal(shape), name)


def fd_check(loss_fn, params, tol=1e-6):
    report = check_gradients(loss_fn, params, step=1e-5, tol=tol)
    assert report.passed, f"worst: {report.worst}"


class TestMatmul:
    def test_identity(self):
        b = Tensor(np.arange(6.0).reshape(2, 3))
        out = ad.matmul(Tensor(np.eye(2)), b)
        assert np.array_equal(out.data, b.data)

    def test_hand_arithmetic(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        assert np.array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradcheck(self):
        rng = np.random.default_rng(0)
        a = make_param(rng, (5, 4), "a")
        b = make_param(rng, (4, 3), "b")
        proj = rng.standard_normal((5, 3))
        fd_check(lambda: ad.sum_all(ad.mul_const(ad.matmul(a, b), proj)), [a, b])


class TestLeakyRelu:
    def test_values(self):
        out = ad.leaky_relu(Tensor([1.0, -1.0]), 0.1)
        assert np.allclose(out.data, [1.0, -0.1])

    def test_zero(self):
        assert ad.leaky_relu(Tensor([0.0]), 0.1).data[0] == 0.0

    def test_gradcheck_away_from_kink(self):
        rng = np.random.default_rng(1)
        x = Parameter(rng.standard_normal(20) + np.sign(rng.standard_normal(20)) * 0.5, "x")
        proj = rng.standard_normal(20)
        fd_check(lambda: ad.sum_all(ad.mul_const(ad.leaky_relu(x, 0.1), proj)), [x])


class TestGatherWeightedSum:
    def test_all_false_mask(self):
        f = Tensor(np.ones((4, 3)))
        w = Tensor(np.ones((4, 3)))
        out = ad.gather_weighted_sum(f, w, np.zeros(4, dtype=bool))
        assert np.array_equal(out.data, np.zeros(3))

    def test_unit_weights_full_mask(self):
        rng = np.random.default_rng(2)
        f = Tensor(rng.standard_normal((6, 3)))
        out = ad.gather_weighted_sum(f, Tensor(np.ones((6, 3))), np.ones(6, dtype=bool))
        assert np.allclose(out.data, f.data.sum(axis=0))

    @pytest.mark.parametrize("w_shape", [(5, 3), (5, 1)])
    def test_gradcheck_both_args(self, w_shape):
        rng = np.random.default_rng(3)
        f = make_param(rng, (5, 3), "f")
        w = make_param(rng, w_shape, "w")
        mask = np.array([True, False, True, True, False])
        proj = rng.standard_normal(3)
        fd_check(lambda: ad.sum_all(ad.mul_const(ad.gather_weighted_sum(f, w, mask), proj)), [f, w])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.gather_weighted_sum(Tensor(np.ones((4, 3))), Tensor(np.ones((4, 2))), np.ones(4, dtype=bool))


class TestL1Loss:
    def test_equal_inputs(self):
        x = Tensor(np.ones((3, 3)))
        assert ad.l1_loss(x, np.ones((3, 3))).data == 0.0

    def test_unit_errors(self):
        pred = Tensor(np.array([1.0, -1.0]))
        assert ad.l1_loss(pred, np.zeros(2)).data == 1.0

    def test_empty_mask_raises(self):
        with pytest.raises(ValueError):
            ad.l1_loss(Tensor(np.ones(3)), np.zeros(3), np.zeros(3, dtype=bool))

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        pred = Parameter(rng.standard_normal((4, 3)), "pred")
        target = pred.data + np.sign(rng.standard_normal((4, 3))) * 0.7
        mask = rng.random((4, 3)) > 0.3
        fd_check(lambda: ad.l1_loss(pred, target, mask), [pred])


class TestBackward:
    def test_sum_gradient(self):
        w = Parameter(np.array([1.0, 2.0, 3.0]), "w")
        backward(ad.sum_all(w))
        assert np.array_equal(w.grad, [1.0, 1.0, 1.0])

    def test_zero_scale(self):
        w = Parameter(np.array([1.0, 2.0]), "w")
        backward(ad.scale(ad.sum_all(w), 0.0))
        assert np.array_equal(w.grad, [0.0, 0.0])

    def test_double_backward_raises(self):
        w = Parameter(np.array([1.0]), "w")
        loss = ad.sum_all(w)
        backward(loss)
        with pytest.raises(RuntimeError):
            backward(loss)

    def test_non_scalar_raises(self):
        w = Parameter(np.ones(3), "w")
        with pytest.raises(ValueError):
            backward(ad.scale(w, 2.0))

    def test_fanout_accumulates(self):
        w = Parameter(np.array([2.0]), "w")
        out = ad.add(ad.scale(w, 3.0), ad.scale(w, 4.0))
        backward(ad.sum_all(out))
        assert np.allclose(w.grad, [7.0])

    def test_unreached_param_keeps_zero_grad(self):
        w = Parameter(np.ones(2), "w")
        other = Parameter(np.ones(2), "other")
        zero_grads([w, other])
        backward(ad.sum_all(w))
        assert np.array_equal(other.grad, np.zeros(2))

    def test_linearity(self):
        rng = np.random.default_rng(6)
        w = Parameter(rng.standard_normal((3, 3)), "w")
        pa = rng.standard_normal((3, 3))
        pb = rng.standard_normal((3, 3))

        def run(proj):
            zero_grads([w])
            backward(ad.sum_all(ad.mul_const(w, proj)))
            return w.grad.copy()

        assert np.allclose(run(pa) + run(pb), run(pa + pb), atol=1e-12)


class TestSegmentOps:
    def test_segment_sum_values(self):
        x = Tensor(np.arange(12.0).reshape(6, 2))
        starts = np.array([0, 2, 2, 6])
        out = ad.segment_sum(x, starts, 3)
        assert np.array_equal(out.data, [[2.0, 4.0], [0.0, 0.0], [28.0, 32.0]])

    def test_segment_sum_gradcheck(self):
        rng = np.random.default_rng(7)
        x = make_param(rng, (6, 2), "x")
        starts = np.array([0, 1, 4, 6])
        proj = rng.standard_normal((3, 2))
        fd_check(lambda: ad.sum_all(ad.mul_const(ad.segment_sum(x, starts, 3), proj)), [x])

    def test_gather_rows_gradcheck(self):
        rng = np.random.default_rng(8)
        x = make_param(rng, (4, 3), "x")
        idx = np.array([0, 2, 2, 3, 1, 2])
        proj = rng.standard_normal((6, 3))
        fd_check(lambda: ad.sum_all(ad.mul_const(ad.gather_rows(x, idx), proj)), [x])

    def test_pair_contract_gradcheck(self):
        rng = np.random.default_rng(9)
        f = make_param(rng, (5, 3), "f")
        w = make_param(rng, (5, 3, 2), "w")
        proj = rng.standard_normal((5, 2))
        fd_check(lambda: ad.sum_all(ad.mul_const(ad.pair_contract(f, w), proj)), [f, w])


class TestMisc:
    def test_dtype_mismatch_raises(self):
        with pytest.raises(ValueError):
            ad.add(Tensor(np.ones(2, dtype=np.float32)), Tensor(np.ones(2)))

    def test_finite_check_mode(self):
        ad.set_finite_checks(True)
        try:
            with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
                ad.scale(Tensor(np.array([1e308])), 1e308)
        finally:
            ad.set_finite_checks(False)

    def test_determinism(self):
        rng = np.random.default_rng(10)
        a_data = rng.standard_normal((8, 8))
        b_data = rng.standard_normal((8, 8))

        def run():
            a = Parameter(a_data.copy(), "a")
            loss = ad.mean_all(ad.leaky_relu(ad.matmul(a, Tensor(b_data)), 0.1))
            backward(loss)
            return loss.data.copy(), a.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2) and np.array_equal(g1, g2)

    def test_mul_broadcast_column(self):
        rng = np.random.default_rng(11)
        a = make_param(rng, (4, 3), "a")
        s = make_param(rng, (4, 1), "s")
        proj = rng.standard_normal((4, 3))
        fd_check(lambda: ad.sum_all(ad.mul_const(ad.mul(a, s), proj)), [a, s])

    def test_concat_and_reshape_gradcheck(self):
        rng = np.random.default_rng(12)
        a = make_param(rng, (2, 3), "a")
        b = make_param(rng, (2, 3), "b")
        proj = rng.standard_normal(12)

        def loss():
            cat = ad.concat([a, b], axis=0)
            return ad.sum_all(ad.mul_const(ad.reshape(cat, (12,)), proj))

        fd_check(loss, [a, b])
