import numpy as np
import pytest

import aim.numcore as nc
from aim.numcore import (ContractError, DegenerateRowError, ShapeError, Tensor,
                         backward, grad_check)


def _param(rng, *shape, name):
    return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)


class TestTensorBasics:
    def test_rejects_nonfinite(self):
        with pytest.raises(ContractError):
            Tensor([1.0, np.nan])
        with pytest.raises(ContractError):
            Tensor([np.inf])

    def test_item_scalar_only(self):
        assert Tensor(3.5).item() == 3.5
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0]).item()

    def test_float64_coercion(self):
        t = Tensor(np.array([1, 2], dtype=np.int32))
        assert t.data.dtype == np.float64


class TestForwardOracles:
    """Forward values checked against plain numpy computed in the test."""

    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def test_add_mul_matmul(self):
        a = self.rng.standard_normal((3, 4))
        b = self.rng.standard_normal((3, 4))
        w = self.rng.standard_normal((4, 2))
        assert np.array_equal(nc.add(Tensor(a), Tensor(b)).data, a + b)
        assert np.array_equal(nc.mul(Tensor(a), Tensor(b)).data, a * b)
        assert np.array_equal(nc.matmul(Tensor(a), Tensor(w)).data, a @ w)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            nc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        with pytest.raises(ShapeError):
            nc.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))

    def test_reductions(self):
        a = self.rng.standard_normal((5, 3))
        assert nc.sum_all(Tensor(a)).item() == pytest.approx(a.sum(), rel=1e-14)
        assert nc.mean_all(Tensor(a)).item() == pytest.approx(a.mean(), rel=1e-14)

    def test_elementwise(self):
        a = self.rng.standard_normal((2, 6))
        assert np.allclose(nc.tanh(Tensor(a)).data, np.tanh(a), atol=0)
        assert np.allclose(nc.exp(Tensor(a)).data, np.exp(a), atol=0)
        assert np.allclose(nc.log(Tensor(np.abs(a) + 1)).data,
                           np.log(np.abs(a) + 1), atol=0)

    def test_slice_concat_roundtrip(self):
        a = self.rng.standard_normal((6, 3))
        parts = [nc.slice_rows(Tensor(a), i, i + 2) for i in (0, 2, 4)]
        assert np.array_equal(nc.concat_rows(parts).data, a)


class TestSoftmaxMasked:
    def test_masked_entries_exactly_zero(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((4, 6))
        mask = rng.random((4, 6)) > 0.4
        mask[:, 0] = True
        out = nc.softmax_masked(Tensor(logits), mask).data
        assert np.all(out[~mask] == 0.0)
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-14)

    def test_matches_dense_softmax_when_unmasked(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((3, 5))
        ours = nc.softmax_masked(Tensor(z), np.ones((3, 5), dtype=bool)).data
        ref = np.exp(z - z.max(-1, keepdims=True))
        ref /= ref.sum(-1, keepdims=True)
        assert np.allclose(ours, ref, atol=1e-15)

    def test_stable_under_large_logits(self):
        z = np.array([[1e4, 1e4 - 1.0, -1e4]])
        out = nc.softmax_masked(Tensor(z), np.array([[True, True, False]])).data
        assert np.isfinite(out).all()
        assert out[0, 2] == 0.0

    def test_degenerate_row_raises(self):
        with pytest.raises(DegenerateRowError):
            nc.softmax_masked(Tensor(np.zeros((2, 3))),
                              np.array([[True, False, True],
                                        [False, False, False]]))

    def test_mask_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nc.softmax_masked(Tensor(np.zeros((2, 3))), np.ones((3, 2), dtype=bool))


class TestBackward:
    def test_gradcheck_core_ops(self):
        rng = np.random.default_rng(3)
        a = _param(rng, 4, 3, name="a")
        b = _param(rng, 3, 5, name="b")
        c = _param(rng, 4, 5, name="c")
        g = _param(rng, 5, name="g")
        bi = _param(rng, 5, name="bi")
        params = {"a": a, "b": b, "c": c, "g": g, "bi": bi}
        mask = np.ones((4, 5), dtype=bool)
        mask[0, 1] = False

        def f():
            h = nc.add(nc.matmul(a, b), c)
            h = nc.layer_norm(nc.tanh(h), g, bi)
            h = nc.softmax_masked(h, mask)
            return nc.mean_all(nc.mul(h, h))

        report = grad_check(f, params, rng=rng)
        assert max(report.values()) < 1e-6, report

    def test_gradcheck_broadcast_and_shape_ops(self):
        rng = np.random.default_rng(4)
        a = _param(rng, 4, 6, name="a")
        row = _param(rng, 1, 6, name="row")
        params = {"a": a, "row": row}

        def f():
            h = nc.add(a, row)                      # broadcast add
            h = nc.reshape(nc.transpose(h), (4, 6))
            h = nc.concat_rows([nc.slice_rows(h, 0, 2), nc.slice_rows(h, 2, 4)])
            return nc.sum_all(nc.exp(nc.scale(h, 0.3)))

        report = grad_check(f, params, rng=rng)
        assert max(report.values()) < 1e-6, report

    def test_offpath_param_gets_exact_zero(self):
        rng = np.random.default_rng(5)
        a = _param(rng, 2, 2, name="a")
        unused = _param(rng, 3, name="unused")
        grads = backward(nc.sum_all(a), {"a": a, "unused": unused})
        assert np.array_equal(grads["unused"].data, np.zeros(3))
        assert np.array_equal(grads["a"].data, np.ones((2, 2)))

    def test_repeated_use_accumulates(self):
        a = Tensor([2.0], requires_grad=True, name="a")
        loss = nc.sum_all(nc.mul(a, a))  # d/da a^2 = 2a
        assert backward(loss, {"a": a})["a"].data[0] == pytest.approx(4.0)

    def test_scalar_loss_required(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True, name="a")
        with pytest.raises(ContractError):
            backward(nc.add(a, a))

    def test_no_grad_blocks_recording(self):
        a = Tensor(np.ones(3), requires_grad=True, name="a")
        with nc.no_grad():
            out = nc.sum_all(nc.mul(a, a))
        assert not out.requires_grad
        assert out._bwd is None

    def test_graph_released_after_backward(self):
        a = Tensor(np.ones(2), requires_grad=True, name="a")
        loss = nc.sum_all(nc.tanh(a))
        mid = loss._parents[0]
        backward(loss, {"a": a})
        assert loss._bwd is None and mid._bwd is None
