"""Gradient and forward checks for the tensor substrate.

Every primitive is compared against central finite differences in 64-bit
mode on randomized shapes; a handful of closed-form forward cases pin the
basic semantics.
"""

import numpy as np
import pytest

from studymae import autodiff as ad
from studymae import nn
from studymae.autodiff import Parameter, Tensor, grad_check
from studymae.errors import NumericalError, ShapeError


def rand_param(rng, shape, scale=1.0):
    return Parameter(rng.normal(0.0, scale, size=shape))


class TestForwardSemantics:
    def test_softmax_uniform(self):
        x = Tensor(np.zeros(10))
        y = ad.softmax(x)
        np.testing.assert_allclose(y.data, 0.1, atol=1e-7)

    def test_layernorm_constant_vector(self):
        x = Tensor(np.full((3, 8), 2.5))
        y = ad.layer_norm(x)
        np.testing.assert_allclose(y.data, 0.0, atol=1e-7)

    def test_gather_identity_table(self):
        table = Tensor(np.eye(5))
        rows = ad.take(table, np.array([3, 0, 3]))
        expected = np.eye(5)[[3, 0, 3]]
        np.testing.assert_array_equal(rows.data, expected)

    def test_shape_mismatch_names_both_shapes(self):
        a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.add(a, b)

    def test_sigmoid_extremes_stable(self):
        x = Tensor(np.array([-500.0, 0.0, 500.0]))
        y = ad.sigmoid(x)
        assert np.isfinite(y.data).all()
        np.testing.assert_allclose(y.data[1], 0.5)


class TestBackwardBasics:
    def test_square_at_three(self):
        w = Parameter(np.array(3.0), dtype=np.float64)
        report = grad_check(lambda: (w * w).sum(), {"w": w}, epsilon=1e-3,
                            tolerance=1e-6)
        assert report.passed, report.max_rel_error
        (w * w).sum().backward()

    def test_constant_function_zero_grad(self):
        w = Parameter(np.ones(4), dtype=np.float64)
        out = (Tensor(np.ones(4)) * 2.0).sum() + w.sum() * 0.0
        out.backward()
        np.testing.assert_array_equal(w.grad, np.zeros(4))

    def test_grad_accumulates_across_uses(self):
        w = Parameter(np.array([2.0]), dtype=np.float64)
        out = (w * 3.0).sum() + (w * 5.0).sum()
        out.backward()
        np.testing.assert_allclose(w.grad, [8.0])

    def test_masked_selection_routes_zero_elsewhere(self):
        w = Parameter(np.arange(12, dtype=np.float64).reshape(6, 2))
        out = ad.take(w, np.array([1, 4])).sum()
        out.backward()
        expected = np.zeros((6, 2))
        expected[[1, 4]] = 1.0
        np.testing.assert_array_equal(w.grad, expected)

    def test_repeated_indices_accumulate(self):
        w = Parameter(np.ones((3, 2)), dtype=np.float64)
        out = ad.take(w, np.array([0, 0, 2])).sum()
        out.backward()
        np.testing.assert_array_equal(w.grad[0], [2.0, 2.0])
        np.testing.assert_array_equal(w.grad[1], [0.0, 0.0])

    def test_reduction_deterministic(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=4096).astype(np.float32)
        sums = {Tensor(x).sum().item() for _ in range(5)}
        assert len(sums) == 1


PRIMITIVES = [
    ("matmul", lambda rng: _matmul_case(rng)),
    ("matmul_batched", lambda rng: _matmul_batched_case(rng)),
    ("add_broadcast", lambda rng: _binary_case(rng, ad.add, (3, 1, 5), (4, 5))),
    ("mul_broadcast", lambda rng: _binary_case(rng, ad.mul, (2, 4), (4,))),
    ("reshape", lambda rng: _unary_case(rng, lambda t: ad.reshape(t, (6, 2)), (3, 4))),
    ("transpose", lambda rng: _unary_case(rng, lambda t: ad.transpose(t, (2, 0, 1)), (2, 3, 4))),
    ("gather", lambda rng: _gather_case(rng)),
    ("getitem_fancy", lambda rng: _getitem_case(rng)),
    ("softmax", lambda rng: _unary_case(rng, lambda t: ad.softmax(t, axis=-1), (3, 7))),
    ("log_softmax", lambda rng: _unary_case(rng, lambda t: ad.log_softmax(t, axis=-1), (4, 6))),
    ("layer_norm", lambda rng: _unary_case(rng, ad.layer_norm, (5, 9))),
    ("gelu", lambda rng: _unary_case(rng, ad.gelu, (4, 4))),
    ("sigmoid", lambda rng: _unary_case(rng, ad.sigmoid, (6,))),
    ("exp", lambda rng: _unary_case(rng, ad.exp, (3, 3))),
    ("log", lambda rng: _log_case(rng)),
    ("mean_axis", lambda rng: _unary_case(rng, lambda t: ad.tmean(t, axis=1), (3, 5, 2))),
    ("sum_keepdims", lambda rng: _unary_case(rng, lambda t: ad.tsum(t, axis=(0, 2), keepdims=True), (2, 3, 4))),
    ("concat", lambda rng: _concat_case(rng)),
    ("stack", lambda rng: _stack_case(rng)),
    ("bce_with_logits", lambda rng: _bce_case(rng)),
    ("power", lambda rng: _unary_case(rng, lambda t: ad.power(t, 3.0), (4, 2))),
    ("four_dim_chain", lambda rng: _four_dim_case(rng)),
]


def _unary_case(rng, op, shape):
    p = rand_param(rng, shape)
    return {"x": p}, lambda: op(p).sum()


def _binary_case(rng, op, sa, sb):
    a, b = rand_param(rng, sa), rand_param(rng, sb)
    return {"a": a, "b": b}, lambda: op(a, b).sum()


def _matmul_case(rng):
    a, b = rand_param(rng, (3, 4)), rand_param(rng, (4, 5))
    return {"a": a, "b": b}, lambda: (a @ b).sum()


def _matmul_batched_case(rng):
    a, b = rand_param(rng, (2, 3, 4)), rand_param(rng, (2, 4, 3))
    return {"a": a, "b": b}, lambda: (a @ b).sum()


def _gather_case(rng):
    p = rand_param(rng, (6, 3))
    idx = np.array([5, 1, 1, 0])
    return {"table": p}, lambda: (ad.take(p, idx) * 2.0).sum()


def _getitem_case(rng):
    p = rand_param(rng, (5, 4))
    rows, cols = np.array([0, 2, 2]), np.array([1, 3, 3])
    return {"x": p}, lambda: p[(rows, cols)].sum()


def _log_case(rng):
    p = Parameter(rng.uniform(0.5, 2.0, size=(3, 3)))
    return {"x": p}, lambda: ad.log(p).sum()


def _concat_case(rng):
    a, b = rand_param(rng, (2, 3)), rand_param(rng, (4, 3))
    return {"a": a, "b": b}, lambda: (ad.concat([a, b], axis=0) ** 2.0).sum()


def _stack_case(rng):
    a, b = rand_param(rng, (3, 2)), rand_param(rng, (3, 2))
    return {"a": a, "b": b}, lambda: ad.stack([a, b], axis=1).mean()


def _bce_case(rng):
    p = rand_param(rng, (8,), scale=2.0)
    y = (rng.random(8) > 0.5).astype(np.float64)
    return {"logits": p}, lambda: ad.bce_with_logits(p, y).mean()


def _four_dim_case(rng):
    p = rand_param(rng, (2, 3, 2, 4))
    return {"x": p}, lambda: ad.gelu(ad.layer_norm(p)).mean(axis=(0, 2)).sum()


class TestGradCheckEveryPrimitive:
    @pytest.mark.parametrize("name,builder", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
    def test_primitive(self, name, builder):
        with ad.use_dtype(np.float64):
            rng = np.random.default_rng(hash(name) % 2**32)
            params, f = builder(rng)
            report = grad_check(f, params, epsilon=1e-5, tolerance=1e-3)
        assert report.passed, f"{name}: worst {report.worst} rel {report.max_rel_error:.3e}"


class TestGradCheckHarness:
    def test_two_layer_perceptron_mse(self):
        """64-parameter MLP against finite differences at eps=1e-4."""
        with ad.use_dtype(np.float64):
            rng = np.random.default_rng(11)
            w1 = rand_param(rng, (4, 8), scale=0.5)   # 32
            b1 = rand_param(rng, (8,), scale=0.1)     # 8
            w2 = rand_param(rng, (8, 2), scale=0.5)   # 16
            b2 = rand_param(rng, (2,), scale=0.1)     # 8 -> 64 total minus slack
            x = Tensor(rng.normal(size=(6, 4)))
            y = rng.normal(size=(6, 2))

            def f():
                h = ad.gelu(x @ w1 + b1)
                pred = h @ w2 + b2
                return ((pred - Tensor(y)) ** 2.0).mean()

            report = grad_check(f, {"w1": w1, "b1": b1, "w2": w2, "b2": b2},
                                epsilon=1e-4, tolerance=1e-3)
        assert report.passed, report.max_rel_error

    def test_nonfinite_function_raises(self):
        w = Parameter(np.array([0.0]), dtype=np.float64)
        with pytest.raises(NumericalError):
            grad_check(lambda: ad.log(w).sum(), {"w": w})

    def test_report_carries_worst_component(self):
        w = Parameter(np.array([1.0, 2.0]), dtype=np.float64)
        report = grad_check(lambda: (w ** 2.0).sum(), {"w": w}, epsilon=1e-4)
        assert report.passed
        assert "w" in report.per_param


class TestTransformerLayers:
    def test_encoder_block_grad(self):
        with ad.use_dtype(np.float64):
            rng = np.random.default_rng(3)
            block = nn.EncoderBlock(dim=8, heads=2, rng=rng)
            x = Tensor(rng.normal(size=(5, 8)))
            params = block.parameters("blk")
            report = grad_check(lambda: block(x).sum(), params,
                                epsilon=1e-5, tolerance=1e-3, max_components=6)
        assert report.passed, f"{report.worst}: {report.max_rel_error:.3e}"

    def test_decoder_block_grad(self):
        with ad.use_dtype(np.float64):
            rng = np.random.default_rng(4)
            block = nn.DecoderBlock(dim=8, memory_dim=6, heads=2, rng=rng)
            x = Tensor(rng.normal(size=(4, 8)))
            mem = Tensor(rng.normal(size=(3, 6)))
            bias = nn.causal_bias(4)
            params = block.parameters("blk")
            report = grad_check(lambda: block(x, mem, bias).sum(), params,
                                epsilon=1e-5, tolerance=1e-3, max_components=6)
        assert report.passed, f"{report.worst}: {report.max_rel_error:.3e}"

    def test_duplicate_parameter_names_rejected(self):
        rng = np.random.default_rng(0)
        lin = nn.Linear(2, 2, rng)
        with pytest.raises(Exception, match="duplicate"):
            nn.merge_params(lin.parameters("a"), lin.parameters("a"))

    def test_trunc_normal_bounded(self):
        rng = np.random.default_rng(0)
        w = nn.trunc_normal(rng, (1000,), std=0.02)
        assert np.abs(w).max() <= 0.04 + 1e-12

    def test_sincos_tables_deterministic(self):
        np.testing.assert_array_equal(nn.sincos_2d(4, 16), nn.sincos_2d(4, 16))
        assert nn.sincos_1d(10, 8).shape == (10, 8)
