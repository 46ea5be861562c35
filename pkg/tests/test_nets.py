import numpy as np
import pytest

from diffpol.nets import (
    MlpNet,
    MlpSpec,
    ParamVector,
    ShapeError,
    TimeEmbedding,
    init_mlp_params,
    layout_size,
    load_params,
    mlp_backward,
    mlp_forward,
    mlp_layout,
    save_params,
    time_embed,
)

from conftest import finite_diff, max_rel_err


def params_from_arrays(spec, arrays):
    layout = mlp_layout(spec)
    flat = np.concatenate([np.asarray(arrays[name], dtype=float).ravel() for name, _ in layout])
    return ParamVector(flat, layout)


class TestParamVector:
    def test_length_must_match_layout(self):
        with pytest.raises(ShapeError):
            ParamVector(np.zeros(3), (("w", (2, 2)),))

    def test_addable_with_equal_layout(self):
        layout = (("w", (2,)), ("b", (1,)))
        a = ParamVector(np.array([1.0, 2.0, 3.0]), layout)
        b = ParamVector(np.array([0.5, 0.5, 0.5]), layout)
        assert np.array_equal((a + b).values, [1.5, 2.5, 3.5])

    def test_layout_mismatch_rejected(self):
        a = ParamVector(np.zeros(2), (("w", (2,)),))
        b = ParamVector(np.zeros(2), (("x", (2,)),))
        with pytest.raises(ShapeError):
            a + b

    def test_values_read_only(self):
        a = ParamVector(np.zeros(2), (("w", (2,)),))
        with pytest.raises(ValueError):
            a.values[0] = 1.0

    def test_view_shapes(self):
        spec = MlpSpec(3, (4,), 2)
        p = init_mlp_params(spec, 0)
        assert p.view("w0").shape == (4, 3)
        assert p.view("b1").shape == (2,)
        assert p.size == layout_size(mlp_layout(spec))

    def test_serialization_round_trip(self, tmp_path):
        spec = MlpSpec(3, (4,), 2, "mish")
        p = init_mlp_params(spec, 7)
        save_params(tmp_path / "ck.bin", p, extra={"note": 1})
        q, extra = load_params(tmp_path / "ck.bin")
        assert q.layout == p.layout
        assert np.array_equal(q.values, p.values)
        assert extra == {"note": 1}


class TestForward:
    def test_identity_linear_model(self):
        spec = MlpSpec(3, (), 3)
        p = params_from_arrays(spec, {"w0": np.eye(3), "b0": np.zeros(3)})
        x = np.array([0.3, -1.2, 4.0])
        assert np.array_equal(mlp_forward(p, spec, x), x)

    def test_all_zero_params_give_zero_output(self):
        spec = MlpSpec(4, (5, 5), 2, "tanh")
        p = ParamVector.zeros(mlp_layout(spec))
        out = mlp_forward(p, spec, np.ones(4))
        assert np.array_equal(out, np.zeros(2))

    def test_against_straight_line_reimplementation(self):
        # same arithmetic written out with no loops or helpers
        spec = MlpSpec(2, (3,), 1, "tanh")
        p = init_mlp_params(spec, 42)
        x = np.array([0.5, -0.5])
        w0, b0 = p.view("w0"), p.view("b0")
        w1, b1 = p.view("w1"), p.view("b1")
        expected = w1 @ np.tanh(w0 @ x + b0) + b1
        assert np.allclose(mlp_forward(p, spec, x), expected, rtol=0, atol=1e-15)

    def test_dimension_mismatch_rejected(self):
        spec = MlpSpec(3, (4,), 2)
        p = init_mlp_params(spec, 0)
        with pytest.raises(ShapeError):
            mlp_forward(p, spec, np.zeros(5))
        other = init_mlp_params(MlpSpec(3, (5,), 2), 0)
        with pytest.raises(ShapeError):
            mlp_forward(other, spec, np.zeros(3))

    def test_batch_matches_per_row(self, rng):
        # rows agree with single calls up to BLAS kernel rounding
        spec = MlpSpec(3, (6,), 2, "mish")
        p = init_mlp_params(spec, 3)
        X = rng.standard_normal((5, 3))
        batch = mlp_forward(p, spec, X)
        for i in range(5):
            assert np.allclose(batch[i], mlp_forward(p, spec, X[i]), rtol=1e-13, atol=0)

    def test_forward_deterministic(self, rng):
        spec = MlpSpec(4, (8,), 3, "mish")
        p = init_mlp_params(spec, 5)
        x = rng.standard_normal(4)
        a = mlp_forward(p, spec, x)
        b = mlp_forward(p, spec, x)
        assert np.array_equal(a, b)


class TestBackward:
    def test_linear_model_closed_form(self, rng):
        spec = MlpSpec(3, (), 2)
        p = init_mlp_params(spec, 1)
        x = rng.standard_normal(3)
        u = rng.standard_normal(2)
        grad, grad_x = mlp_backward(p, spec, x, u)
        assert np.allclose(grad.view("w0"), np.outer(u, x), atol=1e-15)
        assert np.allclose(grad.view("b0"), u, atol=1e-15)
        assert np.allclose(grad_x, p.view("w0").T @ u, atol=1e-15)

    def test_zero_upstream_gives_zero_grads(self, rng):
        spec = MlpSpec(3, (4,), 2, "mish")
        p = init_mlp_params(spec, 2)
        grad, grad_x = mlp_backward(p, spec, rng.standard_normal(3), np.zeros(2))
        assert np.array_equal(grad.values, np.zeros(grad.size))
        assert np.array_equal(grad_x, np.zeros(3))

    @pytest.mark.parametrize("activation", ["tanh", "mish"])
    def test_matches_finite_differences(self, activation, rng):
        spec = MlpSpec(3, (5, 4), 2, activation)
        p = init_mlp_params(spec, 11)
        x = rng.standard_normal(3)
        u = rng.standard_normal(2)
        grad, grad_x = mlp_backward(p, spec, x, u)

        fd_p = finite_diff(lambda v: u @ mlp_forward(p.with_values(v), spec, x), p.values)
        assert max_rel_err(grad.values, fd_p) < 1e-5
        fd_x = finite_diff(lambda v: u @ mlp_forward(p, spec, v), x)
        assert max_rel_err(grad_x, fd_x) < 1e-5

    def test_hundred_random_gradient_checks(self):
        # exactness sweep over random (spec, params, input) triples
        rng = np.random.default_rng(99)
        worst = 0.0
        for k in range(100):
            act = ("tanh", "mish")[k % 2]
            dims = rng.integers(1, 5, size=3)
            spec = MlpSpec(int(dims[0]), (int(dims[1]),), int(dims[2]), act)
            p = init_mlp_params(spec, int(rng.integers(0, 10000)))
            x = rng.standard_normal(spec.input_dim)
            u = rng.standard_normal(spec.output_dim)
            grad, _ = mlp_backward(p, spec, x, u)
            fd = finite_diff(lambda v: u @ mlp_forward(p.with_values(v), spec, x), p.values)
            worst = max(worst, max_rel_err(grad.values, fd))
        assert worst < 1e-5

    def test_linear_in_upstream(self, rng):
        spec = MlpSpec(4, (6,), 3, "tanh")
        p = init_mlp_params(spec, 8)
        x = rng.standard_normal(4)
        u1 = rng.standard_normal(3)
        u2 = rng.standard_normal(3)
        g1, gx1 = mlp_backward(p, spec, x, u1)
        g2, gx2 = mlp_backward(p, spec, x, u2)
        g12, gx12 = mlp_backward(p, spec, x, u1 + u2)
        assert np.allclose(g12.values, g1.values + g2.values, rtol=0, atol=1e-12)
        assert np.allclose(gx12, gx1 + gx2, rtol=0, atol=1e-12)

    def test_batch_grads_sum_rows(self, rng):
        spec = MlpSpec(3, (4,), 2, "mish")
        p = init_mlp_params(spec, 4)
        X = rng.standard_normal((6, 3))
        U = rng.standard_normal((6, 2))
        g_batch, gx_batch = mlp_backward(p, spec, X, U)
        total = p.zeros_like()
        for i in range(6):
            g_i, gx_i = mlp_backward(p, spec, X[i], U[i])
            total = total + g_i
            assert np.allclose(gx_batch[i], gx_i, atol=1e-14)
        assert np.allclose(g_batch.values, total.values, atol=1e-12)

    def test_shape_mismatch_rejected(self, rng):
        spec = MlpSpec(3, (4,), 2)
        p = init_mlp_params(spec, 0)
        with pytest.raises(ShapeError):
            mlp_backward(p, spec, np.zeros(3), np.zeros(3))


class TestTimeEmbedding:
    def test_t_zero(self):
        emb = TimeEmbedding(8)
        out = time_embed(0, emb)
        assert np.array_equal(out[:4], np.zeros(4))
        assert np.array_equal(out[4:], np.ones(4))

    def test_deterministic(self):
        emb = TimeEmbedding(6)
        assert np.array_equal(time_embed(13, emb), time_embed(13, emb))

    def test_direct_formula_dim4(self):
        out = time_embed(1, TimeEmbedding(4, max_period=10000.0))
        expected = np.array([np.sin(1.0), np.sin(0.01), np.cos(1.0), np.cos(0.01)])
        assert np.allclose(out, expected, rtol=0, atol=1e-15)

    def test_odd_dim_rejected(self):
        with pytest.raises(ShapeError):
            TimeEmbedding(5)

    def test_range_bounded(self):
        emb = TimeEmbedding(16)
        for t in range(0, 50, 7):
            out = time_embed(t, emb)
            assert np.all(out >= -1.0) and np.all(out <= 1.0)

    def test_array_input(self):
        emb = TimeEmbedding(4)
        out = time_embed(np.array([0, 1, 2]), emb)
        assert out.shape == (3, 4)
        assert np.array_equal(out[1], time_embed(1, emb))


def test_mlpnet_bundle(rng):
    net = MlpNet(MlpSpec(2, (3,), 1), init_mlp_params(MlpSpec(2, (3,), 1), 0))
    x = rng.standard_normal(2)
    assert np.array_equal(net.forward(x), mlp_forward(net.params, net.spec, x))
