import math

import numpy as np
import pytest

from minconv.tensor import (
    ContractError,
    DomainError,
    ShapeError,
    Tape,
    Tensor,
    constant,
    finite_diff_grad,
    map_unary,
    reduce,
    scale,
    zip_binary,
)

from conftest import assert_within, max_rel_err


class TestMapUnary:
    def test_sigmoid_center(self):
        assert map_unary(constant(0.0), "sigmoid").item() == 0.5

    def test_softplus_at_zero(self):
        assert math.isclose(map_unary(constant(0.0), "softplus").item(),
                            math.log(2.0), rel_tol=1e-12)

    def test_log_sigmoid_identity_f32(self):
        # -softplus(-x) == log(sigmoid(x)) pointwise, both sides evaluated
        rng = np.random.default_rng(0)
        x = constant(rng.uniform(-10, 10, 1000).astype(np.float32))
        lhs = map_unary(map_unary(map_unary(x, "negate"), "softplus"), "negate")
        rhs = map_unary(map_unary(x, "sigmoid"), "log")
        assert np.max(np.abs(lhs.data - rhs.data)) <= 1e-6

    def test_log_sigmoid_identity_wide_range(self):
        x = constant(np.linspace(-30, 30, 4001, dtype=np.float32))
        lhs = map_unary(map_unary(map_unary(x, "negate"), "softplus"), "negate")
        rhs = map_unary(map_unary(x, "sigmoid"), "log")
        assert np.max(np.abs(lhs.data - rhs.data)) <= 1e-6

    def test_softplus_bounds(self):
        x = np.linspace(-30.0, 30.0, 601)
        sp = map_unary(constant(x), "softplus").data
        assert np.all(sp >= np.maximum(x, 0.0))
        assert sp[-1] - 30.0 <= 1e-12  # softplus(x) - x -> 0 for large x

    def test_log_domain_error_names_flat_index(self):
        bad = constant(np.array([[1.0, 2.0], [-3.0, 4.0]]))
        with pytest.raises(DomainError, match="flat index 2"):
            map_unary(bad, "log")

    def test_unknown_op_rejected(self):
        with pytest.raises(ContractError):
            map_unary(constant(1.0), "relu")


class TestZipBinary:
    def test_mul_ones_identity(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((3, 4))
        out = zip_binary(constant(a), constant(np.ones_like(a)), "mul")
        np.testing.assert_array_equal(out.data, a)

    def test_add_inverse(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((5,))
        out = zip_binary(constant(a), constant(-a), "add")
        np.testing.assert_array_equal(out.data, np.zeros(5))

    def test_sum_matches_scalar_loop_bitwise(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((4, 6))
        b = rng.standard_normal((4, 6))
        out = zip_binary(constant(a), constant(b), "add").data
        loop = np.empty_like(a)
        for i in range(4):
            for j in range(6):
                loop[i, j] = a[i, j] + b[i, j]
        np.testing.assert_array_equal(out, loop)

    def test_singleton_broadcast(self):
        a = constant(np.ones((2, 3)))
        b = constant(np.array([[1.0, 2.0, 3.0]]))
        out = zip_binary(a, b, "add")
        np.testing.assert_array_equal(out.data, [[2, 3, 4], [2, 3, 4]])

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            zip_binary(constant(np.ones((2, 3))), constant(np.ones((3, 2))), "add")
        with pytest.raises(ShapeError):
            zip_binary(constant(np.ones((2, 3))), constant(np.ones(3)), "add")

    def test_div_by_zero_propagates_and_flags(self):
        out = zip_binary(constant(np.array([1.0, 2.0])),
                         constant(np.array([1.0, 0.0])), "div")
        assert np.isinf(out.data[1])
        assert out.nonfinite


class TestReduce:
    def test_mean_of_constant(self):
        out = reduce(constant(np.full((2, 3, 4), 2.5)), None, "mean")
        assert out.item() == 2.5

    def test_sum_of_zeros(self):
        out = reduce(constant(np.zeros((3, 5))), (1,), "sum")
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_empty_axes_returns_input(self):
        t = constant(np.arange(4.0))
        assert reduce(t, (), "sum") is t

    def test_mean_matches_kahan_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(2049)
        total = comp = 0.0
        for v in x:  # Kahan summation oracle
            y = v - comp
            s = total + y
            comp = (s - total) - y
            total = s
        got = reduce(constant(x), None, "mean").item()
        assert abs(got - total / x.size) / abs(total / x.size) <= 1e-12

    def test_max_reduce(self):
        x = np.array([[1.0, 7.0], [3.0, 2.0]])
        out = reduce(constant(x), (1,), "max")
        np.testing.assert_array_equal(out.data, [7.0, 3.0])

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            reduce(constant(np.ones((2, 2))), (5,), "sum")


class TestBackward:
    def test_sum_gradient_is_ones(self):
        tape = Tape()
        p = tape.param(np.arange(6.0).reshape(2, 3))
        grads = tape.backward(reduce(p, None, "sum"))
        np.testing.assert_array_equal(grads[p.node].data, np.ones((2, 3)))

    def test_quadratic_gradient(self):
        tape = Tape()
        p = tape.param(np.array([1.0, 2.0]))
        loss = reduce(zip_binary(p, p, "mul"), None, "sum")
        np.testing.assert_allclose(tape.backward(loss)[p.node].data, [2.0, 4.0])

    def test_three_op_composite_vs_finite_differences(self):
        rng = np.random.default_rng(5)
        p0 = rng.standard_normal((3, 3))

        def run(params, tape=None):
            tape = tape or Tape()
            q = tape.param(params["p"])
            out = reduce(zip_binary(map_unary(q, "tanh"), q, "mul"), None, "mean")
            return out, q, tape

        fd = finite_diff_grad(lambda ps: run(ps)[0].item(), {"p": p0})
        out, q, tape = run({"p": p0})
        ad = tape.backward(out)[q.node].data
        assert max_rel_err(ad, fd["p"], floor=1e-7) <= 1e-7

    @pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-6), (np.float32, 1e-3)])
    def test_composites_per_op_match_fd(self, dtype, tol):
        rng = np.random.default_rng(6)
        p0 = (rng.standard_normal((2, 3)) * 0.5 + 1.5).astype(dtype)

        builders = {
            "sigmoid": lambda q: map_unary(q, "sigmoid"),
            "tanh": lambda q: map_unary(q, "tanh"),
            "softplus": lambda q: map_unary(q, "softplus"),
            "exp": lambda q: map_unary(q, "exp"),
            "log": lambda q: map_unary(q, "log"),
            "negate": lambda q: map_unary(q, "negate"),
            "div": lambda q: zip_binary(constant(np.ones(p0.shape, dtype)), q, "div"),
            "sub": lambda q: zip_binary(q, constant(np.full(p0.shape, 0.5, dtype)), "sub"),
            "max": lambda q: reduce(q, (0,), "max"),
            "scale": lambda q: scale(q, 1.75),
        }
        for name, build in builders.items():
            def make_loss(q):
                out = build(q)
                return reduce(zip_binary(out, out, "mul"), None, "sum")

            def f(params):
                tape = Tape()
                return make_loss(tape.param(params["p"])).item()

            fd = finite_diff_grad(f, {"p": p0.astype(np.float64)}, eps=1e-5)
            tape = Tape()
            q = tape.param(p0)
            ad = tape.backward(make_loss(q))[q.node].data
            assert_within(ad, fd["p"], rtol=tol, atol=tol, label=name)

    def test_unreachable_leaf_gets_zeros(self):
        tape = Tape()
        p = tape.param(np.ones(3))
        q = tape.param(np.ones(4))
        grads = tape.backward(reduce(p, None, "sum"))
        np.testing.assert_array_equal(grads[q.node].data, np.zeros(4))

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        p = tape.param(np.ones(3))
        with pytest.raises(ContractError):
            tape.backward(p)

    def test_backward_replay_is_bit_identical(self):
        rng = np.random.default_rng(7)
        tape = Tape()
        p = tape.param(rng.standard_normal((4, 4)))
        loss = reduce(zip_binary(map_unary(p, "sigmoid"), p, "mul"), None, "mean")
        g1 = tape.backward(loss)[p.node].data
        g2 = tape.backward(loss)[p.node].data
        np.testing.assert_array_equal(g1, g2)

    def test_mixed_tape_rejected(self):
        t1, t2 = Tape(), Tape()
        a = t1.param(np.ones(2))
        b = t2.param(np.ones(2))
        with pytest.raises(ContractError):
            zip_binary(a, b, "add")


class TestFiniteDiff:
    def test_constant_function_zero_gradient(self):
        fd = finite_diff_grad(lambda ps: 7.0, {"p": np.ones(4)})
        np.testing.assert_array_equal(fd["p"], np.zeros(4))

    def test_square_at_three(self):
        fd = finite_diff_grad(lambda ps: float(ps["p"][0] ** 2),
                              {"p": np.array([3.0])}, eps=1e-4)
        assert abs(fd["p"][0] - 6.0) <= 1e-7

    def test_bad_eps(self):
        with pytest.raises(ContractError):
            finite_diff_grad(lambda ps: 0.0, {"p": np.ones(1)}, eps=0.0)


class TestTensorBasics:
    def test_order_limit(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1, 1)))

    def test_dtype_coercion(self):
        t = Tensor(np.arange(3, dtype=np.int64))
        assert t.dtype == np.float64

    def test_operator_sugar(self):
        a = constant(np.array([2.0]))
        b = constant(np.array([3.0]))
        assert (a + b).item() == 5.0
        assert (a - b).item() == -1.0
        assert (a * b).item() == 6.0
        assert (a / b).item() == pytest.approx(2 / 3)
        assert (-a).item() == -2.0
