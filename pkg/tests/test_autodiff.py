"""Tests for the reverse-mode tensor engine.

Hand-computed reference values are frozen inline; gradient correctness is
checked against central finite differences via the engine's own checker
and, for the checker itself, against a deliberately corrupted backward.
"""

import math

import numpy as np
import pytest

from pvpl.autodiff import (
    DegenerateVectorError,
    ParameterError,
    ShapeError,
    Tensor,
    concat_rows,
    cosine_similarity,
    cross_entropy,
    gather,
    grad_check,
    l2_normalize,
    matmul,
    relu,
    sgd_step,
    softmax,
    tmean,
    transpose,
    tsum,
)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal((a @ b).data, b.data)

    def test_row_times_column(self):
        out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
        np.testing.assert_allclose(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        b_fixed = rng.normal(size=(5, 3))

        def f(a):
            return tsum(a @ Tensor(b_fixed, dtype=np.float64) * 0.5)

        res = grad_check(f, rng.normal(size=(4, 5)), step=1e-3, tol=1e-4)
        assert res.passed, res.max_rel_err

    def test_backward_formula(self):
        a = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        b = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4), requires_grad=True)
        tsum(a @ b).backward()
        g = np.ones((2, 4), dtype=np.float32)
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_all_positive_is_identity(self):
        x = np.array([0.5, 1.0, 3.0], dtype=np.float32)
        np.testing.assert_array_equal(relu(Tensor(x)).data, x)

    def test_gate_gradient(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        tsum(relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_closed_form(self):
        e = math.e
        np.testing.assert_allclose(
            softmax(Tensor([1.0, 0.0])).data, [e / (e + 1), 1 / (e + 1)], atol=1e-6
        )

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        y = softmax(Tensor(rng.normal(size=(8, 5)) * 10), temperature=0.5)
        np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(8), atol=1e-6)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 6)).astype(np.float32)
        base = softmax(Tensor(x)).data
        shifted = softmax(Tensor(x + 123.0)).data
        np.testing.assert_allclose(shifted, base, atol=1e-6)

    def test_saturated_logits_stable(self):
        y = softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y, [1.0, 0.0], atol=1e-6)

    def test_bad_temperature(self):
        with pytest.raises(ParameterError):
            softmax(Tensor([1.0, 2.0]), temperature=0.0)


class TestCosineSimilarity:
    def test_self_similarity(self):
        a = Tensor([0.3, -2.0, 1.1])
        assert cosine_similarity(a, a).item() == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal(self):
        assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == pytest.approx(0.0, abs=1e-7)

    def test_closed_form(self):
        got = cosine_similarity(Tensor([1.0, 1.0]), Tensor([1.0, 0.0])).item()
        assert got == pytest.approx(1 / math.sqrt(2), abs=1e-6)

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
        assert cosine_similarity(a, b).item() == pytest.approx(cosine_similarity(b, a).item(), abs=1e-7)

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateVectorError):
            cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


class TestCrossEntropy:
    def test_saturated_no_overflow(self):
        assert cross_entropy(Tensor([1000.0, 0.0]), 0).item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform(self):
        assert cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_closed_form(self):
        expected = math.log(1 + math.exp(-1))
        assert cross_entropy(Tensor([1.0, 0.0]), 0).item() == pytest.approx(expected, abs=1e-6)

    def test_index_out_of_range(self):
        with pytest.raises(ParameterError):
            cross_entropy(Tensor([1.0, 0.0]), 2)


class TestSgdStep:
    def test_single_step(self):
        p = Tensor([1.0], requires_grad=True)
        sgd_step([p], [np.array([2.0], dtype=np.float32)], lr=0.5)
        np.testing.assert_allclose(p.data, [0.0])

    def test_zero_lr_is_noop(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        before = p.data.copy()
        sgd_step([p], [np.ones(2, dtype=np.float32)], lr=0.0)
        np.testing.assert_array_equal(p.data, before)

    def test_two_steps_on_square(self):
        # p <- p - 0.1 * 2p from p=1 gives 0.8, then 0.64
        p = Tensor([1.0], requires_grad=True)
        for expected in (0.8, 0.64):
            loss = tsum(p * p)
            loss.backward()
            sgd_step([p], [p.grad], lr=0.1)
            p.grad = None
            np.testing.assert_allclose(p.data, [expected], atol=1e-6)

    def test_shape_mismatch(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            sgd_step([p], [np.ones(3, dtype=np.float32)], lr=0.1)

    def test_momentum_accumulates(self):
        p = Tensor([0.0], requires_grad=True)
        g = np.array([1.0], dtype=np.float32)
        vel = sgd_step([p], [g], lr=0.1, momentum=0.9)
        vel = sgd_step([p], [g], lr=0.1, momentum=0.9, velocities=vel)
        np.testing.assert_allclose(p.data, [-(0.1 + 0.1 * 1.9)], atol=1e-6)


class TestGradCheck:
    def test_sum_of_squares_passes(self):
        rng = np.random.default_rng(11)
        res = grad_check(lambda x: tsum(x * x), rng.normal(size=10), step=1e-3, tol=1e-4)
        assert res.passed, res.max_rel_err

    def test_constant_function_passes(self):
        res = grad_check(lambda x: Tensor(3.5, dtype=np.float64) * 1.0, np.ones(4))
        assert res.passed

    def test_corrupted_backward_fails(self):
        # An op whose backward is scaled by 1.01 must be flagged.
        def broken_square_sum(x):
            y = x * x

            def bad_backward(g):
                Tensor._accum(x, g * (2.0 * x.data) * 1.01)

            y._parents = (x,)
            y._backward = bad_backward
            return tsum(y)

        res = grad_check(broken_square_sum, np.full(5, 1.3), step=1e-3, tol=1e-4)
        assert not res.passed
        assert res.max_rel_err > 1e-3


class TestGradientSuite:
    """Every differentiable op matches finite differences at 10 seeded points."""

    CASES = {
        "matmul": lambda x: tsum(x.reshape((3, 4)) @ Tensor(np.linspace(-1, 1, 20).reshape(4, 5), dtype=np.float64)),
        "add_broadcast": lambda x: tsum(x.reshape((3, 4)) + Tensor(np.arange(4.0), dtype=np.float64)),
        "mul": lambda x: tsum(x * x * 0.5 - x * 2.0),
        "relu_nudged": lambda x: tsum(relu(x)),
        "softmax": lambda x: tsum(softmax(x.reshape((3, 4)), temperature=0.7) * Tensor(np.arange(12.0).reshape(3, 4), dtype=np.float64)),
        "cosine_similarity": lambda x: cosine_similarity(gather(x, range(6)), gather(x, range(6, 12))),
        "cross_entropy": lambda x: cross_entropy(x, 2),
        "l2_normalize": lambda x: tsum(l2_normalize(x.reshape((3, 4))) * Tensor(np.arange(12.0).reshape(3, 4), dtype=np.float64)),
        "sum_axis": lambda x: tsum(tsum(x.reshape((3, 4)), axis=0) * Tensor(np.arange(4.0), dtype=np.float64)),
        "mean": lambda x: tmean(x * x),
        "gather": lambda x: tsum(gather(x.reshape((6, 2)), [0, 3, 3, 5]) * 1.5),
        "concat_rows": lambda x: concat_rows([x.reshape((3, 4)), x.reshape((3, 4)) * 2.0]).sum(),
        "transpose": lambda x: tsum(transpose(x.reshape((3, 4))) @ Tensor(np.linspace(0, 1, 6).reshape(3, 2), dtype=np.float64)),
        "reshape": lambda x: tsum(x.reshape((2, 6)) * x.reshape((2, 6))),
    }

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_op_gradient(self, name):
        fn = self.CASES[name]
        rng = np.random.default_rng(hash(name) % (2**32))
        for trial in range(10):
            x = rng.normal(size=12)
            if name == "relu_nudged":
                x = np.where(np.abs(x) < 0.05, 0.1 * np.sign(x) + (x == 0) * 0.1, x)
            res = grad_check(fn, x, step=1e-3, tol=1e-4)
            assert res.passed, f"{name} trial {trial}: rel err {res.max_rel_err}"


class TestGraphMechanics:
    def test_no_grad_on_constant_leaves(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0])
        tsum(a * b).backward()
        assert b.grad is None
        np.testing.assert_array_equal(a.grad, b.data)

    def test_reused_node_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * 3.0
        tsum(y + y).backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_backward_requires_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 2.0).backward()

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(16, 16)).astype(np.float32)
        b = rng.normal(size=(16, 16)).astype(np.float32)

        def run():
            out = softmax(Tensor(a) @ Tensor(b), temperature=0.3)
            return l2_normalize(out).data.tobytes()

        assert run() == run()

    def test_float32_by_default(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32
        assert (Tensor([1.0]) * 2.0).dtype == np.float32

    def test_data_is_row_major_and_sized(self):
        t = Tensor(np.arange(12.0).reshape(3, 4))
        assert t.data.flags["C_CONTIGUOUS"]
        assert t.data.size == int(np.prod(t.shape))
