import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmksum import tensor as T
from mmksum.errors import (
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
    ReproducibilityError,
    StepUnderflowError,
)


def t(data, rg=False):
    return T.Tensor(np.array(data, dtype=np.float64), requires_grad=rg)


class TestMatmul:
    def test_identity(self):
        eye = t(np.eye(2))
        b = t([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(T.matmul(eye, b).data, b.data)

    def test_hand_multiplication(self):
        # oracle: hand multiplication of [[1,2],[3,4]] @ [[5,6],[7,8]]
        # row0: [1*5+2*7, 1*6+2*8] = [19, 22]; row1: [3*5+4*7, 3*6+4*8] = [43, 50]
        out = T.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[5.0, 6.0], [7.0, 8.0]]))
        assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_zeros_annihilate(self):
        rng = np.random.default_rng(0)
        out = T.matmul(t(np.zeros((2, 3))), t(rng.normal(size=(3, 4))))
        assert np.array_equal(out.data, np.zeros((2, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as exc:
            T.matmul(t(np.zeros((2, 3))), t(np.zeros((4, 2))))
        assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)

    def test_associativity_on_random_chains(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a, b, c = (t(rng.normal(size=(4, 4))) for _ in range(3))
            left = T.matmul(T.matmul(a, b), c).data
            right = T.matmul(a, T.matmul(b, c)).data
            assert np.max(np.abs(left - right)) < 1e-9

    def test_matmul_nt_equals_explicit_transpose(self):
        rng = np.random.default_rng(3)
        a = t(rng.normal(size=(3, 5)))
        b = t(rng.normal(size=(4, 5)))
        assert np.allclose(T.matmul_nt(a, b).data, a.data @ b.data.T)


class TestSoftmax:
    def test_uniform_on_equal_inputs(self):
        out = T.softmax(t([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_large_inputs_stable(self):
        out = T.softmax(t([1000.0, 0.0]))
        assert out.data[0] > 1.0 - 1e-12
        assert out.data[1] < 1e-12
        assert np.all(np.isfinite(out.data))

    def test_against_direct_formula(self):
        # oracle: exp/normalize computed with math.exp at full precision
        xs = [1.0, 2.0, 3.0]
        es = [math.exp(v) for v in xs]
        expected = [e / sum(es) for e in es]
        out = T.softmax(t(xs))
        assert np.allclose(out.data, expected, atol=1e-15)

    def test_empty_axis_rejected(self):
        with pytest.raises(DimensionError):
            T.softmax(t(np.zeros((2, 0))))

    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=12))
    @settings(max_examples=200, deadline=None)
    def test_sums_to_one(self, xs):
        out = T.softmax(t(xs))
        assert abs(out.data.sum() - 1.0) <= 1e-12
        assert np.all(out.data > 0.0)


class TestLayerNorm:
    def test_constant_vector_absorbed_by_eps(self):
        out = T.layer_norm(t([[4.0, 4.0, 4.0]]), t(np.ones(3)), t(np.zeros(3)), eps=1e-5)
        assert np.allclose(out.data, 0.0)

    def test_zero_gain_gives_bias(self):
        bias = np.array([1.0, 2.0, 3.0])
        out = T.layer_norm(t([[5.0, -1.0, 0.5]]), t(np.zeros(3)), t(bias), eps=1e-5)
        assert np.allclose(out.data, bias)

    def test_against_direct_formula(self):
        # oracle: mean/variance computed by hand for [1,2,3]: mu=2, var=2/3
        xs = np.array([1.0, 2.0, 3.0])
        expected = (xs - 2.0) / math.sqrt(2.0 / 3.0)
        out = T.layer_norm(t([xs]), t(np.ones(3)), t(np.zeros(3)), eps=0.0)
        assert np.allclose(out.data[0], expected, atol=1e-10)
        assert abs(out.data.mean()) < 1e-10
        assert abs(out.data.var() - 1.0) < 1e-10

    def test_degenerate_variance_rejected(self):
        with pytest.raises(NumericError):
            T.layer_norm(t([[3.0]]), t(np.ones(1)), t(np.zeros(1)), eps=0.0)


class TestBackward:
    def test_sum_gives_ones(self):
        x = t([[1.0, -2.0], [0.5, 3.0]], rg=True)
        with T.Graph() as g:
            loss = T.sum_all(x)
        g.backward(loss)
        assert np.array_equal(x.grad, np.ones((2, 2)))

    def test_elementwise_square(self):
        # oracle: d/dx sum(x*x) = 2x, at x=[1,2] -> [2,4]
        x = t([1.0, 2.0], rg=True)
        with T.Graph() as g:
            loss = T.sum_all(T.mul(x, x))
        g.backward(loss)
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_disconnected_leaf_gets_zero(self):
        x = t([1.0, 2.0], rg=True)
        y = t([3.0], rg=True)
        with T.Graph() as g:
            g.watch(y)
            loss = T.sum_all(x)
        g.backward(loss)
        assert np.array_equal(y.grad, np.zeros(1))

    def test_non_scalar_loss_rejected(self):
        x = t([1.0, 2.0], rg=True)
        with T.Graph() as g:
            out = T.mul(x, x)
        with pytest.raises(ContractError):
            g.backward(out)

    def test_second_backward_rejected(self):
        x = t([1.0, 2.0], rg=True)
        with T.Graph() as g:
            loss = T.sum_all(x)
        g.backward(loss)
        with pytest.raises(ContractError):
            g.backward(loss)

    def test_grad_accumulates_across_reuse(self):
        x = t([2.0], rg=True)
        with T.Graph() as g:
            loss = T.sum_all(T.add(T.mul(x, x), x))  # x^2 + x -> 2x + 1 = 5
        g.backward(loss)
        assert np.allclose(x.grad, [5.0])

    def test_no_recording_without_graph(self):
        x = t([1.0, 2.0], rg=True)
        out = T.mul(x, x)
        assert not out.requires_grad


class TestOpGradients:
    """Spot-check each op's gradient against central differences."""

    def _check(self, build, shapes, seed=0, eps=1e-6):
        rng = np.random.default_rng(seed)
        params = {f"p{i}": T.Tensor(rng.normal(size=s), requires_grad=True)
                  for i, s in enumerate(shapes)}
        report = T.finite_diff_check(lambda ps: build(*ps.values()), params,
                                     eps=eps, tol=1e-6, max_coords_per_block=12)
        assert report.passed, report.summary()

    def test_add_bias(self):
        self._check(lambda a, b: T.sum_all(T.mul(T.add(a, b), T.add(a, b))),
                    [(3, 4), (4,)])

    def test_sub_mul_scale_affine(self):
        self._check(lambda a, b: T.sum_all(T.affine(T.mul(T.sub(a, b), a), 2.5, -1.0)),
                    [(3, 3), (3, 3)])

    def test_matmul_both_sides(self):
        self._check(lambda a, b: T.sum_all(T.mul(T.matmul(a, b), T.matmul(a, b))),
                    [(3, 4), (4, 2)])

    def test_matmul_nt(self):
        self._check(lambda a, b: T.sum_all(T.mul(T.matmul_nt(a, b), T.matmul_nt(a, b))),
                    [(3, 4), (5, 4)])

    def test_relu_sigmoid(self):
        self._check(lambda a: T.sum_all(T.mul(T.sigmoid(a), T.relu(a))), [(4, 3)], seed=5)

    def test_softmax(self):
        w = np.random.default_rng(9).normal(size=(3, 5))
        self._check(lambda a: T.sum_all(T.mul(T.softmax(a), T.Tensor(w))), [(3, 5)])

    def test_layer_norm(self):
        w = np.random.default_rng(11).normal(size=(2, 6))
        self._check(
            lambda x, gain, bias: T.sum_all(T.mul(T.layer_norm(x, gain, bias, 1e-5), T.Tensor(w))),
            [(2, 6), (6,), (6,)])

    def test_embedding(self):
        ids = np.array([0, 2, 2, 1])
        w = np.random.default_rng(13).normal(size=(4, 3))
        self._check(lambda tbl: T.sum_all(T.mul(T.embedding(tbl, ids), T.Tensor(w))),
                    [(5, 3)])

    def test_concat_slice_broadcast(self):
        w = np.random.default_rng(17).normal(size=(3, 5))

        def build(a, b, v):
            joined = T.concat_last([a, b])          # (3,4)
            part = T.slice_last(joined, 1, 4)       # (3,3)
            rows = T.rows_broadcast(v, 3)           # (3,2)
            both = T.concat_last([part, rows])      # (3,5)
            return T.sum_all(T.mul(both, T.Tensor(w)))

        self._check(build, [(3, 2), (3, 2), (2,)])

    def test_masked_fill(self):
        mask = np.array([[True, False, False], [False, True, False]])
        self._check(lambda a: T.sum_all(T.mul(T.masked_fill(a, mask, -5.0),
                                              T.masked_fill(a, mask, -5.0))),
                    [(2, 3)])

    def test_mean_ops(self):
        self._check(lambda a: T.sum_all(T.mul(T.mean_rows(a), T.mean_rows(a))), [(4, 3)])
        self._check(lambda a: T.mean_all(T.mul(a, a)), [(3, 3)])

    def test_cross_entropy_with_ignore(self):
        targets = np.array([1, 0, 3, 0])
        self._check(lambda logits: T.cross_entropy(logits, targets, ignore_id=0), [(4, 5)])

    def test_cross_entropy_all_ignored_rejected(self):
        logits = t(np.zeros((2, 4)), rg=True)
        with pytest.raises(ContractError):
            T.cross_entropy(logits, np.array([0, 0]), ignore_id=0)


class TestFiniteChecks:
    def test_nonfinite_init_rejected(self):
        with pytest.raises(NumericError):
            T.Tensor(np.array([1.0, np.nan]))

    def test_overflow_detected_in_op(self):
        a = t([[1e308, 1e308]])
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            T.add(a, a)

    def test_flag_disables_scan(self):
        prev = T.set_finite_checks(False)
        try:
            a = t([[1e308, 1e308]])
            with np.errstate(over="ignore"):
                out = T.add(a, a)
            assert np.isinf(out.data).all()
        finally:
            T.set_finite_checks(prev)


class TestFiniteDiffHarness:
    def test_quadratic_matches_analytic(self):
        rng = np.random.default_rng(21)
        params = {"theta": T.Tensor(rng.normal(size=(7,)), requires_grad=True)}
        report = T.finite_diff_check(lambda ps: T.sum_all(T.mul(ps["theta"], ps["theta"])),
                                     params, eps=1e-5, tol=1e-8)
        assert report.passed, report.summary()
        assert report.max_rel_err < 1e-8

    def test_step_underflow(self):
        params = {"theta": T.Tensor(np.ones(2), requires_grad=True)}
        with pytest.raises(StepUnderflowError):
            T.finite_diff_check(lambda ps: T.sum_all(ps["theta"]), params, eps=1e-20)

    def test_step_too_coarse(self):
        params = {"theta": T.Tensor(np.ones(2), requires_grad=True)}
        with pytest.raises(ConfigError):
            T.finite_diff_check(lambda ps: T.sum_all(ps["theta"]), params, eps=1e-2)

    def test_nondeterministic_f_rejected(self):
        params = {"theta": T.Tensor(np.ones(2), requires_grad=True)}
        state = {"n": 0}

        def f(ps):
            state["n"] += 1
            return T.scale(T.sum_all(ps["theta"]), float(state["n"]))

        with pytest.raises(ReproducibilityError):
            T.finite_diff_check(f, params)

    def test_sampling_recorded_for_large_blocks(self):
        rng = np.random.default_rng(2)
        params = {"big": T.Tensor(rng.normal(size=(40,)), requires_grad=True)}
        report = T.finite_diff_check(lambda ps: T.sum_all(T.mul(ps["big"], ps["big"])),
                                     params, max_coords_per_block=8)
        assert report.blocks[0].coords_checked == 8
        assert report.blocks[0].size == 40
