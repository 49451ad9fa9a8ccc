import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from bigcf import diffcore as dc
from bigcf.errors import ConfigError, ContractError, NumericError

from conftest import central_diff, rel_err, tape_grad, tape_value


def random_sparse(rng, n, m, density=0.3):
    a = sp.random(n, m, density=density, random_state=np.random.RandomState(rng.integers(1 << 30)),
                  data_rvs=lambda k: rng.uniform(0.1, 2.0, k)).tocoo()
    return dc.SparseMat.from_coo(a.row, a.col, a.data, (n, m)), a.toarray()


class TestSparseMat:
    def test_identity_product_is_unchanged(self, rng):
        t = dc.Tape()
        b = rng.standard_normal((3, 2))
        out = dc.sp_dense_matmul(dc.SparseMat.identity(3), t.const(b)).value
        assert np.array_equal(out, b)

    def test_zero_matrix_product(self, rng):
        z = dc.SparseMat.from_coo([], [], [], (4, 3))
        out = dc.sp_dense_matmul(z, dc.Tape().const(rng.standard_normal((3, 2)))).value
        assert out.shape == (4, 2) and not out.any()

    @pytest.mark.parametrize("n", [10, 37, 100])
    def test_matches_dense_oracle(self, rng, n):
        a, dense = random_sparse(rng, n, n)
        b = rng.standard_normal((n, 5))
        out = dc.sp_dense_matmul(a, dc.Tape().const(b)).value
        assert np.max(np.abs(out - dense @ b)) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            dc.sp_dense_matmul(dc.SparseMat.identity(3), dc.Tape().const(np.ones((4, 2))))

    @pytest.mark.parametrize("kw", [
        dict(indptr=[0, 2, 1], indices=[0, 1], data=[1.0, 1.0]),
        dict(indptr=[0, 2, 2], indices=[1, 0], data=[1.0, 1.0]),
        dict(indptr=[0, 1, 2], indices=[0, 0], data=[1.0, -1.0]),
        dict(indptr=[0, 2, 2], indices=[1, 1], data=[1.0, 1.0]),
    ])
    def test_invariants_enforced(self, kw):
        with pytest.raises(ConfigError):
            dc.SparseMat(shape=(2, 2), **kw)

    def test_row_boundary_may_decrease(self):
        m = dc.SparseMat(shape=(2, 3), indptr=[0, 1, 3], indices=[2, 0, 1], data=[1.0, 2.0, 3.0])
        assert np.array_equal(m.to_dense(), [[0, 0, 1], [2, 3, 0]])

    def test_gradient_is_transpose_product(self, rng):
        a, dense = random_sparse(rng, 6, 4)
        b = rng.standard_normal((4, 3))
        w = rng.standard_normal((6, 3))
        _, g = tape_grad(lambda t, x: dc.total_sum(dc.mul(dc.sp_dense_matmul(a, x["b"]),
                                                          t.const(w))), {"b": b})
        assert np.allclose(g["b"], dense.T @ w, atol=1e-12)


class TestSoftmax:
    def test_equal_logits_uniform(self):
        s = dc.row_softmax(dc.Tape().const(np.full((1, 4), 3.0))).value
        assert np.allclose(s, 0.25)

    @pytest.mark.parametrize("t", [0.2, 1.0, 3.0])
    def test_two_class_closed_form(self, t):
        x = 0.7
        s = dc.row_softmax(dc.Tape().const([[x, x + t * np.log(2)]]), t).value
        assert np.allclose(s, [[1 / 3, 2 / 3]], atol=1e-12)

    def test_huge_logit_no_overflow(self):
        s = dc.row_softmax(dc.Tape().const([[0.0, 1e6, -3.0]])).value
        assert np.isfinite(s).all() and s[0, 1] == 1.0

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_nonpositive_temperature_rejected(self, t):
        with pytest.raises(ConfigError):
            dc.row_softmax(dc.Tape().const([[1.0, 2.0]]), t)

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
                      elements=st.floats(-1e3, 1e3)),
           st.floats(0.05, 5.0))
    def test_rows_sum_to_one(self, x, t):
        s = dc.row_softmax(dc.Tape().const(x), t).value
        assert (s >= 0).all()
        assert np.allclose(s.sum(axis=1), 1.0, atol=1e-9)


class TestElementwise:
    def test_exp_of_zero(self):
        assert np.array_equal(dc.exp(dc.Tape().const(np.zeros((2, 3)))).value, np.ones((2, 3)))

    def test_log_eps_floor(self):
        v = dc.log_eps(dc.Tape().const([[0.0]]), 1e-10).item()
        assert v == pytest.approx(np.log(1e-10), rel=1e-15)

    def test_mul_gradient_is_other_factor(self, rng):
        x, y = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
        _, g = tape_grad(lambda t, v: dc.total_sum(dc.mul(v["x"], t.const(y))), {"x": x})
        assert np.array_equal(g["x"], y)

    def test_shape_mismatch(self):
        t = dc.Tape()
        with pytest.raises(ConfigError):
            dc.add(t.const(np.ones((2, 2))), t.const(np.ones((2, 3))))
        with pytest.raises(ConfigError):
            dc.mul(t.const(np.ones((2, 2))), t.const(np.ones((3, 2))))

    PRIMS = {
        "add": lambda t, v: dc.total_sum(dc.mul(v["a"] + v["b"], v["a"])),
        "sub": lambda t, v: dc.total_sum(dc.square(v["a"] - v["b"])),
        "mul": lambda t, v: dc.total_sum(dc.mul(v["a"], v["b"])),
        "scale": lambda t, v: dc.total_sum(dc.square(dc.scale(v["a"], -2.5))),
        "exp": lambda t, v: dc.total_sum(dc.exp(v["a"])),
        "log_eps": lambda t, v: dc.total_sum(dc.log_eps(dc.square(v["a"]) + 0.1)),
        "sigmoid": lambda t, v: dc.total_sum(dc.mul(dc.sigmoid(v["a"]), v["b"])),
        "log_sigmoid": lambda t, v: dc.total_sum(dc.log_sigmoid(v["a"] - v["b"])),
        "transpose": lambda t, v: dc.total_sum(dc.matmul(v["a"].T, v["b"])),
        "mean": lambda t, v: dc.mean(dc.square(v["a"])),
        "row_sum": lambda t, v: dc.total_sum(dc.square(dc.row_sum(v["a"]))),
        "take_rows": lambda t, v: dc.total_sum(dc.square(dc.take_rows(v["a"], [0, 2, 2, 1]))),
        "pick": lambda t, v: dc.total_sum(dc.square(dc.pick(v["a"], [1, 0, 2, 1]))),
        "hstack": lambda t, v: dc.total_sum(dc.square(dc.hstack(v["a"], v["b"]))),
        "matmul": lambda t, v: dc.total_sum(dc.square(dc.matmul(v["a"], v["b"].T))),
        "softmax": lambda t, v: dc.total_sum(dc.mul(dc.row_softmax(v["a"], 0.7), v["b"])),
        "logsumexp": lambda t, v: dc.total_sum(dc.square(dc.logsumexp_rows(v["a"]))),
        "normalize": lambda t, v: dc.total_sum(dc.mul(dc.normalize_rows(v["a"]), v["b"])),
        "row_cosine": lambda t, v: dc.total_sum(dc.square(dc.row_cosine(v["a"], v["b"]))),
        "paired_cosine": lambda t, v: dc.total_sum(dc.paired_cosine(v["a"], v["b"])),
    }

    @pytest.mark.parametrize("name", sorted(PRIMS))
    def test_finite_difference(self, rng, name):
        arrays = {"a": rng.standard_normal((4, 3)), "b": rng.standard_normal((4, 3))}
        build = self.PRIMS[name]
        _, g = tape_grad(build, arrays)
        fd = central_diff(tape_value(build), arrays)
        for k in arrays:
            assert rel_err(g[k], fd[k]) < 1e-4, k


class TestCosine:
    def test_self_is_one(self, rng):
        a = rng.standard_normal((1, 6))
        assert dc.row_cosine(dc.Tape().const(a), dc.Tape().const(a)).item() == pytest.approx(1.0)

    def test_orthogonal_is_zero(self):
        t = dc.Tape()
        assert dc.row_cosine(t.const([[1.0, 0.0]]), t.const([[0.0, 1.0]])).item() == 0.0

    def test_direct_formula(self, rng):
        a, b = rng.standard_normal((5, 8)), rng.standard_normal((7, 8))
        t = dc.Tape()
        got = dc.row_cosine(t.const(a), t.const(b)).value
        want = np.array([[x @ y / (np.linalg.norm(x) * np.linalg.norm(y)) for y in b] for x in a])
        assert np.max(np.abs(got - want)) < 1e-12

    def test_zero_row_uses_floor(self):
        t = dc.Tape()
        out = dc.row_cosine(t.const([[0.0, 0.0]]), t.const([[1.0, 2.0]])).value
        assert np.isfinite(out).all() and out[0, 0] == 0.0


def composed_xent(t, lv, cols, tau):
    logits = dc.scale(dc.row_cosine(lv["a"], lv["b"]), 1.0 / tau)
    return dc.total_sum(dc.logsumexp_rows(logits) - dc.pick(logits, cols))


class TestFusedXent:
    @pytest.mark.parametrize("chunk", [1, 3, 64])
    def test_matches_composed(self, rng, chunk):
        arr = {"a": rng.standard_normal((9, 4)), "b": rng.standard_normal((6, 4))}
        cols = rng.integers(0, 6, 9)
        v0, g0 = tape_grad(lambda t, lv: composed_xent(t, lv, cols, 0.2), arr)
        v1, g1 = tape_grad(lambda t, lv: dc.total_sum(
            dc.cosine_xent_rows(lv["a"], lv["b"], cols, 0.2, chunk=chunk)), arr)
        assert abs(v0 - v1) < 1e-12
        for k in arr:
            assert np.max(np.abs(g0[k] - g1[k])) < 1e-12

    def test_shared_operand_finite_difference(self, rng):
        arr = {"a": rng.standard_normal((5, 3))}
        build = lambda t, lv: dc.total_sum(dc.cosine_xent_rows(lv["a"], lv["a"], np.arange(5), 0.5,
                                                               chunk=2))
        _, g = tape_grad(build, arr)
        assert rel_err(g["a"], central_diff(tape_value(build), arr)["a"]) < 1e-6

    def test_large_logits_stable(self):
        t = dc.Tape()
        a = t.const(np.eye(3))
        out = dc.matmul_xent_rows(a, a, [0, 1, 2], scale_by=1e4).value
        assert np.all(out >= 0) and np.allclose(out, 0.0)

    def test_bad_columns(self, rng):
        t = dc.Tape()
        a = t.const(rng.standard_normal((2, 3)))
        with pytest.raises(ConfigError):
            dc.matmul_xent_rows(a, a, [0, 2])
        with pytest.raises(ConfigError):
            dc.matmul_xent_rows(a, a, [0])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        _, g = tape_grad(lambda t, v: dc.total_sum(v["x"]), {"x": rng.standard_normal((3, 4))})
        assert np.array_equal(g["x"], np.ones((3, 4)))

    def test_sum_of_squares_at_ones(self):
        _, g = tape_grad(lambda t, v: dc.total_sum(dc.mul(v["x"], v["x"])), {"x": np.ones((2, 3))})
        assert np.array_equal(g["x"], np.full((2, 3), 2.0))

    def test_non_scalar_loss_rejected(self):
        t = dc.Tape()
        x = t.leaf(np.ones((2, 2)), "x")
        with pytest.raises(ContractError):
            t.backward(dc.exp(x))

    def test_unreached_leaf_gets_zeros(self):
        t = dc.Tape()
        x, y = t.leaf(np.ones((2, 2)), "x"), t.leaf(np.ones((3, 1)), "y")
        g = t.backward(dc.total_sum(x))
        assert np.array_equal(g["y"], np.zeros((3, 1)))

    def test_replay_is_bit_identical(self, rng):
        t = dc.Tape()
        a = t.leaf(rng.standard_normal((5, 3)), "a")
        b = t.leaf(rng.standard_normal((6, 3)), "b")
        loss = dc.total_sum(dc.logsumexp_rows(dc.scale(dc.row_cosine(a, b), 5.0)))
        g1, g2 = t.backward(loss), t.backward(loss)
        assert all(np.array_equal(g1[k], g2[k]) for k in g1)

    def test_non_finite_value_raises(self):
        t = dc.Tape()
        x = t.leaf([[1e308]], "x")
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            dc.scale(x, 10.0)

    def test_shared_subexpression_accumulates(self):
        t = dc.Tape()
        x = t.leaf([[3.0]], "x")
        y = dc.mul(x, x)
        g = t.backward(dc.total_sum(y + y))
        assert g["x"][0, 0] == 12.0
