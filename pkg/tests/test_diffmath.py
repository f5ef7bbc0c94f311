import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nrccr import diffmath as dm


def T(values, rg=False):
    return dm.Tensor(values, requires_grad=rg)


# ---------------------------------------------------------------------------
# construction and invariants
# ---------------------------------------------------------------------------


def test_tensor_rejects_nan_and_high_rank():
    with pytest.raises(ValueError):
        dm.Tensor([np.nan, 1.0])
    with pytest.raises(ValueError):
        dm.Tensor(np.zeros((2, 2, 2, 2)))


def test_tape_single_use():
    x = T(3.0, rg=True)
    with dm.Tape() as tape:
        loss = dm.mul(x, x)
        tape.backward(loss)
        with pytest.raises(dm.TapeError):
            tape.backward(loss)


def test_backward_rejects_nonscalar():
    x = T([1.0, 2.0], rg=True)
    with dm.Tape() as tape:
        y = dm.relu(x)
        with pytest.raises(dm.TapeError):
            tape.backward(y)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def test_add_componentwise():
    out = dm.add(T([1.0, 2.0]), T([3.0, 4.0]))
    assert np.array_equal(out.values, [4.0, 6.0])


def test_sigmoid_symmetry_point():
    assert dm.sigmoid(T([0.0])).values[0] == pytest.approx(0.5, abs=1e-15)


def test_log_identity_case():
    assert dm.log(T([1.0])).values[0] == 0.0


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        dm.log(T([1.0, 0.0]))


def test_elementwise_dispatch_matches_functions():
    a, b = T([1.0, -2.0]), T([0.5, 3.0])
    assert np.array_equal(dm.elementwise("add", a, b).values, dm.add(a, b).values)
    assert np.array_equal(dm.elementwise("abs", a).values, np.abs(a.values))
    with pytest.raises(ValueError):
        dm.elementwise("mul", a)
    with pytest.raises(ValueError):
        dm.elementwise("relu", a, b)
    with pytest.raises(ValueError):
        dm.elementwise("nope", a)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        dm.add(T([1.0, 2.0]), T([1.0, 2.0, 3.0]))


def test_scalar_second_operand_broadcasts():
    out = dm.mul(T([[1.0, 2.0], [3.0, 4.0]]), T(2.0))
    assert np.array_equal(out.values, [[2.0, 4.0], [6.0, 8.0]])


def test_relu_abs_subgradients_at_zero():
    x = T([0.0, -1.0, 2.0], rg=True)
    with dm.Tape() as tape:
        loss = dm.sum_all(dm.relu(x))
        tape.backward(loss)
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])
    y = T([0.0, -1.5, 2.0], rg=True)
    with dm.Tape() as tape:
        loss = dm.sum_all(dm.abs_(y))
        tape.backward(loss)
    assert np.array_equal(y.grad, [0.0, -1.0, 1.0])


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    eye = T(np.eye(2))
    m = T([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(dm.matmul(eye, m).values, m.values)


def test_matmul_scalar_case():
    assert dm.matmul(T([[2.0]]), T([[3.0]])).values[0, 0] == 6.0


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError):
        dm.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def _matmul_loops(a, b):
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_matmul_against_triple_loop_oracle():
    rng = np.random.default_rng(7)
    a = rng.uniform(-1, 1, (5, 7))
    b = rng.uniform(-1, 1, (7, 3))
    got = dm.matmul(T(a), T(b)).values
    assert np.allclose(got, _matmul_loops(a, b), atol=1e-12)


# ---------------------------------------------------------------------------
# softmax / layer norm / pooling / cosine
# ---------------------------------------------------------------------------


def test_softmax_uniform_row():
    out = dm.softmax_rows(T([[0.0, 0.0, 0.0]]))
    assert np.allclose(out.values, [[1 / 3] * 3], atol=1e-15)


def test_softmax_closed_form():
    out = dm.softmax_rows(T([[np.log(2.0), 0.0]]))
    assert np.allclose(out.values, [[2 / 3, 1 / 3]], atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    row = rng.uniform(-5, 5, (4, 6))
    a = dm.softmax_rows(T(row), temperature=0.7).values
    b = dm.softmax_rows(T(row + 123.456), temperature=0.7).values
    assert np.allclose(a, b, atol=1e-12)


def test_softmax_rejects_bad_temperature():
    with pytest.raises(ValueError):
        dm.softmax_rows(T([[1.0, 2.0]]), temperature=0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(-50, 50), min_size=2, max_size=6),
                min_size=1, max_size=5).filter(lambda rows: len({len(r) for r in rows}) == 1),
       st.floats(0.01, 10.0))
def test_softmax_rows_sum_to_one(rows, tau):
    out = dm.softmax_rows(T(np.array(rows)), temperature=tau)
    assert np.allclose(out.values.sum(axis=1), 1.0, atol=1e-9)


def test_layer_norm_constant_row_is_zero():
    out = dm.layer_norm_rows(T([[5.0, 5.0, 5.0]]), T(np.ones(3)), T(np.zeros(3)))
    assert np.allclose(out.values, 0.0, atol=1e-12)


def test_layer_norm_closed_form_two_values():
    out = dm.layer_norm_rows(T([[1.0, -1.0]]), T(np.ones(2)), T(np.zeros(2)), epsilon=1e-5)
    expect = 1.0 / np.sqrt(1.0 + 1e-5)
    assert out.values[0, 0] == pytest.approx(expect, abs=1e-12)
    assert out.values[0, 1] == pytest.approx(-expect, abs=1e-12)


def test_layer_norm_standardizes_random_rows():
    rng = np.random.default_rng(11)
    a = rng.uniform(-3, 3, (6, 16))
    out = dm.layer_norm_rows(T(a), T(np.ones(16)), T(np.zeros(16))).values
    assert np.allclose(out.mean(axis=1), 0.0, atol=1e-6)
    assert np.allclose(out.var(axis=1), 1.0, atol=1e-3)


def test_layer_norm_rejects_bad_gain_length():
    with pytest.raises(ValueError):
        dm.layer_norm_rows(T(np.ones((2, 4))), T(np.ones(3)), T(np.zeros(4)))


def test_mean_pool_single_row_identity():
    out = dm.mean_pool_rows(T([[1.0, 2.0, 3.0]]))
    assert np.array_equal(out.values, [1.0, 2.0, 3.0])


def test_mean_pool_componentwise():
    assert np.array_equal(dm.mean_pool_rows(T([[0.0, 2.0], [2.0, 0.0]])).values, [1.0, 1.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(1, 6), st.integers(0, 10_000))
def test_mean_pool_permutation_invariant(n, d, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (n, d))
    perm = rng.permutation(n)
    x = dm.mean_pool_rows(T(a)).values
    y = dm.mean_pool_rows(T(a[perm])).values
    assert np.allclose(x, y, atol=1e-12)


def test_cosine_orthogonal_self_and_closed_form():
    x = T([[1.0, 0.0], [3.0, 4.0]])
    y = T([[0.0, 1.0], [3.0, 4.0], [1.0, 1.0]])
    c = dm.cosine_matrix(x, y).values
    assert c[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert c[1, 1] == pytest.approx(1.0, abs=1e-12)
    assert c[0, 2] == pytest.approx(1.0 / np.sqrt(2.0), abs=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 6), st.integers(0, 10_000))
def test_cosine_bounds_and_diagonal(n, m, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (n, d)) + 0.01
    y = rng.uniform(-1, 1, (m, d)) + 0.01
    c = dm.cosine_matrix(T(x), T(y)).values
    assert np.all(c <= 1.0 + 1e-9) and np.all(c >= -1.0 - 1e-9)
    cc = dm.cosine_matrix(T(x), T(x)).values
    assert np.allclose(np.diag(cc), 1.0, atol=1e-9)


def test_cosine_width_mismatch():
    with pytest.raises(ValueError):
        dm.cosine_matrix(T(np.ones((2, 3))), T(np.ones((2, 4))))


# ---------------------------------------------------------------------------
# backward correctness
# ---------------------------------------------------------------------------


def test_power_rule():
    x = T(3.0, rg=True)
    with dm.Tape() as tape:
        tape.backward(dm.mul(x, x))
    assert float(x.grad) == pytest.approx(6.0, abs=1e-12)


def test_reuse_accumulates():
    x = T([2.0], rg=True)
    with dm.Tape() as tape:
        y = dm.add(x, x)  # dy/dx = 2
        tape.backward(dm.sum_all(y))
    assert np.array_equal(x.grad, [2.0])


def test_matmul_grads_match_finite_differences():
    rng = np.random.default_rng(0)
    a = T(rng.uniform(-1, 1, (3, 3)))
    b = T(rng.uniform(-1, 1, (3, 3)))
    report = dm.check_gradients(lambda ts: dm.sum_all(dm.matmul(ts[0], ts[1])), [a, b])
    assert report.passed, report.summary()


def test_grad_reverse_flips_sign():
    x = T([1.0, -2.0], rg=True)
    with dm.Tape() as tape:
        tape.backward(dm.sum_all(dm.grad_reverse(x, gain=0.5)))
    assert np.array_equal(x.grad, [-0.5, -0.5])


def test_detach_blocks_gradient():
    x = T([1.0, 2.0], rg=True)
    with dm.Tape() as tape:
        tape.backward(dm.sum_all(dm.detach(x)))
    assert x.grad is None


def test_embed_rows_scatter_adds():
    table = T(np.arange(8.0).reshape(4, 2), rg=True)
    with dm.Tape() as tape:
        out = dm.embed_rows(table, [1, 1, 3])
        tape.backward(dm.sum_all(out))
    assert np.array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_embed_rows_out_of_range():
    table = T(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        dm.embed_rows(table, [0, 4])


def test_pick_and_stack_and_concat_grads():
    rng = np.random.default_rng(5)
    a = T(rng.uniform(-1, 1, (3, 4)))
    report = dm.check_gradients(
        lambda ts: dm.sum_all(dm.relu(dm.pick(ts[0], [0, 1, 2], [3, 0, 2]))), [a])
    assert report.passed, report.summary()

    vs = [T(rng.uniform(-1, 1, 4)) for _ in range(3)]
    report = dm.check_gradients(
        lambda ts: dm.sum_all(dm.cosine_matrix(dm.stack_rows(ts), dm.stack_rows(ts))), vs)
    assert report.passed, report.summary()

    ms = [T(rng.uniform(-1, 1, (2, 3))) for _ in range(2)]
    report = dm.check_gradients(
        lambda ts: dm.sum_all(dm.sigmoid(dm.concat_cols(ts))), ms)
    assert report.passed, report.summary()


@pytest.mark.parametrize("make", [
    lambda a, b: dm.sum_all(dm.mul(dm.sigmoid(a), dm.relu(b))),
    lambda a, b: dm.sum_all(dm.softmax_rows(dm.matmul(a, b), temperature=0.5)),
    lambda a, b: dm.sum_all(dm.layer_norm_rows(
        dm.matmul(a, b), dm.Tensor(np.ones(4), requires_grad=False),
        dm.Tensor(np.zeros(4), requires_grad=False))),
    lambda a, b: dm.sum_all(dm.cosine_matrix(a, b)),
    lambda a, b: dm.sum_all(dm.abs_(dm.sub(a, b))),
    lambda a, b: dm.sum_all(dm.log(dm.add(dm.sigmoid(dm.matmul(a, b)), 0.1))),
])
def test_composites_match_finite_differences(make):
    rng = np.random.default_rng(42)
    a = T(rng.uniform(-1, 1, (4, 4)))
    b = T(rng.uniform(-1, 1, (4, 4)))
    report = dm.check_gradients(lambda ts: make(ts[0], ts[1]), [a, b])
    assert report.passed, report.summary()


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(0, 100_000))
def test_random_dims_gradcheck(n, d, seed):
    rng = np.random.default_rng(seed)
    a = T(rng.uniform(-1, 1, (n, d)))
    g = T(rng.uniform(0.5, 1.5, d))
    b = T(rng.uniform(-0.5, 0.5, d))

    def f(ts):
        x = dm.layer_norm_rows(ts[0], ts[1], ts[2])
        return dm.sum_all(dm.mul(dm.softmax_rows(x), x))

    report = dm.check_gradients(f, [a, g, b])
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# the checker itself
# ---------------------------------------------------------------------------


def test_checker_reports_injected_fault():
    x = T([0.5, -0.3], rg=True)

    def faulty(ts):
        t = ts[0]
        out = dm.Tensor(t.values * 2.0, requires_grad=True)
        nodes = dm._nodes()
        if nodes is not None:
            def fn():
                if out.grad is not None:
                    # deliberately wrong: analytic gradient scaled by 1.1
                    dm._acc_new(t, out.grad * 2.0 * 1.1)
            nodes.append(fn)
        return dm.sum_all(out)

    report = dm.check_gradients(faulty, [x])
    assert not report.passed
    assert report.max_rel_error > report.tolerance


def test_checker_zero_function():
    x = T([1.0, 2.0], rg=True)
    report = dm.check_gradients(lambda ts: dm.sum_all(dm.scale(ts[0], 0.0)), [x])
    assert report.passed
    assert report.max_rel_error == 0.0


def test_checker_smooth_composite():
    rng = np.random.default_rng(9)
    a = T(rng.uniform(-1, 1, (3, 5)))
    b = T(rng.uniform(-1, 1, (5, 4)))
    report = dm.check_gradients(
        lambda ts: dm.sum_all(dm.softmax_rows(dm.matmul(ts[0], ts[1]))), [a, b])
    assert report.passed
    assert report.max_rel_error < 1e-4


def test_structural_ops_match_finite_differences():
    rng = np.random.default_rng(21)
    v = T(rng.uniform(-1, 1, 6))
    m = T(rng.uniform(-1, 1, (2, 3)))

    def f(ts):
        u = dm.unit_vec(ts[0])
        r = dm.reshape(ts[1], (6,))
        c = dm.clip(dm.add(u, r), lo=-0.75, hi=0.75)
        return dm.sum_all(dm.mul(c, c))

    report = dm.check_gradients(f, [v, m])
    assert report.passed, report.summary()


def test_unit_vec_normalizes():
    out = dm.unit_vec(T([3.0, 4.0]))
    assert np.allclose(out.values, [0.6, 0.8], atol=1e-12)
    with pytest.raises(ValueError):
        dm.unit_vec(T(np.ones((2, 2))))
