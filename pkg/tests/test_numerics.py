import numpy as np
import pytest

from core import numerics as nx
from core.errors import DimensionError, DomainError, GradCheckError
from core.numerics import DualTensor, grad_check


def test_linear_vector_and_rows_agree():
    rng = np.random.default_rng(0)
    W, b = rng.standard_normal((3, 5)), rng.standard_normal(3)
    X = rng.standard_normal((4, 5))
    rows = nx.linear(X, W, b)
    assert rows.shape == (4, 3)
    np.testing.assert_allclose(rows[2], nx.linear(X[2], W, b), rtol=0, atol=1e-12)


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"x\(4,\).*W\(3, 5\)"):
        nx.linear(np.zeros(4), np.zeros((3, 5)), np.zeros(3))


def test_sigmoid_is_stable_at_extremes():
    s = nx.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(s))
    assert s.tolist() == [0.0, 0.5, 1.0]


def test_softmax_sums_to_one_and_survives_large_logits():
    p = nx.softmax(np.array([1000.0, 999.0, -1000.0]))
    assert abs(p.sum() - 1.0) <= 1e-12
    assert p[0] > p[1] > p[2]


def test_softmax_of_empty_vector_is_a_domain_error():
    with pytest.raises(DomainError):
        nx.softmax(np.zeros(0))


def test_cosine_guards_zero_norm_and_is_scale_invariant():
    a = np.array([1.0, 2.0, 3.0])
    assert nx.cosine_sim(a, np.zeros(3)) == 0.0
    assert nx.cosine_sim(a, a) == pytest.approx(1.0)
    assert nx.cosine_sim(a, 7.5 * a) == pytest.approx(1.0)
    assert nx.cosine_sim(a, -a) == pytest.approx(-1.0)


def test_cosine_rows_matches_cosine_sim_bitwise():
    rng = np.random.default_rng(3)
    E = rng.standard_normal((50, 7))
    E[4] = 0.0
    q = rng.standard_normal(7)
    rows = nx.cosine_rows(E, q)
    assert rows.tolist() == [nx.cosine_sim(e, q) for e in E]


# ---------- backward kernels against finite differences ----------
def _check_unary(op, op_backward, x):
    c = np.random.default_rng(1).standard_normal(x.shape)
    p = DualTensor(x)
    p.grad[...] = op_backward(op(p.value), c)
    report = grad_check(lambda: float(np.sum(c * op(p.value))), [p], step=1e-6)
    assert report.passed(1e-6), report.per_param


def test_tanh_backward():
    _check_unary(nx.tanh, nx.tanh_backward, np.linspace(-2, 2, 9))


def test_sigmoid_backward():
    _check_unary(nx.sigmoid, nx.sigmoid_backward, np.linspace(-4, 4, 9))


def test_softmax_backward():
    _check_unary(nx.softmax, nx.softmax_backward, np.array([0.3, -1.2, 2.0, 0.0]))


def test_linear_backward():
    rng = np.random.default_rng(2)
    x, W, b = (DualTensor(rng.standard_normal(s)) for s in [(4, 5), (3, 5), (3,)])
    g_out = 2.0 * nx.linear(x.value, W.value, b.value)
    x.grad[...], W.grad[...], b.grad[...] = nx.linear_backward(x.value, W.value, g_out)
    report = grad_check(lambda: float(np.sum(nx.linear(x.value, W.value, b.value) ** 2)),
                        [x, W, b], step=1e-6, names=["x", "W", "b"])
    assert report.passed(1e-6), report.per_param
    assert report.n_checked == 20 + 15 + 3


def test_cosine_backward():
    rng = np.random.default_rng(4)
    a, b = DualTensor(rng.standard_normal(6)), DualTensor(rng.standard_normal(6))
    a.grad[...], b.grad[...] = nx.cosine_sim_backward(a.value, b.value, 3.0)
    report = grad_check(lambda: 3.0 * nx.cosine_sim(a.value, b.value), [a, b], step=1e-6)
    assert report.passed(1e-6), report.per_param


def test_grad_check_samples_entries_when_asked():
    p = DualTensor(np.ones(100))
    p.grad[...] = 2.0
    report = grad_check(lambda: float(2.0 * np.sum(p.value)), [p], max_entries=10)
    assert report.n_checked == 10
    assert report.passed(1e-6)


def test_grad_check_rejects_nondeterministic_graph():
    rng = np.random.default_rng(0)
    with pytest.raises(GradCheckError):
        grad_check(lambda: float(rng.standard_normal()), [DualTensor(np.zeros(2))])


def test_grad_check_flags_a_wrong_gradient():
    p = DualTensor(np.array([1.0, 2.0]))
    p.grad[...] = [5.0, 5.0]
    report = grad_check(lambda: float(np.sum(p.value ** 2)), [p])
    assert not report.passed(1e-4)


def test_grad_check_reports_its_floor():
    p = DualTensor(np.zeros(1))
    p.grad[...] = 1e-9                       # true gradient of a constant is 0
    loose = grad_check(lambda: 0.0, [p])
    assert loose.floor == 1e-2 and loose.passed(1e-6)
    strict = grad_check(lambda: 0.0, [p], floor=1e-12)
    assert strict.floor == 1e-12 and not strict.passed(1e-6)
    with pytest.raises(DomainError, match="floor"):
        grad_check(lambda: 0.0, [p], floor=0.0)


def _linear_case(rng):
    m, k, n = rng.integers(1, 6, size=3)
    x, W, b = (DualTensor(rng.standard_normal(s)) for s in [(m, k), (n, k), (n,)])
    c = rng.standard_normal((m, n))
    x.grad[...], W.grad[...], b.grad[...] = nx.linear_backward(x.value, W.value, c)
    return lambda: float(np.sum(c * nx.linear(x.value, W.value, b.value))), [x, W, b]


def _unary_case(op, op_backward, scale):
    def case(rng):
        n = int(rng.integers(1, 9))
        x = DualTensor(scale * rng.standard_normal(n))
        c = rng.standard_normal(n)
        x.grad[...] = op_backward(op(x.value), c)
        return lambda: float(np.sum(c * op(x.value))), [x]
    return case


def _cosine_case(rng):
    n = int(rng.integers(2, 9))
    a, b = DualTensor(rng.standard_normal(n)), DualTensor(rng.standard_normal(n))
    g = float(rng.standard_normal())
    a.grad[...], b.grad[...] = nx.cosine_sim_backward(a.value, b.value, g)
    return lambda: g * nx.cosine_sim(a.value, b.value), [a, b]


RANDOM_CASES = {
    "linear": _linear_case,
    "sigmoid": _unary_case(nx.sigmoid, nx.sigmoid_backward, 3.0),
    "tanh": _unary_case(nx.tanh, nx.tanh_backward, 2.0),
    "softmax": _unary_case(nx.softmax, nx.softmax_backward, 2.0),
    "cosine": _cosine_case,
}


@pytest.mark.parametrize("op", list(RANDOM_CASES))
def test_adjoints_match_finite_differences_on_hundred_random_instances(op):
    rng = np.random.default_rng(100)
    worst = 0.0
    for _ in range(100):
        graph, params = RANDOM_CASES[op](rng)
        worst = max(worst, grad_check(graph, params, step=1e-5).max_rel_error)
    assert worst <= 1e-5


def test_ops_on_large_finite_inputs_stay_finite():
    big = np.array([1e300, -1e300, 3.0, 0.0])
    for out in (nx.sigmoid(big), nx.tanh(big), nx.softmax(big),
                nx.sigmoid_backward(nx.sigmoid(big), big / 1e10), nx.tanh_backward(nx.tanh(big), big / 1e10),
                nx.softmax_backward(nx.softmax(big), np.ones(4)),
                nx.linear(np.full(3, 1e100), np.ones((2, 3)), np.zeros(2)),
                *nx.cosine_sim_backward(big, big[::-1], 1.0),
                nx.cosine_rows(np.vstack([big, big[::-1], np.ones(4)]), big)):
        assert np.all(np.isfinite(out)), out
    assert nx.cosine_sim(big, big) == pytest.approx(1.0, abs=1e-12)
    assert -1.0 <= nx.cosine_sim(big, big[::-1]) <= 1.0


def test_cosine_rows_matches_cosine_sim_bitwise_for_huge_rows():
    rng = np.random.default_rng(5)
    E = rng.standard_normal((6, 4))
    E[2] *= 1e200
    q = rng.standard_normal(4)
    assert nx.cosine_rows(E, q).tolist() == [nx.cosine_sim(e, q) for e in E]
    assert nx.cosine_rows(E, 1e250 * q).tolist() == [nx.cosine_sim(e, 1e250 * q) for e in E]


def test_cosine_is_symmetric_and_scale_invariant_on_random_pairs():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = int(rng.integers(1, 10))
        a, b = rng.standard_normal(n), rng.standard_normal(n)
        c = nx.cosine_sim(a, b)
        assert abs(nx.cosine_sim(b, a) - c) <= 1e-12
        for alpha in (1e-6, 0.37, 5.0, 1e6, 1e200):
            assert abs(nx.cosine_sim(alpha * a, b) - c) <= 1e-12
        assert -1.0 <= c <= 1.0


def test_sigmoid_saturates_to_one():
    assert abs(float(nx.sigmoid(np.array(50.0))) - 1.0) <= 1e-15


def test_softmax_hand_case():
    p = nx.softmax(np.array([np.log(2.0), 0.0]))
    np.testing.assert_allclose(p, [2.0 / 3.0, 1.0 / 3.0], rtol=0, atol=1e-15)
