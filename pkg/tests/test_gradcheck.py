import numpy as np
import pytest

from partialseg import losses as L
from partialseg.errors import NonFiniteLoss
from partialseg.gradcheck import (
    LOSS_NAMES,
    check,
    compare,
    finite_diff_gradient,
    random_case,
    run_suite,
)


def test_constant_function_has_zero_gradient():
    g = finite_diff_gradient(lambda a: 3.0, np.zeros((2, 2, 3)))
    assert (g == 0).all()


def test_linear_function_recovers_one_hot():
    a = np.random.default_rng(0).normal(size=(2, 3, 4))
    g = finite_diff_gradient(lambda x: x[1, 2, 0], a)
    expected = np.zeros_like(a)
    expected[1, 2, 0] = 1.0
    np.testing.assert_allclose(g, expected, atol=1e-10)


def test_quadratic_function():
    a = np.random.default_rng(1).normal(size=(3, 3))
    g = finite_diff_gradient(lambda x: float((x**2).sum()), a)
    np.testing.assert_allclose(g, 2 * a, atol=1e-9)


def test_oracle_recomputes_softmax_ce_gradient():
    p = np.array([[0.2, 0.3, 0.5]])
    g = finite_diff_gradient(lambda a: L.regular_ce(L.softmax(a), np.array([0])), np.log(p))
    np.testing.assert_allclose(g, [[-0.8, 0.3, 0.5]], atol=1e-7)


def test_subset_of_coordinates():
    a = np.zeros((2, 2))
    g = finite_diff_gradient(lambda x: float(x.sum()), a, coords=[(0, 1)])
    assert g[0, 1] == pytest.approx(1.0)
    assert np.isnan(g[0, 0]) and np.isnan(g[1, 1])


def test_nonfinite_loss_raises():
    with pytest.raises(NonFiniteLoss):
        finite_diff_gradient(lambda a: float("nan"), np.zeros(2))


def test_random_marginal_trial_passes():
    rng = np.random.default_rng(4)
    while True:
        fn, logits = random_case("marginal_ce", rng)
        if logits.shape[-1] == 4 and logits.shape[0] * logits.shape[1] >= 4:
            break
    assert check(fn, logits).passed


def test_random_exclusion_dice_trial_passes():
    fn, logits = random_case("exclusion_dice", np.random.default_rng(5))
    assert check(fn, logits).passed


def test_corrupted_gradient_is_caught():
    fn, logits = random_case("marginal_dice", np.random.default_rng(6))

    def corrupted(a):
        rep = fn(a)
        g = rep.gradient.copy()
        g[(0,) * (g.ndim - 1) + (1,)] += 0.1
        return L.LossReport(rep.value, g)

    rep = check(corrupted, logits)
    assert not rep.passed
    assert rep.worst_coordinate == ((0,) * (logits.ndim - 1), 1)
    assert rep.max_abs_error == pytest.approx(0.1, rel=1e-3)


def test_compare_uses_relative_floor():
    rep = compare(np.array([1e-8]), np.array([2e-8]))
    # |diff| = 1e-8 over floor 1e-3
    assert rep.max_rel_error == pytest.approx(1e-5)
    assert rep.passed


def test_report_passed_is_either_tolerance():
    big = compare(np.array([10.0]), np.array([10.0005]))
    assert big.max_rel_error < 1e-4 and big.max_abs_error > 1e-7 and big.passed


def test_run_suite_summary_shape():
    out = run_suite(["exclusion_ce"], trials=3, seed=1)
    assert set(out) == {"exclusion_ce"}
    assert out["exclusion_ce"]["trials"] == 3 and out["exclusion_ce"]["passed"]
    with pytest.raises(ValueError):
        run_suite(["nope"], trials=1)


@pytest.mark.parametrize("name", LOSS_NAMES)
def test_random_cases_respect_size_bounds(name):
    rng = np.random.default_rng(9)
    for _ in range(20):
        _, logits = random_case(name, rng)
        assert 2 <= logits.shape[-1] <= 6
        assert logits.shape[0] <= 8 and logits.shape[1] <= 8
