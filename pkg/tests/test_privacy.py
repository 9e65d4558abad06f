import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from feddm.privacy import (
    DpBudget, DpMechanismParams, check_budget, compose_parallel, epsilon_for_sigma, gaussian_sigma,
    simplified_sigma, tailbound_sigma,
)

eps_s = st.floats(0.05, 20)
delta_s = st.floats(1e-12, 0.5)


def test_gaussian_sigma_reference_value():
    # sqrt(2 ln 125000) = 4.8448...
    assert gaussian_sigma(1.0, 1e-5) == pytest.approx(math.sqrt(2 * math.log(125000)), abs=1e-15)
    assert gaussian_sigma(DpBudget(1.0, 1e-5)) == pytest.approx(4.8455, abs=1e-3)


@given(eps_s, delta_s)
def test_gaussian_sigma_homogeneous_in_epsilon(eps, delta):
    assert gaussian_sigma(2 * eps, delta) == gaussian_sigma(eps, delta) / 2


def test_gaussian_sigma_monotone_in_delta():
    deltas = [1e-9, 1e-6, 1e-3, 0.1, 0.5, 0.9, 0.999999]
    sigmas = [gaussian_sigma(1.0, d) for d in deltas]
    assert all(a > b for a, b in zip(sigmas, sigmas[1:]))
    # approaches sqrt(2 ln 1.25) as delta -> 1; the formula's zero sits at the 1.25 limit
    assert sigmas[-1] == pytest.approx(math.sqrt(2 * math.log(1.25)), rel=1e-5)


def test_budget_validation():
    for eps, delta in [(0, 1e-5), (-1, 1e-5), (1, 0), (1, 1), (1, 1.25)]:
        with pytest.raises(ValueError):
            DpBudget(eps, delta)
    with pytest.raises(ValueError):
        DpMechanismParams(sigma=1, clip=0, q=0.1, steps=1)
    with pytest.raises(ValueError):
        DpMechanismParams(sigma=1, clip=1, q=0, steps=1)


def test_tailbound_equals_simplified_at_boundary():
    # (eps, q, T) with T q^2 = eps / 2 exactly in binary floating point
    for eps, q, steps in [(1.0, 0.5, 2), (2.0, 0.5, 4), (0.5, 0.25, 4), (8.0, 0.5, 16)]:
        assert steps * q * q == eps / 2
        for delta in (1e-3, 1e-5, 1e-6):
            assert tailbound_sigma(DpBudget(eps, delta), q, steps) == math.sqrt(2 * math.log(1 / delta) / eps)
    b = DpBudget(1.0, 1e-5)
    assert tailbound_sigma(b, 0.1, 50) == pytest.approx(simplified_sigma(b), rel=1e-15)


def test_tailbound_reference_value():
    assert tailbound_sigma(2.0, 0.01, 100, delta=1e-5) == pytest.approx(
        math.sqrt(math.log(1e-5) / (0.01 - 2)), rel=1e-14)
    # the hand-rounded reference 2.4051 is within 2e-4 of the exact 2.40528
    assert tailbound_sigma(2.0, 0.01, 100, delta=1e-5) == pytest.approx(2.4051, abs=5e-4)


def test_tailbound_monotone_and_below_simplified():
    b = DpBudget(1.0, 1e-5)
    sig = [tailbound_sigma(b, 0.01, t) for t in (10, 100, 1000, 4000)]
    assert all(a < c for a, c in zip(sig, sig[1:]))
    assert all(s < simplified_sigma(b) for s in sig)
    with pytest.raises(ValueError, match="T\\*q\\^2"):
        tailbound_sigma(b, 0.1, 100)


def test_check_budget():
    assert check_budget(0.1, 50, 1.0)
    assert not check_budget(0.1, 51, 1.0)
    assert check_budget(0.0, 10**9, 1e-9)


def test_epsilon_for_sigma_inverts_simplified():
    b = DpBudget(0.7, 1e-6)
    assert epsilon_for_sigma(simplified_sigma(b), b.delta) == pytest.approx(0.7, rel=1e-14)
    with pytest.raises(ValueError):
        epsilon_for_sigma(0.0, 1e-5)


def test_compose_parallel():
    a, b = DpBudget(1, 1e-5), DpBudget(2, 1e-6)
    assert compose_parallel([a, b]) == DpBudget(2, 1e-5)
    assert compose_parallel([a]) == a
    assert compose_parallel([a, a]) == a
    with pytest.raises(ValueError):
        compose_parallel([])


@given(st.lists(st.tuples(eps_s, delta_s), min_size=1, max_size=6))
def test_compose_parallel_properties(pairs):
    budgets = [DpBudget(e, d) for e, d in pairs]
    c = compose_parallel(budgets)
    assert c == compose_parallel(budgets[::-1])
    assert compose_parallel([c, c]) == c
    bigger = compose_parallel(budgets + [DpBudget(c.epsilon * 2, c.delta)])
    assert bigger.epsilon >= c.epsilon and bigger.delta >= c.delta
