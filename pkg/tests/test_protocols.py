import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfmac.model import Ternary
from sfmac.protocols import (A1, A2, A3, EpsFunction, HFunction, TernaryAdditive,
                             TernaryMultiplicative, a1_probability, a1_update, a2_update,
                             a3_probability, geometric_grid, protocol_from_dict,
                             protocol_to_dict, ternary_update, validate_eps, validate_h)

SQRT = HFunction("sqrt")
LOG = HFunction("log")


# -- A1 rules ---------------------------------------------------------------

@pytest.mark.parametrize("S,I,beta,expected", [
    (1.0, 1, 0.9, 1.0), (10.0, 0, 0.9, 0.09), (10.0, 1, 0.9, 0.1),
])
def test_a1_probability(S, I, beta, expected):
    assert a1_probability(S, I, beta) == pytest.approx(expected, rel=1e-15)


def test_a1_probability_rejects_small_S():
    with pytest.raises(ValueError):
        a1_probability(0.99, 1, 0.9)


@pytest.mark.parametrize("S,J,I,expected", [
    (10.0, 0, 0, 13.0), (10.0, 0, 1, 13.0), (10.0, 1, 0, 25.0), (2.0, 1, 1, 1.0), (40.0, 1, 1, 25.0),
])
def test_a1_update(S, J, I, expected):
    assert a1_update(S, J, I, C=3.0, D=5.0) == expected


@given(st.floats(1.0, 1e9), st.integers(0, 1), st.integers(0, 1),
       st.floats(0.01, 100.0), st.floats(0.01, 100.0))
def test_a1_increments_are_restricted(S, J, I, C, D):
    S2 = a1_update(S, J, I, C, D)
    assert S2 >= 1
    allowed = {S + C, S + C * D, S - C * D, 1.0}
    assert S2 in allowed


@given(st.floats(1.0, 1e9), st.integers(0, 1), st.floats(1e-6, 1.0, exclude_max=True))
def test_a1_probability_in_unit_interval(S, I, beta):
    p = a1_probability(S, I, beta)
    assert 0 < p <= 1


# -- A2 / A3 rules ----------------------------------------------------------

def test_a2_update_examples():
    assert a2_update(1.0, 1, 1, 2.0, LOG) == 1.0
    assert a2_update(math.e**2, 1, 0, 2.0, LOG) == pytest.approx(math.e**2 + 2, rel=1e-15)
    assert a2_update(5.0, 0, 0, 2.0, LOG) == 7.0
    assert a2_update(5.0, 0, 1, 2.0, SQRT) == 7.0
    assert a2_update(100.0, 1, 1, 2.0, SQRT) == 91.0


def test_a2_separate_down_function():
    assert a2_update(100.0, 1, 1, 2.0, SQRT, h_down=LOG) == pytest.approx(100 - math.log(100))
    assert a2_update(100.0, 1, 0, 2.0, SQRT, h_down=LOG) == 109.0


def test_a3_probability_examples():
    eps = EpsFunction("power", 0.25)
    assert a3_probability(1.0, 1, eps) == 1.0
    assert a3_probability(100.0, 0, eps) == pytest.approx((1 - 100**-0.25) / 100, rel=1e-14)
    assert a3_probability(100.0, 0, eps) == pytest.approx(0.0068377, abs=1e-7)
    assert a3_probability(100.0, 1, eps) == 0.01


@settings(max_examples=200)
@given(st.floats(1.0, 1e9), st.integers(0, 1), st.integers(0, 1))
def test_all_binary_specs_keep_invariants(S, J, I):
    specs = [
        A1(C=2.0, D=10.0, beta=0.9),
        A2(C=2.0, beta=0.9, h=SQRT),
        A2(C=2.0, beta=0.9, h=LOG, h_down=SQRT),
        A3(C=2.0, h=SQRT, eps=EpsFunction("power", 0.125)),
    ]
    for spec in specs:
        p = spec.probability(S, I)
        assert 0 < p <= 1
        assert spec.update(S, J, I) >= 1


@pytest.mark.parametrize("make", [
    lambda: A1(C=0.0, D=1.0, beta=0.5), lambda: A1(C=1.0, D=-1.0, beta=0.5),
    lambda: A1(C=1.0, D=1.0, beta=1.0), lambda: A1(C=1.0, D=1.0, beta=0.5, S_init=0.5),
    lambda: A2(C=1.0, beta=0.0, h=SQRT), lambda: A3(C=-1.0, h=SQRT, eps=EpsFunction("constant", 0.1)),
    lambda: HFunction("power", 1.5), lambda: HFunction("cube"), lambda: EpsFunction("power", 0.0),
    lambda: TernaryMultiplicative(up=0.5), lambda: TernaryAdditive(p_min=0.5, p_init=0.1),
])
def test_invalid_parameters(make):
    with pytest.raises(ValueError):
        make()


# -- ternary baselines ------------------------------------------------------

def test_ternary_examples():
    mult = TernaryMultiplicative(up=2.0, down=0.5)
    assert ternary_update(0.1, Ternary.EMPTY, mult) == pytest.approx(0.2)
    assert ternary_update(0.1, Ternary.SUCCESS, mult) == 0.1
    assert ternary_update(0.1, Ternary.COLLISION, mult) == pytest.approx(0.05)
    assert ternary_update(0.8, Ternary.EMPTY, mult) == 1.0
    add = TernaryAdditive(step_up=0.01, step_down=0.01)
    assert ternary_update(0.005, Ternary.COLLISION, add) == add.p_min
    assert ternary_update(0.5, Ternary.EMPTY, add) == pytest.approx(0.51)


@given(st.floats(1e-9, 1.0), st.sampled_from(list(Ternary)))
def test_ternary_stays_in_bounds(p, fb):
    for spec in (TernaryMultiplicative(), TernaryAdditive()):
        q = ternary_update(p, fb, spec)
        assert spec.p_min <= q <= spec.p_max
        S2 = spec.update(1.0 / p, fb, 0)
        assert S2 >= 1 and 0 < spec.probability(S2, 1) <= 1


def test_ternary_ignores_coin():
    spec = TernaryMultiplicative()
    assert spec.probability(4.0, 0) == spec.probability(4.0, 1) == 0.25
    assert spec.update(4.0, Ternary.EMPTY, 0) == spec.update(4.0, Ternary.EMPTY, 1)


# -- validators -------------------------------------------------------------

@pytest.mark.parametrize("h", [SQRT, LOG, HFunction("power", 0.5), HFunction("power", 0.3)])
def test_validate_h_accepts_class_members(h):
    rep = validate_h(h)
    assert rep.passed, rep.failures


def test_validate_h_rejects_linear():
    rep = validate_h(HFunction("linear", 2.0))
    assert not rep.passed
    assert "h(x)/x->0" in rep.failures


def test_constant_step_is_not_a_class_member():
    # the A1 step C*D extended as a constant h fails h(1) = 0
    rep = validate_h(HFunction("constant", 3.0 * 5.0))
    assert "h(1)=0" in rep.failures


def test_validate_h_tabulated_sqrt_agrees():
    xs = tuple(np.geomspace(1, 1e8, 400))
    tab = HFunction("tabulated", xs=xs, ys=tuple(np.sqrt(xs) - 1))
    assert validate_h(tab).passed
    assert tab(1.0) == 0.0


def test_validate_h_bad_grid():
    with pytest.raises(ValueError):
        validate_h(SQRT, grid=[1.0])
    with pytest.raises(ValueError):
        validate_h(SQRT, grid=[1.0, 5.0, 3.0])


def test_validate_eps_examples():
    assert validate_eps(SQRT, EpsFunction("power", 1 / 8)).passed
    rep = validate_eps(LOG, EpsFunction("power", 1 / 2))
    assert not rep.passed and "h*eps^2->inf" in rep.failures
    rep = validate_eps(SQRT, EpsFunction("constant", 0.6))
    assert "eps in (0,1/2]" in rep.failures


def test_eps_power_is_capped():
    eps = EpsFunction("power", 0.125)
    assert eps(1.0) == 0.5
    assert eps(1e8) == pytest.approx(1e8 ** -0.125)
    assert np.all(eps(geometric_grid()) <= 0.5)


def test_report_serializes():
    d = validate_h(SQRT).to_dict()
    assert d["passed"] is True and set(d["checks"]) >= {"h(1)=0", "h(x)/x->0"}


# -- serialization ----------------------------------------------------------

@pytest.mark.parametrize("spec", [
    A1(C=2.5, D=100.0, beta=0.7, S_init=3.0),
    A2(C=2.0, beta=0.99, h=SQRT, h_down=LOG),
    A3(C=2.0, h=HFunction("power", 0.4), eps=EpsFunction("power", 0.1)),
    A3(C=2.0, h=HFunction("tabulated", xs=(1.0, 2.0, 4.0), ys=(0.0, 1.0, 1.5)),
       eps=EpsFunction("constant", 0.2)),
    TernaryMultiplicative(up=1.5, down=0.7), TernaryAdditive(step_up=0.02),
])
def test_protocol_dict_round_trip(spec):
    assert protocol_from_dict(protocol_to_dict(spec)) == spec


def test_unknown_class_rejected():
    with pytest.raises(ValueError):
        protocol_from_dict({"class": "A9"})


def test_with_params():
    spec = A1(C=2.0, D=10.0, beta=0.8)
    assert spec.with_params(D=20.0).D == 20.0
    assert spec.jump_scale == 20.0
    with pytest.raises(ValueError):
        spec.with_params(beta=2.0)
