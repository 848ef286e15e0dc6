from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from freqkv.budget import (
    DYNAMIC,
    UNIFORM,
    LayerEnergyRatio,
    allocate,
    global_budget,
    largest_remainder,
    layer_energy_ratio,
)
from freqkv.outlier import BudgetError, LayerKv

from oracles import naive_dct, redistribute_caps


def one_channel(k, v=None):
    k = np.asarray(k, dtype=float).reshape(1, -1, 1)
    v = np.zeros_like(k) if v is None else np.asarray(v, dtype=float).reshape(1, -1, 1)
    return LayerKv(k, v)


def test_constant_layer_has_no_high_band():
    layer = LayerKv(np.full((2, 8, 3), 1.5), np.full((2, 8, 3), -0.5))
    assert layer_energy_ratio(layer, 0.0).r == pytest.approx(0.0, abs=1e-12)


def test_impulse_ratio_by_hand():
    # DC coefficient of [1,0,0,0] is 0.5, so DC power 0.25 of total 1
    assert naive_dct([1, 0, 0, 0])[0] == pytest.approx(0.5)
    r = layer_energy_ratio(one_channel([1, 0, 0, 0]), 0.0)
    assert r.r_k == pytest.approx(0.75, abs=1e-12)
    assert r.r_v == 0.0  # zero-energy tensor
    assert r.r == r.r_k + r.r_v


def test_gamma_one_gives_zero_ratio():
    rng = np.random.default_rng(0)
    layer = LayerKv(rng.standard_normal((2, 30, 4)), rng.standard_normal((2, 30, 4)))
    assert layer_energy_ratio(layer, 1.0).r == 0.0


def test_ratio_components_bounded():
    rng = np.random.default_rng(1)
    layer = LayerKv(rng.standard_normal((2, 30, 4)), rng.standard_normal((2, 30, 4)), 5)
    r = layer_energy_ratio(layer, 0.2)
    assert 0 <= r.r_k <= 1 and 0 <= r.r_v <= 1 and r.layer_index == 5


@pytest.mark.parametrize("rho,total,want", [(0.2, 100, 20), (0.5, 3, 2), (0.1, 30, 3), (1.0, 7, 7), (0.05, 10, 1)])
def test_global_budget(rho, total, want):
    assert global_budget(rho, total) == want


def test_proportional_example():
    a = allocate([0.2, 0.3, 0.5], 1 / 3, 100, [0, 0, 0])
    assert a.total_budget == 100
    assert a.quotas == [20, 30, 50]


def test_equal_ratios_lower_index_gets_remainder():
    # total_budget = round(rho * N * L) = 10 with N = 10, L = 3
    a = allocate([1, 1, 1], 1 / 3, 10)
    assert a.total_budget == 10
    assert a.quotas == [4, 3, 3]


def test_cap_redistribution_matches_reference_loop():
    r = [0.9, 0.05, 0.03, 0.02]
    shares = redistribute_caps(r, 200, 100)
    want = [round(s) for s in shares]
    assert shares == pytest.approx([100, 50, 30, 20])
    a = allocate(r, 0.5, 100)
    assert a.total_budget == 200
    assert a.quotas == want == [100, 50, 30, 20]


def test_floors_raise_small_layers():
    a = allocate([0.0, 1.0, 1.0], 0.2, 100, [12, 12, 12])
    assert a.total_budget == 60
    assert a.quotas == [12, 24, 24]


def test_zero_weight_layers_absorb_leftover_after_caps():
    a = allocate([1.0, 0.0, 0.0], 0.5, 10, [0, 2, 0])
    assert sum(a.quotas) == 15
    assert a.quotas[0] == 10
    assert a.quotas[1] >= 2


def test_infeasible_floors():
    with pytest.raises(BudgetError):
        allocate([1, 1], 0.1, 100, [12, 12])


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.2])
def test_bad_rho(bad):
    with pytest.raises(ValueError):
        allocate([1, 1], bad, 10)


def test_bad_mode_and_shapes():
    with pytest.raises(ValueError):
        allocate([1, 1], 0.5, 10, mode="greedy")
    with pytest.raises(ValueError):
        allocate([1, 1], 0.5, 10, [0])
    with pytest.raises(ValueError):
        allocate([1, 1], 0.5, [10, 10, 10])
    with pytest.raises(ValueError):
        allocate([1, 1], 0.5, 10, [11, 0])


def test_all_zero_ratios_fall_back_to_uniform():
    assert allocate([0, 0, 0, 0], 0.25, 10).quotas == allocate([5, 1, 2, 3], 0.25, 10, mode=UNIFORM).quotas


def test_variable_layer_lengths():
    a = allocate([1, 1], 0.5, [10, 30])
    assert a.total_budget == 20
    assert a.quotas == [10, 10]
    a = allocate([3, 1], 0.5, [4, 30])
    assert a.quotas == [4, 13]


def test_largest_remainder():
    assert largest_remainder([Fraction(1, 2)] * 4, 2) == [1, 1, 0, 0]
    assert largest_remainder([Fraction(7, 3), Fraction(8, 3)], 5) == [2, 3]


@st.composite
def instances(draw):
    n_layers = draw(st.integers(1, 64))
    n = draw(st.integers(1, 4096))
    rho = draw(st.floats(0.001, 1.0))
    total = global_budget(rho, n * n_layers)
    r = draw(st.lists(st.floats(0, 2), min_size=n_layers, max_size=n_layers))
    floors = draw(st.lists(st.integers(0, n), min_size=n_layers, max_size=n_layers))
    # shrink floors until feasible
    while sum(floors) > total:
        i = int(np.argmax(floors))
        floors[i] //= 2
    return r, rho, n, floors


@settings(max_examples=300, deadline=None)
@given(instances(), st.sampled_from([DYNAMIC, UNIFORM]))
def test_budget_exact_and_bounded(inst, mode):
    r, rho, n, floors = inst
    a = allocate(r, rho, n, floors, mode)
    assert sum(a.quotas) == a.total_budget == global_budget(rho, n * len(r))
    for q, f in zip(a.quotas, floors):
        assert f <= q <= n


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=1, max_size=20), st.integers(1, 1000),
       st.floats(0.01, 1.0), st.integers(1, 50))
def test_scale_invariance(r, n, rho, c):
    assume(sum(r) > 0)
    a = allocate([float(x) for x in r], rho, n)
    b = allocate([float(x * c) for x in r], rho, n)
    assert a.quotas == b.quotas


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 30), st.floats(0, 2), st.integers(1, 500), st.floats(0.01, 1.0))
def test_equal_ratios_equal_uniform(n_layers, r, n, rho):
    dyn = allocate([r] * n_layers, rho, n, mode=DYNAMIC)
    uni = allocate([r] * n_layers, rho, n, mode=UNIFORM)
    assert dyn.quotas == uni.quotas


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 2), min_size=2, max_size=20), st.floats(0.01, 0.3))
def test_monotone_when_unclamped(r, rho):
    n = 100_000  # large enough that nothing hits its cap
    a = allocate(r, rho, n)
    for i in range(len(r)):
        for j in range(len(r)):
            if r[i] > r[j]:
                assert a.quotas[i] >= a.quotas[j]


def test_energy_ratio_objects_accepted():
    ratios = [LayerEnergyRatio(0.1, 0.1, 0), LayerEnergyRatio(0.3, 0.3, 1)]
    assert allocate(ratios, 0.5, 8).quotas == [2, 6]
