import itertools
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from offline_vcg.mdp import (
    InputError,
    MixturePolicy,
    RewardProfile,
    StagePolicy,
    m2_mdp,
    m2_profile,
    policy_value,
    random_instance,
)
from offline_vcg.mechanism import (
    ConstantFamily,
    GridFamily,
    MechanismOutcome,
    RandomFamily,
    ScalarFamily,
    agent_utility,
    check_desiderata,
    exact_vcg,
    family_from_spec,
    seller_utility,
    subopt_agent,
    subopt_seller,
    subopt_welfare,
    vcg_price,
)


@dataclass(frozen=True)
class ListFamily:
    """Explicit list of report tables."""

    tables: tuple

    def size(self, shape):
        return len(self.tables)

    def generate(self, truthful):
        return np.stack([np.asarray(t, dtype=float) for t in self.tables])

    def describe(self):
        return {"kind": "list", "count": len(self.tables)}


def brute_optimal_value(mdp, reward):
    """Max over deterministic Markov policies, by enumeration."""
    H, S, A = mdp.shape
    return max(policy_value(mdp, reward, StagePolicy.deterministic(np.array(acts).reshape(H, S), A))
               for acts in itertools.product(range(A), repeat=H * S))


def brute_vcg_prices(mdp, prof, policy):
    return np.array([brute_optimal_value(mdp, prof.exclude(i)) - policy_value(mdp, prof.exclude(i), policy)
                     for i in range(prof.n)])


# --- prices and utilities ---------------------------------------------------


def test_single_agent_zero_seller_price_is_zero(rng):
    mdp, _ = random_instance(rng, 3, 2, 2, 1)
    prof = RewardProfile(np.zeros((2, 3, 2)), rng.random((1, 2, 3, 2)))
    pol = StagePolicy(rng.dirichlet(np.ones(2), size=(2, 3)))
    assert vcg_price(mdp, prof, pol, 0) == 0.0


def test_m2_single_agent():
    out = exact_vcg(m2_mdp(), m2_profile(1))
    assert out.prices.tolist() == [0.0]
    assert policy_value(m2_mdp(), m2_profile(1).total(), out.policy) == 1.0
    assert agent_utility(m2_mdp(), m2_profile(1).agent(0), out.policy, 0.0) == 1.0


def test_m2_externality_prices():
    mdp, prof = m2_mdp(), m2_profile(2)
    out = exact_vcg(mdp, prof)
    np.testing.assert_array_equal(out.policy.probs.argmax(-1), np.zeros((2, 2)))
    np.testing.assert_allclose(out.prices, [0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(out.prices, brute_vcg_prices(mdp, prof, out.policy), atol=1e-12)
    assert policy_value(mdp, prof.total(), out.policy) == 2.0
    assert agent_utility(mdp, prof.agent(1), out.policy, out.prices[1]) == 1.0
    assert seller_utility(mdp, prof.seller, out.policy, out.prices) == 1.0


def test_all_zero_rewards():
    prof = RewardProfile(np.zeros((2, 2, 2)), np.zeros((2, 2, 2, 2)), r_max=2.0)
    out = exact_vcg(m2_mdp(), prof)
    assert np.all(out.prices == 0)
    np.testing.assert_array_equal(out.policy.probs[..., 0], 1.0)
    assert agent_utility(m2_mdp(), prof.agent(0), out.policy, 0.0) == 0.0
    assert seller_utility(m2_mdp(), prof.seller, out.policy, out.prices) == 0.0


def test_seller_with_constant_cost():
    prof = RewardProfile(-np.ones((2, 2, 2)), m2_profile(2).agents, r_max=2.0)
    pol = StagePolicy.uniform(2, 2, 2)
    assert seller_utility(m2_mdp(), prof.seller, pol, [0.0, 1.0]) == -1.0


@given(st.integers(0, 2**32 - 1))
def test_prices_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    mdp, prof = random_instance(rng, 2, 2, 2, 3)
    out = exact_vcg(mdp, prof)
    np.testing.assert_allclose(out.prices, brute_vcg_prices(mdp, prof, out.policy), atol=1e-12)
    assert np.all(out.prices >= -1e-12)


def test_mixture_price_is_component_average():
    mdp, prof = m2_mdp(), m2_profile(2)
    a = StagePolicy.deterministic(np.zeros((2, 2), dtype=int), 2)
    b = StagePolicy.deterministic(np.ones((2, 2), dtype=int), 2)
    mix = MixturePolicy((a, b))
    expected = (vcg_price(mdp, prof, a, 1) + vcg_price(mdp, prof, b, 1)) / 2
    assert vcg_price(mdp, prof, mix, 1) == pytest.approx(expected)


def test_bad_agent_index():
    with pytest.raises(InputError):
        vcg_price(m2_mdp(), m2_profile(1), StagePolicy.uniform(2, 2, 2), 1)
    out = exact_vcg(m2_mdp(), m2_profile(1))
    with pytest.raises(InputError):
        subopt_agent(m2_mdp(), m2_profile(1), 2, out)


def test_outcome_validation():
    with pytest.raises(InputError):
        MechanismOutcome(StagePolicy.uniform(2, 2, 2), [0.0], "guessed")
    out = MechanismOutcome(StagePolicy.uniform(2, 2, 2), [0.0, 0.0])
    with pytest.raises(InputError):
        subopt_seller(m2_mdp(), m2_profile(1), out)


# --- suboptimality gaps ----------------------------------------------------


def test_subopt_welfare_examples():
    mdp = m2_mdp()
    assert subopt_welfare(mdp, m2_profile(1), exact_vcg(mdp, m2_profile(1)).policy) == 0.0
    assert subopt_welfare(mdp, m2_profile(1), StagePolicy.uniform(2, 2, 2)) == 0.5
    rng = np.random.default_rng(0)
    for _ in range(5):
        pol = StagePolicy(rng.dirichlet(np.ones(2), size=(2, 2)))
        assert subopt_welfare(mdp, m2_profile(2), pol) == pytest.approx(0.0, abs=1e-15)


def test_subopt_agent_examples():
    mdp, prof = m2_mdp(), m2_profile(1)
    exact = exact_vcg(mdp, prof)
    assert subopt_agent(mdp, prof, 0, exact) == 0.0
    uniform = StagePolicy.uniform(2, 2, 2)
    out = MechanismOutcome(uniform, [vcg_price(mdp, prof, uniform, 0)], "learned")
    assert subopt_agent(mdp, prof, 0, out) == 0.5
    assert subopt_agent(mdp, prof, 0, exact.shifted(0, 0.3)) == pytest.approx(0.3, abs=1e-15)


def test_subopt_seller_examples():
    mdp, prof = m2_mdp(), m2_profile(1)
    exact = exact_vcg(mdp, prof)
    assert subopt_seller(mdp, prof, exact) == 0.0
    uniform = StagePolicy.uniform(2, 2, 2)
    assert subopt_seller(mdp, prof, MechanismOutcome(uniform, [0.0], "learned")) == 0.0
    assert subopt_seller(mdp, prof, exact.shifted(0, -0.3)) == pytest.approx(0.3, abs=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_exact_outcome_has_zero_gaps(seed):
    rng = np.random.default_rng(seed)
    mdp, prof = random_instance(rng, 3, 2, 2, 2)
    out = exact_vcg(mdp, prof)
    assert abs(subopt_welfare(mdp, prof, out.policy)) <= 1e-12
    for i in range(prof.n):
        assert abs(subopt_agent(mdp, prof, i, out)) <= 1e-12
    assert abs(subopt_seller(mdp, prof, out)) <= 1e-12


# --- misreport families -------------------------------------------------------


def test_grid_family_shapes():
    truthful = np.full((2, 2, 2), 0.7)
    reports = GridFamily(max_cells=2).generate(truthful)
    assert reports.shape == (9, 2, 2, 2)
    assert np.all(reports.reshape(9, -1)[:, 2:] == 0.7)
    assert GridFamily().size((2, 2, 2)) == 3**8
    assert GridFamily().size((3, 4, 4)) == 3**9


def test_other_families():
    truthful = np.full((1, 2, 2), 0.5)
    r = RandomFamily(count=7, scale=1.0, seed=3).generate(truthful)
    assert r.shape == (7, 1, 2, 2) and r.min() >= 0 and r.max() <= 1
    np.testing.assert_array_equal(r, RandomFamily(count=7, scale=1.0, seed=3).generate(truthful))
    s = ScalarFamily((0.0, 1.0, 4.0)).generate(truthful)
    np.testing.assert_array_equal(s[:, 0, 0, 0], [0.0, 0.5, 1.0])
    assert ConstantFamily().generate(truthful).shape == (3, 1, 2, 2)


def test_family_from_spec():
    assert family_from_spec({"kind": "grid", "max_cells": 2}) == GridFamily((0.0, 0.5, 1.0), 2)
    assert family_from_spec({"kind": "scalar"}) == ScalarFamily()
    with pytest.raises(InputError):
        family_from_spec({"kind": "nope"})


# --- desiderata -----------------------------------------------------------


def test_m2_single_agent_desiderata():
    mdp, prof = m2_mdp(), m2_profile(1)
    fam = ListFamily((np.zeros((2, 2, 2)), prof.agent(0)))
    rep = check_desiderata(mdp, prof, fam)
    assert rep.welfare_gap == 0.0
    # no other agent can deviate, so IR is the truthful utility itself
    assert rep.min_agent_utility == 1.0
    # the family contains the truthful report, so the best gain is exactly 0
    assert rep.max_truthfulness_gain == 0.0
    lie = exact_vcg(mdp, prof.with_agent(0, np.zeros((2, 2, 2))))
    assert agent_utility(mdp, prof.agent(0), lie.policy, lie.prices[0]) - 1.0 == -1.0


def test_m2_externality_desiderata():
    rep = check_desiderata(m2_mdp(), m2_profile(2), GridFamily(max_cells=8))
    assert rep.welfare_gap == 0.0
    assert rep.min_agent_utility >= -1e-9
    assert rep.max_truthfulness_gain <= 1e-9
    assert [r["ir_profiles"] for r in rep.per_agent] == [1 + 3**8] * 2


@given(st.integers(0, 2**32 - 1))
def test_batched_check_matches_generic(seed):
    rng = np.random.default_rng(seed)
    mdp, prof = random_instance(rng, 2, 2, 2, 2)
    fam = GridFamily(max_cells=3)
    fast = check_desiderata(mdp, prof, fam)
    slow = check_desiderata(mdp, prof, fam, mechanism=lambda p: exact_vcg(mdp, p))
    assert fast.welfare_gap == pytest.approx(slow.welfare_gap, abs=1e-12)
    assert fast.min_agent_utility == pytest.approx(slow.min_agent_utility, abs=1e-12)
    assert fast.max_truthfulness_gain == pytest.approx(slow.max_truthfulness_gain, abs=1e-12)


def test_broken_mechanism_is_caught():
    mdp, prof = m2_mdp(), m2_profile(2)

    def pay_as_bid(p):
        out = exact_vcg(mdp, p)
        bids = [policy_value(mdp, p.agent(i), out.policy) for i in range(p.n)]
        return MechanismOutcome(out.policy, bids)

    rep = check_desiderata(mdp, prof, GridFamily(max_cells=4), mechanism=pay_as_bid)
    assert rep.max_truthfulness_gain > 0.1


def test_price_translation_breaks_ir():
    mdp, prof = m2_mdp(), m2_profile(2)
    rep = check_desiderata(mdp, prof, GridFamily(max_cells=2),
                           mechanism=lambda p: exact_vcg(mdp, p).shifted(1, 1.5))
    assert rep.min_agent_utility == pytest.approx(-0.5)
    assert rep.max_truthfulness_gain <= 1e-9  # a constant shift leaves incentives intact
