import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from offline_vcg import _kernels_py
from offline_vcg.data import DataDistribution, Exclude, OfflineDataset, Total, aggregate_rewards, sample_dataset
from offline_vcg.invariants import induced_gap
from offline_vcg.learner import (
    EmpiricalModel,
    EvalConfig,
    Mode,
    compute_lambda_eta,
    empirical_backup,
    empirical_bellman_error,
    empirical_loss,
    evaluate_on_model,
    evaluate_policy,
)
from offline_vcg.learner.evaluation import objective_value
from offline_vcg.mdp import (
    InputError,
    MixturePolicy,
    RewardProfile,
    StagePolicy,
    box_bounds,
    exact_policy_q,
    m2_mdp,
    m2_profile,
    policy_value,
    random_instance,
)


def _single_cell(rewards, H=1):
    """Dataset on one state and one action; ``rewards`` are per-tuple values at every step."""
    r = np.asarray(rewards, dtype=float)
    K = r.size
    z = np.zeros((H, K), dtype=int)
    data = OfflineDataset(1, 1, 1.0, z, z, np.broadcast_to(r[None, :, None], (H, K, 1)), z)
    prof = RewardProfile(np.zeros((H, 1, 1)), np.ones((1, H, 1, 1)))
    return data, prof


def _one_step(states, actions, rewards, S, A):
    states = np.asarray(states)[None]
    data = OfflineDataset(S, A, 1.0, states, np.asarray(actions)[None],
                          np.asarray(rewards, dtype=float)[None, :, None], states)
    prof = RewardProfile(np.zeros((1, S, A)), np.ones((1, 1, S, A)))
    return data, prof


# --- empirical loss, backup and Bellman error --------------------------------


def test_loss_is_zero_at_perfect_fit():
    data, prof = _one_step([0, 1, 1], [1, 0, 0], [0.3, 0.6, 0.6], 2, 2)
    f = np.array([[0.0, 0.3], [0.6, 0.0]])
    assert empirical_loss(f, None, StagePolicy.uniform(1, 2, 2), data, Total(), prof, 0) == 0.0


def test_loss_unit_residual():
    data, prof = _single_cell([1.0])
    assert empirical_loss(np.zeros((1, 1)), None, StagePolicy.uniform(1, 1, 1), data, Total(), prof, 0) == 1.0


def test_loss_two_targets():
    data, prof = _single_cell([0.0, 1.0])
    assert empirical_loss(np.ones((1, 1)), None, StagePolicy.uniform(1, 1, 1), data, Total(), prof, 0) == 0.5


def test_backup_is_mean_reward_when_next_is_zero():
    data = sample_dataset(m2_mdp(), m2_profile(1), DataDistribution.uniform(2, 2, 2), 400, 3)
    prof = m2_profile(1)
    g, unseen = empirical_backup(np.zeros((2, 2)), StagePolicy.uniform(2, 2, 2), data, Total(), prof, 0)
    r = aggregate_rewards(data, prof, Total())[0]
    for s in range(2):
        for a in range(2):
            hit = (data.states[0] == s) & (data.actions[0] == a)
            assert g[s, a] == pytest.approx(r[hit].mean())
    assert not unseen.any()


def test_backup_two_targets_and_unseen_default():
    data, prof = _single_cell([0.0, 1.0])
    g, _ = empirical_backup(None, StagePolicy.uniform(1, 1, 1), data, Total(), prof, 0)
    assert g[0, 0] == 0.5
    data, prof = _one_step([0, 0], [0, 0], [0.0, 1.0], 1, 2)
    g, unseen = empirical_backup(None, StagePolicy.uniform(1, 1, 2), data, Total(), prof, 0, EvalConfig(1.0, Mode.PES))
    assert unseen.tolist() == [[False, True]] and g[0, 1] == -1.0
    g, _ = empirical_backup(None, StagePolicy.uniform(1, 1, 2), data, Total(), prof, 0, EvalConfig(1.0, Mode.OPT))
    assert g[0, 1] == 1.0


def test_unseen_default_uses_step_box():
    mdp, prof = m2_mdp(3), m2_profile(1, 3)
    data = sample_dataset(mdp, prof, DataDistribution.point_mass(3, 2, 2, 0, 0), 10, 0)
    g, unseen = empirical_backup(np.zeros((2, 2)), StagePolicy.uniform(3, 2, 2), data, Total(), prof, 1,
                                 EvalConfig(1.0, Mode.PES))
    assert unseen[1, 1] and g[1, 1] == -2.0


def test_bellman_error_examples():
    data, prof = _single_cell([0.0, 1.0])
    pol = StagePolicy.uniform(1, 1, 1)
    assert empirical_bellman_error(np.full((1, 1, 1), 0.5), pol, data, Total(), prof, 0) == 0.0
    e = empirical_bellman_error(np.ones((1, 1, 1)), pol, data, Total(), prof, 0)
    assert e == 0.25
    l_f = empirical_loss(np.ones((1, 1)), None, pol, data, Total(), prof, 0)
    l_g = empirical_loss(np.full((1, 1), 0.5), None, pol, data, Total(), prof, 0)
    assert e == pytest.approx(l_f - l_g, abs=1e-15)


def test_bellman_error_weighted_residuals():
    data, prof = _one_step([0, 0, 0, 0], [0, 0, 0, 1], [0.0] * 4, 1, 2)
    f = np.array([[[0.2, 0.4]]])
    e = empirical_bellman_error(f, StagePolicy.uniform(1, 1, 2), data, Total(), prof, 0)
    assert e == pytest.approx(0.07, abs=1e-15)


def _definitional_error(f, pol, data, sel, prof, h):
    """``L(f_h) - L(g*)`` with ``g*`` the per-cell mean of the targets (no clipping)."""
    nxt = f[h + 1] if h + 1 < data.H else None
    y = aggregate_rewards(data, prof, sel)[h]
    if nxt is not None:
        y = y + np.einsum("sa,sa->s", pol.probs[h + 1], nxt)[data.next_states[h]]
    cell = data.states[h] * data.A + data.actions[h]
    sums = np.bincount(cell, weights=y, minlength=data.S * data.A)
    cnt = np.bincount(cell, minlength=data.S * data.A)
    g = (sums / np.maximum(cnt, 1)).reshape(data.S, data.A)
    return (empirical_loss(f[h], nxt, pol, data, sel, prof, h)
            - empirical_loss(g, nxt, pol, data, sel, prof, h))


@given(st.integers(0, 2**32 - 1))
@pytest.mark.parametrize("which", ["total", "exclude"])
def test_closed_form_matches_definition(which, seed):
    rng = np.random.default_rng(seed)
    S, A, H = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    mdp, prof = random_instance(rng, S, A, H, 2)
    K = int(rng.integers(1, 30))
    data = sample_dataset(mdp, prof, DataDistribution.uniform(H, S, A), K, seed)
    pol = StagePolicy(rng.dirichlet(np.ones(A), size=(H, S)))
    bound = box_bounds(H, prof.r_max)[:, None, None]
    f = rng.uniform(-1, 1, (H, S, A)) * bound
    sel = Total() if which == "total" else Exclude(1)
    for h in range(H):
        closed = empirical_bellman_error(f, pol, data, sel, prof, h)
        assert closed >= -1e-12
        assert closed == pytest.approx(_definitional_error(f, pol, data, sel, prof, h), abs=1e-12)


def test_closed_form_matches_grid_search(rng):
    grid = np.arange(-1.0, 1.0 + 5e-4, 1e-3)
    pol = StagePolicy.uniform(1, 1, 1)
    for _ in range(20):
        data, prof = _single_cell(rng.random(int(rng.integers(1, 12))))
        f = rng.uniform(-1, 1, (1, 1, 1))
        y = data.rewards[0, :, 0]
        best = np.min(np.mean((grid[:, None] - y[None, :]) ** 2, axis=1))
        l_f = empirical_loss(f[0], None, pol, data, Total(), prof, 0)
        assert empirical_bellman_error(f, pol, data, Total(), prof, 0) == pytest.approx(l_f - best, abs=1e-5)


# --- the regularized evaluation problem --------------------------------------


@pytest.mark.parametrize("lam", [0.5, 1.0, 10.0])
def test_scalar_closed_form(lam):
    data, prof = _single_cell([0.0] * 5)
    pol = StagePolicy.uniform(1, 1, 1)
    pes = evaluate_policy(data, prof, Total(), pol, EvalConfig(lam, Mode.PES))
    opt = evaluate_policy(data, prof, Total(), pol, EvalConfig(lam, Mode.OPT))
    assert pes.value == pytest.approx(-1 / (2 * lam), abs=1e-6)
    assert opt.value == pytest.approx(1 / (2 * lam), abs=1e-6)


def test_scalar_closed_form_is_clipped_by_box():
    data, prof = _single_cell([0.0] * 5)
    res = evaluate_policy(data, prof, Total(), StagePolicy.uniform(1, 1, 1), EvalConfig(0.1, Mode.PES))
    assert res.value == -1.0


def test_zero_reward_single_cell_is_anchored():
    data, _ = _single_cell([0.0] * 50)
    prof = RewardProfile(np.zeros((1, 1, 1)), np.zeros((1, 1, 1, 1)))
    res = evaluate_policy(data, prof, Total(), StagePolicy.uniform(1, 1, 1), EvalConfig(10.0, Mode.PES))
    assert abs(res.value) <= 0.05 + 1e-12


def test_without_warm_start_same_solution(rng):
    mdp, prof = random_instance(rng, 3, 2, 2, 1)
    data = sample_dataset(mdp, prof, DataDistribution.uniform(2, 3, 2), 2000, 1)
    pol = StagePolicy(rng.dirichlet(np.ones(2), size=(2, 3)))
    a = evaluate_policy(data, prof, Total(), pol, EvalConfig(5.0, Mode.PES, max_iterations=20000, tolerance=1e-14))
    b = evaluate_policy(data, prof, Total(), pol,
                        EvalConfig(5.0, Mode.PES, max_iterations=20000, tolerance=1e-14, warm_start=False))
    assert a.value == pytest.approx(b.value, abs=1e-5)


def _model_and_policy(seed, K=300, S=3, A=2, H=3):
    rng = np.random.default_rng(seed)
    mdp, prof = random_instance(rng, S, A, H, 2)
    data = sample_dataset(mdp, prof, DataDistribution.uniform(H, S, A), K, seed)
    pol = StagePolicy(rng.dirichlet(np.ones(A), size=(H, S)))
    return mdp, prof, EmpiricalModel.build(data, prof, Exclude(0)), pol, rng


@given(st.integers(0, 2**32 - 1), st.sampled_from(list(Mode)))
def test_objective_is_midpoint_convex(seed, mode):
    _, prof, model, pol, rng = _model_and_policy(seed)
    cfg = EvalConfig(3.0, mode)
    bound = box_bounds(3, prof.r_max)[:, None, None]
    a, b = (rng.uniform(-1, 1, (3, 3, 2)) * bound for _ in range(2))
    mid = objective_value(model, (a + b) / 2, pol, 0, cfg)
    avg = (objective_value(model, a, pol, 0, cfg) + objective_value(model, b, pol, 0, cfg)) / 2
    assert mid <= avg + 1e-9


@pytest.mark.parametrize("mode", list(Mode))
def test_more_iterations_never_worse(mode):
    _, _, model, pol, _ = _model_and_policy(7, K=50)
    base = dict(lam=20.0, mode=mode, tolerance=1e-300, warm_start=False)
    objs = [evaluate_on_model(model, pol, EvalConfig(max_iterations=k, **base)).objective for k in range(1, 60)]
    assert all(b <= a + 1e-12 for a, b in zip(objs, objs[1:]))


@given(st.integers(0, 2**32 - 1), st.sampled_from(list(Mode)))
def test_solution_satisfies_box_kkt(seed, mode):
    _, prof, model, pol, _ = _model_and_policy(seed, K=int(np.random.default_rng(seed).integers(5, 400)))
    cfg = EvalConfig(8.0, mode, max_iterations=20000, tolerance=1e-15)
    res = evaluate_on_model(model, pol, cfg)
    f = res.q.values
    bound = box_bounds(3, prof.r_max)[:, None, None] * np.ones_like(f)
    g = _kernels_py.qp_gradient(f, model.mu_hat, model.rbar, model.phat, pol.probs, 0, mode.sign, cfg.lam,
                                model.seen.astype(float))
    tol = 1e-4
    interior = (np.abs(f) < bound - 1e-9) & model.seen
    assert np.all(np.abs(g[interior]) <= tol)
    assert np.all(g[(f >= bound - 1e-9) & model.seen] <= tol)
    assert np.all(g[(f <= -bound + 1e-9) & model.seen] >= -tol)
    unseen_edge = -bound if mode is Mode.PES else bound
    np.testing.assert_array_equal(f[~model.seen], unseen_edge[~model.seen])


@given(st.integers(0, 2**32 - 1), st.sampled_from(list(Mode)))
def test_induced_gap_bound(seed, mode):
    mdp, prof, model, pol, _ = _model_and_policy(seed, K=200)
    res = evaluate_on_model(model, pol, EvalConfig(4.0, mode))
    lhs, rhs = induced_gap(mdp, prof.exclude(0), pol, res.q.values)
    assert lhs <= rhs + 1e-8


def test_pessimistic_below_optimistic_on_full_coverage():
    mdp, prof, _, pol, _ = _model_and_policy(11)
    data = sample_dataset(mdp, prof, DataDistribution.uniform(3, 3, 2), 20000, 11)
    lam = compute_lambda_eta(prof.r_max, 3, 2, 1, 20 / 20000)[0]
    truth = policy_value(mdp, prof.total(), pol)
    pes = evaluate_policy(data, prof, Total(), pol, EvalConfig(lam, Mode.PES)).value
    opt = evaluate_policy(data, prof, Total(), pol, EvalConfig(lam, Mode.OPT)).value
    slack = 0.05 * 3 * prof.r_max
    assert pes <= truth + slack and opt >= truth - slack and pes <= opt


def test_m2_uniform_policy_pessimistic_estimate():
    # lambda from the scaled statistical level 20 / K (the theory level is far too large at this K)
    mdp, prof = m2_mdp(), m2_profile(1)
    data = sample_dataset(mdp, prof, DataDistribution.uniform(2, 2, 2), 20000, 0)
    pol = StagePolicy.uniform(2, 2, 2)
    assert policy_value(mdp, prof.total(), pol) == 0.5
    lam = compute_lambda_eta(1.0, 2, 2, 1, 20 / 20000)[0]
    res = evaluate_policy(data, prof, Total(), pol, EvalConfig(lam, Mode.PES))
    assert 0.4 <= res.value <= 0.52
    assert res.converged


def test_q_table_is_oracle_at_large_lambda():
    mdp, prof = m2_mdp(), m2_profile(1)
    data = sample_dataset(mdp, prof, DataDistribution.uniform(2, 2, 2), 20000, 0)
    pol = StagePolicy.uniform(2, 2, 2)
    res = evaluate_policy(data, prof, Total(), pol, EvalConfig(1e4, Mode.OPT, max_iterations=20000))
    np.testing.assert_allclose(res.q.values, exact_policy_q(mdp, prof.total(), pol), atol=0.03)


def test_rejects_mixtures_and_bad_shapes():
    mdp, prof = m2_mdp(), m2_profile(1)
    data = sample_dataset(mdp, prof, DataDistribution.uniform(2, 2, 2), 10, 0)
    mix = MixturePolicy((StagePolicy.uniform(2, 2, 2),))
    with pytest.raises(InputError):
        evaluate_policy(data, prof, Total(), mix, EvalConfig(1.0))
    with pytest.raises(InputError):
        evaluate_policy(data, prof, Total(), StagePolicy.uniform(2, 2, 3), EvalConfig(1.0))
    with pytest.raises(InputError):
        EvalConfig(0.0)
