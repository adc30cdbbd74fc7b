"""Lemma-level invariant checks packaged as reusable suites.

Each suite returns a ``SuiteResult`` holding one record per trial, so callers
can assert on the pass flag or inspect the worst cases.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import DataDistribution, Exclude, Total, sample_dataset, selector_table
from .diagnostics import shift_coefficient, shift_ratio_search
from .learner import (
    EvalConfig,
    Mode,
    compute_lambda_eta,
    evaluate_policy,
    mirror_descent_update,
)
from .mdp import (
    QTable,
    StagePolicy,
    TabularMdp,
    bellman_backup,
    box_bounds,
    exact_policy_q,
    m2_mdp,
    m2_profile,
    random_instance,
    visitation,
)
from .mechanism import GridFamily, check_desiderata


@dataclass
class SuiteResult:
    name: str
    passed: bool
    trials: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "summary": self.summary, "trials": self.trials}


def random_policy(rng: np.random.Generator, H: int, S: int, A: int) -> StagePolicy:
    return StagePolicy(rng.dirichlet(np.ones(A), size=(H, S)))


def induced_gap(mdp: TabularMdp, reward: np.ndarray, policy: StagePolicy, f: np.ndarray) -> tuple[float, float]:
    """``(|f_1(s0, pi) - Q^pi_1(s0, pi)|, sum_h E_{d^pi_h} |f_h - T^pi f_{h+1}|)`` on the true MDP."""
    f = np.asarray(f, dtype=float)
    q = exact_policy_q(mdp, reward, policy)
    pi0 = policy.probs[0, mdp.s0]
    lhs = abs(float(pi0 @ f[0, mdp.s0]) - float(pi0 @ q[0, mdp.s0]))
    d = visitation(mdp, policy).d
    rhs = 0.0
    for h in range(mdp.H):
        nxt = f[h + 1] if h + 1 < mdp.H else None
        resid = f[h] - bellman_backup(mdp, reward[h], policy, nxt, h)
        rhs += float(np.sum(d[h] * np.abs(resid)))
    return lhs, rhs


def _scaled_lambda(r_max: float, H: int, A: int, K: int, c: float) -> float:
    return compute_lambda_eta(r_max, H, A, 1, c / K)[0]


def pessimism_suite(
    seed: int = 0, triples: int = 20, K: int = 20000, tol_frac: float = 0.05,
    pass_rate: float = 0.95, lam_c: float = 20.0, gap_tol: float = 1e-8,
) -> tuple[SuiteResult, SuiteResult]:
    """Approximate pessimism/optimism on full-coverage data, plus the induced-MDP gap.

    Both suites share the same evaluation outputs, so they are produced together.
    """
    ss = np.random.SeedSequence([seed, 11])
    pes_trials, gap_trials = [], []
    for k, child in enumerate(ss.spawn(triples)):
        rng = np.random.default_rng(child)
        S, A, H = int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(1, 4))
        n = int(rng.integers(1, 3))
        mdp, prof = random_instance(rng, S, A, H, n)
        policy = random_policy(rng, H, S, A)
        data = sample_dataset(mdp, prof, DataDistribution.uniform(H, S, A), K, int(rng.integers(2**31)))
        selector = Total() if k % 2 == 0 else Exclude(0)
        reward = selector_table(prof, selector)
        truth = float(policy.probs[0, 0] @ exact_policy_q(mdp, reward, policy)[0, 0])
        lam = _scaled_lambda(prof.r_max, H, A, K, lam_c)
        tol = tol_frac * H * prof.r_max
        row = {"trial": k, "S": S, "A": A, "H": H, "n": n, "lam": lam, "truth": truth}
        ok = True
        for mode in (Mode.PES, Mode.OPT):
            res = evaluate_policy(data, prof, selector, policy, EvalConfig(lam, mode))
            row[mode.value] = res.value
            ok &= res.value <= truth + tol if mode is Mode.PES else res.value >= truth - tol
            lhs, rhs = induced_gap(mdp, reward, policy, res.q.values)
            gap_trials.append({"trial": k, "mode": mode.value, "lhs": lhs, "rhs": rhs,
                               "ok": bool(lhs <= rhs + gap_tol)})
        row["ok"] = bool(ok)
        pes_trials.append(row)
    rate = float(np.mean([t["ok"] for t in pes_trials]))
    pes = SuiteResult("pessimism", rate >= pass_rate, pes_trials, {"pass_rate": rate, "required": pass_rate})
    worst = max(t["lhs"] - t["rhs"] for t in gap_trials)
    gap = SuiteResult("induced-gap", all(t["ok"] for t in gap_trials), gap_trials, {"worst_excess": worst})
    return pes, gap


def md_regret_bound(H: int, r_max: float, A: int, T: int) -> float:
    return 2.0 * H * r_max * math.sqrt(2.0 * T * math.log(A))


def adversarial_regret(rng: np.random.Generator, H: int, S: int, A: int, T: int, r_max: float) -> np.ndarray:
    """Per-(h, s) regret of exponential weights against random boxed Q tables.

    Uses the step size from the hyperparameter formula. The comparator is the
    best fixed action in hindsight, which dominates every fixed distribution.
    """
    eta = compute_lambda_eta(r_max, H, A, T, 1.0)[1]
    bound = box_bounds(H, r_max)[:, None, None]
    pi = StagePolicy.uniform(H, S, A)
    earned = np.zeros((H, S))
    cum = np.zeros((H, S, A))
    style = rng.integers(3)
    for t in range(T):
        if style == 0:
            q = rng.uniform(-1, 1, size=(H, S, A)) * bound
        elif style == 1:
            # Alternate which action looks best to make the learner chase.
            q = np.where(np.arange(A) == (t % A), 1.0, -1.0)[None, None] * bound
        else:
            q = np.sign(rng.uniform(-1, 1, size=(H, S, A))) * bound
        earned += np.einsum("hsa,hsa->hs", pi.probs, q)
        cum += q
        pi = mirror_descent_update(pi, QTable(q, r_max), eta)
    return cum.max(axis=-1) - earned


def regret_suite(seed: int = 0, sequences: int = 200, horizons=(16, 64, 256)) -> SuiteResult:
    ss = np.random.SeedSequence([seed, 12])
    trials = []
    for k, child in enumerate(ss.spawn(sequences)):
        rng = np.random.default_rng(child)
        H, S, A = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 5))
        r_max = float(rng.choice([1.0, 2.0, 3.0]))
        T = int(horizons[k % len(horizons)])
        regret = float(adversarial_regret(rng, H, S, A, T, r_max).max())
        bound = md_regret_bound(H, r_max, A, T)
        trials.append({"trial": k, "T": T, "H": H, "A": A, "r_max": r_max,
                       "regret": regret, "bound": bound, "ok": bool(regret <= bound)})
    worst = max(t["regret"] / t["bound"] for t in trials)
    return SuiteResult("regret", all(t["ok"] for t in trials), trials, {"worst_ratio": worst})


def shift_soundness_suite(seed: int = 0, instances: int = 20, draws: int = 10_000, rtol: float = 1e-9) -> SuiteResult:
    ss = np.random.SeedSequence([seed, 13])
    trials = []
    for k, child in enumerate(ss.spawn(instances)):
        rng = np.random.default_rng(child)
        S, A, H = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        mdp, prof = random_instance(rng, S, A, H, 1)
        behavior = random_policy(rng, H, S, A)
        mu = visitation(mdp, behavior)
        nu = visitation(mdp, random_policy(rng, H, S, A))
        coef = shift_coefficient(nu, mu)
        found = shift_ratio_search(mdp, random_policy(rng, H, S, A), nu, mu, prof.r_max, draws, rng)
        self_coef = shift_coefficient(mu, mu)
        ok = found <= coef * (1 + rtol) and self_coef == 1.0
        trials.append({"trial": k, "coefficient": coef, "search_max": found,
                       "self": self_coef, "ok": bool(ok)})
    return SuiteResult("shift-soundness", all(t["ok"] for t in trials), trials,
                       {"max_search_over_coef": max(t["search_max"] / t["coefficient"] for t in trials)})


def desiderata_suite(seed: int = 0, instances: int = 50, tol: float = 1e-9, family=None) -> SuiteResult:
    """Exact mechanism desiderata on both M2 profiles and random instances."""
    family = family or GridFamily((0.0, 0.5, 1.0), 9)
    cases = [("m2-n1", m2_mdp(), m2_profile(1)), ("m2-n2", m2_mdp(), m2_profile(2))]
    ss = np.random.SeedSequence([seed, 14])
    for k, child in enumerate(ss.spawn(instances)):
        rng = np.random.default_rng(child)
        S, A = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        H, n = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        mdp, prof = random_instance(rng, S, A, H, n)
        cases.append((f"random-{k}", mdp, prof))
    trials = []
    for name, mdp, prof in cases:
        rep = check_desiderata(mdp, prof, family)
        ok = rep.welfare_gap <= tol and rep.min_agent_utility >= -tol and rep.max_truthfulness_gain <= tol
        trials.append({"case": name, "welfare_gap": rep.welfare_gap, "min_agent_utility": rep.min_agent_utility,
                       "max_truthfulness_gain": rep.max_truthfulness_gain, "ok": bool(ok)})
    return SuiteResult("desiderata", all(t["ok"] for t in trials), trials, {"cases": len(trials)})


SUITES = ("pessimism", "regret", "induced-gap", "shift-soundness", "desiderata")


def run_suite(name: str, seed: int = 0) -> SuiteResult:
    if name == "pessimism":
        return pessimism_suite(seed)[0]
    if name == "induced-gap":
        return pessimism_suite(seed)[1]
    if name == "regret":
        return regret_suite(seed)
    if name == "shift-soundness":
        return shift_soundness_suite(seed)
    if name == "desiderata":
        return desiderata_suite(seed)
    raise KeyError(name)
