"""Exact dynamic VCG mechanism, utilities, suboptimalities, and desiderata checks."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import kernels
from .mdp import (
    InputError,
    Policy,
    RewardProfile,
    TabularMdp,
    exact_optimal,
    optimal_value,
    policy_value,
)


@dataclass(frozen=True)
class MechanismOutcome:
    policy: Policy
    prices: np.ndarray
    provenance: str = "exact"

    def __post_init__(self):
        prices = np.array(self.prices, dtype=float).reshape(-1)
        prices.setflags(write=False)
        object.__setattr__(self, "prices", prices)
        if self.provenance not in ("exact", "learned"):
            raise InputError(f"provenance must be 'exact' or 'learned', got {self.provenance!r}")

    @property
    def n(self) -> int:
        return len(self.prices)

    def shifted(self, i: int, delta: float) -> "MechanismOutcome":
        """Same outcome with agent ``i``'s price moved by ``delta``."""
        prices = np.array(self.prices)
        prices[i] += delta
        return MechanismOutcome(self.policy, prices, self.provenance)


def _check_outcome(mdp: TabularMdp, profile: RewardProfile, outcome: MechanismOutcome) -> None:
    if outcome.n != profile.n:
        raise InputError(f"outcome has {outcome.n} prices for {profile.n} agents")
    if outcome.policy.shape != mdp.shape:
        raise InputError("outcome policy does not match the MDP")


def vcg_price(mdp: TabularMdp, reported: RewardProfile, policy: Policy, i: int) -> float:
    """Clarke pivot price ``V*(s0; R_-i) - V^pi(s0; R_-i)``."""
    others = reported.exclude(i)
    return optimal_value(mdp, others) - policy_value(mdp, others, policy)


def exact_vcg(mdp: TabularMdp, reported: RewardProfile) -> MechanismOutcome:
    _, policy = exact_optimal(mdp, reported.total())
    prices = [vcg_price(mdp, reported, policy, i) for i in range(reported.n)]
    return MechanismOutcome(policy, prices, "exact")


def agent_utility(mdp: TabularMdp, actual_reward: np.ndarray, policy: Policy, price: float) -> float:
    return policy_value(mdp, actual_reward, policy) - float(price)


def seller_utility(mdp: TabularMdp, seller_reward: np.ndarray, policy: Policy, prices) -> float:
    return policy_value(mdp, seller_reward, policy) + float(np.sum(prices))


def subopt_welfare(mdp: TabularMdp, actual: RewardProfile, policy: Policy) -> float:
    R = actual.total()
    return optimal_value(mdp, R) - policy_value(mdp, R, policy)


def subopt_agent(mdp: TabularMdp, actual: RewardProfile, i: int, outcome: MechanismOutcome) -> float:
    actual._check_agent(i)
    _check_outcome(mdp, actual, outcome)
    bench = exact_vcg(mdp, actual)
    r_i = actual.agent(i)
    return (agent_utility(mdp, r_i, bench.policy, bench.prices[i])
            - agent_utility(mdp, r_i, outcome.policy, outcome.prices[i]))


def subopt_seller(mdp: TabularMdp, actual: RewardProfile, outcome: MechanismOutcome) -> float:
    _check_outcome(mdp, actual, outcome)
    bench = exact_vcg(mdp, actual)
    return (seller_utility(mdp, actual.seller, bench.policy, bench.prices)
            - seller_utility(mdp, actual.seller, outcome.policy, outcome.prices))


# ---------------------------------------------------------------------------
# Misreport families


@dataclass(frozen=True)
class GridFamily:
    """Every assignment of ``levels`` to the first ``max_cells`` (h, s, a) cells.

    Remaining cells keep the truthful value, so the family always has
    ``len(levels) ** min(max_cells, H*S*A)`` members.
    """

    levels: tuple = (0.0, 0.5, 1.0)
    max_cells: int = 9

    def size(self, shape) -> int:
        return len(self.levels) ** min(self.max_cells, int(np.prod(shape)))

    def generate(self, truthful: np.ndarray) -> np.ndarray:
        flat = np.asarray(truthful, dtype=float).reshape(-1)
        m = min(self.max_cells, flat.size)
        combos = np.array(list(itertools.product(self.levels, repeat=m)), dtype=float).reshape(-1, m)
        out = np.repeat(flat[None], len(combos), axis=0)
        out[:, :m] = combos
        return out.reshape((len(combos),) + truthful.shape)

    def describe(self) -> dict:
        return {"kind": "grid", "levels": list(self.levels), "max_cells": self.max_cells}


@dataclass(frozen=True)
class RandomFamily:
    """Truthful table plus uniform noise of half-width ``scale``, clipped to [0, 1]."""

    count: int = 100
    scale: float = 1.0
    seed: int = 0

    def size(self, shape) -> int:
        return self.count

    def generate(self, truthful: np.ndarray) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        noise = rng.uniform(-self.scale, self.scale, size=(self.count,) + truthful.shape)
        return np.clip(truthful[None] + noise, 0.0, 1.0)

    def describe(self) -> dict:
        return {"kind": "random", "count": self.count, "scale": self.scale, "seed": self.seed}


@dataclass(frozen=True)
class ScalarFamily:
    """Scaled reports ``clip(alpha * r, 0, 1)`` over a grid of ``alpha`` (a line scan)."""

    alphas: tuple = tuple(np.round(np.linspace(0.0, 2.0, 21), 10))

    def size(self, shape) -> int:
        return len(self.alphas)

    def generate(self, truthful: np.ndarray) -> np.ndarray:
        a = np.asarray(self.alphas, dtype=float).reshape((-1,) + (1,) * truthful.ndim)
        return np.clip(a * truthful[None], 0.0, 1.0)

    def describe(self) -> dict:
        return {"kind": "scalar", "alphas": [float(a) for a in self.alphas]}


@dataclass(frozen=True)
class ConstantFamily:
    """Flat reports at each level, e.g. ``(0.0, 0.5, 1.0)``."""

    levels: tuple = (0.0, 0.5, 1.0)

    def size(self, shape) -> int:
        return len(self.levels)

    def generate(self, truthful: np.ndarray) -> np.ndarray:
        return np.stack([np.full(truthful.shape, float(v)) for v in self.levels])

    def describe(self) -> dict:
        return {"kind": "constant", "levels": list(self.levels)}


MisreportFamily = GridFamily | RandomFamily | ScalarFamily | ConstantFamily


def family_from_spec(spec: dict) -> MisreportFamily:
    kind = spec.get("kind", "grid")
    if kind == "grid":
        return GridFamily(tuple(spec.get("levels", (0.0, 0.5, 1.0))), int(spec.get("max_cells", 9)))
    if kind == "random":
        return RandomFamily(int(spec.get("count", 100)), float(spec.get("scale", 1.0)), int(spec.get("seed", 0)))
    if kind == "scalar":
        if "alphas" in spec:
            return ScalarFamily(tuple(float(a) for a in spec["alphas"]))
        return ScalarFamily()
    if kind == "constant":
        return ConstantFamily(tuple(spec.get("levels", (0.0, 0.5, 1.0))))
    raise InputError(f"unknown misreport family {kind!r}")


# ---------------------------------------------------------------------------
# Desiderata


@dataclass
class DesiderataReport:
    welfare_gap: float
    min_agent_utility: float
    max_truthfulness_gain: float
    per_agent: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "welfare_gap": self.welfare_gap,
            "min_agent_utility": self.min_agent_utility,
            "max_truthfulness_gain": self.max_truthfulness_gain,
            "per_agent": self.per_agent,
            "metadata": self.metadata,
        }


Mechanism = Callable[[RewardProfile], MechanismOutcome]


def _profiles_with(profile: RewardProfile, j: int, reports: np.ndarray) -> Iterator[RewardProfile]:
    for rep in reports:
        yield profile.with_agent(j, rep)


def _generic_check(mdp, actual, family, mechanism):
    n = actual.n
    truthful = mechanism(actual)
    gap = subopt_welfare(mdp, actual, truthful.policy)
    rows = []
    for i in range(n):
        r_i = actual.agent(i)
        u_truth = agent_utility(mdp, r_i, truthful.policy, truthful.prices[i])
        ir = u_truth
        profiles_ir = 1
        for j in range(n):
            if j == i:
                continue
            for prof in _profiles_with(actual, j, family.generate(actual.agent(j))):
                out = mechanism(prof)
                ir = min(ir, agent_utility(mdp, r_i, out.policy, out.prices[i]))
                profiles_ir += 1
        gain = -np.inf
        for prof in _profiles_with(actual, i, family.generate(r_i)):
            out = mechanism(prof)
            gain = max(gain, agent_utility(mdp, r_i, out.policy, out.prices[i]) - u_truth)
        rows.append({"agent": i, "truthful_utility": u_truth, "ir_min": ir,
                     "truthfulness_gain": float(gain), "ir_profiles": profiles_ir})
    return gap, rows


def _batched_check(mdp, actual, family):
    """Exact-VCG specialisation: batched backward induction over report tables."""
    P, s0, n = mdp.transition, mdp.s0, actual.n
    R = actual.total()
    bench = exact_vcg(mdp, actual)
    gap = subopt_welfare(mdp, actual, bench.policy)

    def values(tables, actions):
        B = actions.shape[0]
        tables = np.ascontiguousarray(np.broadcast_to(tables, (B,) + mdp.shape))
        return kernels.batch_policy_value(P, tables, actions, s0)

    rows = []
    for i in range(n):
        r_i = actual.agent(i)
        u_truth = agent_utility(mdp, r_i, bench.policy, bench.prices[i])
        # Truthfulness: agent i misreports, others truthful.
        reports = family.generate(r_i)
        _, act = kernels.batch_optimal(P, R[None] - r_i[None] + reports, s0)
        others = actual.exclude(i)
        price = optimal_value(mdp, others) - values(others, act)
        u = values(r_i, act) - price
        gain = float(np.max(u - u_truth))
        # IR: agent i truthful, one other agent j misreports.
        ir = u_truth
        profiles_ir = 1
        for j in range(n):
            if j == i:
                continue
            rep_j = family.generate(actual.agent(j))
            totals = R[None] - actual.agent(j)[None] + rep_j
            _, act = kernels.batch_optimal(P, totals, s0)
            excl = totals - r_i[None]
            v_star, _ = kernels.batch_optimal(P, excl, s0)
            price = v_star - values(excl, act)
            ir = min(ir, float(np.min(values(r_i, act) - price)))
            profiles_ir += len(rep_j)
        rows.append({"agent": i, "truthful_utility": u_truth, "ir_min": ir,
                     "truthfulness_gain": gain, "ir_profiles": profiles_ir})
    return gap, rows


def check_desiderata(
    mdp: TabularMdp,
    actual: RewardProfile,
    family: MisreportFamily,
    mechanism: Mechanism = exact_vcg,
) -> DesiderataReport:
    """Efficiency gap, worst truthful utility, and best misreport gain over ``family``.

    Individual rationality is certified only over the supplied family of
    other-agent reports (one deviating agent at a time).
    """
    if mechanism is exact_vcg:
        gap, rows = _batched_check(mdp, actual, family)
    else:
        gap, rows = _generic_check(mdp, actual, family, mechanism)
    return DesiderataReport(
        welfare_gap=float(gap),
        min_agent_utility=float(min(r["ir_min"] for r in rows)),
        max_truthfulness_gain=float(max(r["truthfulness_gain"] for r in rows)),
        per_agent=rows,
        metadata={
            "family": family.describe(),
            "profiles_per_agent": family.size(actual.shape),
            "ir_scope": "certified over the supplied family only; one other agent deviates at a time",
        },
    )
