"""Tabular episodic MDPs, reward profiles, policies, and exact dynamic programming.

Steps are 0-indexed internally: step ``h`` in ``range(H)`` corresponds to the
1-indexed step ``h + 1``. The value box at step ``h`` is therefore
``(H - h) * r_max``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

PROB_ATOL = 1e-12
MEASURE_ATOL = 1e-10
# Q-values within this (relative) distance of the row max count as ties.
TIE_RTOL = 1e-12

MDP_SCHEMA = "offline-vcg/mdp-v1"


class InputError(ValueError):
    """Raised when arguments have inconsistent shapes or invalid values."""


def _check_rows(arr: np.ndarray, what: str) -> None:
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise InputError(f"{what} has negative or non-finite entries")
    err = np.max(np.abs(arr.sum(axis=-1) - 1.0)) if arr.size else 0.0
    if err > PROB_ATOL:
        raise InputError(f"{what} rows do not sum to 1 (max error {err:.3g})")


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TabularMdp:
    """Finite episodic MDP with step-indexed transitions ``P[h, s, a, s']``."""

    transition: np.ndarray
    s0: int = 0

    def __post_init__(self):
        P = _frozen(self.transition)
        if P.ndim != 4 or P.shape[1] != P.shape[3]:
            raise InputError(f"transition must have shape (H, S, A, S), got {P.shape}")
        if min(P.shape) < 1:
            raise InputError("H, S and A must be positive")
        _check_rows(P, "transition")
        if not 0 <= int(self.s0) < P.shape[1]:
            raise InputError(f"s0={self.s0} out of range for S={P.shape[1]}")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "s0", int(self.s0))

    @property
    def H(self) -> int:
        return self.transition.shape[0]

    @property
    def S(self) -> int:
        return self.transition.shape[1]

    @property
    def A(self) -> int:
        return self.transition.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.H, self.S, self.A)


@dataclass(frozen=True)
class RewardProfile:
    """Seller reward plus ``n`` agent reward tables, each indexed ``[h, s, a]``.

    ``agents`` has shape ``(n, H, S, A)``. Agent values lie in [0, 1] and the
    seller's in ``[-r_max, r_max - n]`` so every aggregate lies in
    ``[-r_max, r_max]``.
    """

    seller: np.ndarray
    agents: np.ndarray
    r_max: float = 1.0
    role: str = "actual"

    def __post_init__(self):
        r0 = _frozen(self.seller)
        ri = _frozen(self.agents)
        if r0.ndim != 3 or ri.ndim != 4 or ri.shape[1:] != r0.shape or ri.shape[0] < 1:
            raise InputError(
                f"seller must be (H, S, A) and agents (n, H, S, A); got {r0.shape}, {ri.shape}"
            )
        if self.role not in ("actual", "reported"):
            raise InputError(f"role must be 'actual' or 'reported', got {self.role!r}")
        r_max = float(self.r_max)
        if not r_max >= 1.0:
            raise InputError(f"r_max must be >= 1, got {r_max}")
        if np.any(ri < 0) or np.any(ri > 1) or not np.all(np.isfinite(ri)):
            raise InputError("agent rewards must lie in [0, 1]")
        n = ri.shape[0]
        tol = 1e-12
        if np.any(r0 < -r_max - tol) or np.any(r0 > r_max - n + tol):
            raise InputError(f"seller reward must lie in [-r_max, r_max - n] = [{-r_max}, {r_max - n}]")
        object.__setattr__(self, "seller", r0)
        object.__setattr__(self, "agents", ri)
        object.__setattr__(self, "r_max", r_max)

    @property
    def n(self) -> int:
        return self.agents.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.seller.shape

    def total(self) -> np.ndarray:
        """Pointwise social welfare reward ``R = r0 + sum_i r_i``."""
        return self.seller + self.agents.sum(axis=0)

    def exclude(self, i: int) -> np.ndarray:
        """``R_{-i}``: seller plus every agent except ``i``."""
        self._check_agent(i)
        return self.total() - self.agents[i]

    def agent(self, i: int) -> np.ndarray:
        self._check_agent(i)
        return self.agents[i]

    def with_agent(self, i: int, reward: np.ndarray, role: str = "reported") -> "RewardProfile":
        """Copy of the profile with agent ``i``'s table replaced."""
        self._check_agent(i)
        agents = np.array(self.agents)
        agents[i] = reward
        return RewardProfile(self.seller, agents, self.r_max, role)

    def _check_agent(self, i: int) -> None:
        if not 0 <= i < self.n:
            raise InputError(f"agent index {i} out of range for n={self.n}")


@dataclass(frozen=True)
class StagePolicy:
    """Markov policy ``probs[h, s, a]``."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 3:
            raise InputError(f"policy must have shape (H, S, A), got {p.shape}")
        _check_rows(p, "policy")
        object.__setattr__(self, "probs", p)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.probs.shape

    @classmethod
    def uniform(cls, H: int, S: int, A: int) -> "StagePolicy":
        return cls(np.full((H, S, A), 1.0 / A))

    @classmethod
    def deterministic(cls, actions: np.ndarray, A: int) -> "StagePolicy":
        """Build from an integer action table ``actions[h, s]``."""
        actions = np.asarray(actions, dtype=int)
        return cls(np.eye(A)[actions])


@dataclass(frozen=True)
class MixturePolicy:
    """Uniform episode-level mixture: one component is drawn per episode."""

    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise InputError("mixture must have at least one component")
        shape = comps[0].shape
        if any(c.shape != shape for c in comps):
            raise InputError("mixture components must share (H, S, A)")
        object.__setattr__(self, "components", comps)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.components[0].shape

    def __len__(self) -> int:
        return len(self.components)


Policy = Union[StagePolicy, MixturePolicy]


@dataclass(frozen=True)
class QTable:
    """Step-indexed action values confined to the per-step boxes."""

    values: np.ndarray
    r_max: float = 1.0

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 3:
            raise InputError(f"QTable must have shape (H, S, A), got {v.shape}")
        bound = box_bounds(v.shape[0], self.r_max)
        if np.any(np.abs(v) > bound[:, None, None] * (1 + 1e-12)):
            raise InputError("QTable values exceed the per-step box")
        object.__setattr__(self, "values", v)

    def value_at(self, s: int, policy: StagePolicy) -> float:
        """``f_1(s, pi) = E_{a ~ pi_1(.|s)} f_1(s, a)``."""
        return float(self.values[0, s] @ policy.probs[0, s])


@dataclass(frozen=True)
class VisitationMeasure:
    """Per-step distribution ``d[h, s, a]``."""

    d: np.ndarray

    def __post_init__(self):
        d = _frozen(self.d)
        if d.ndim != 3:
            raise InputError(f"visitation must have shape (H, S, A), got {d.shape}")
        if np.any(d < 0):
            raise InputError("visitation has negative entries")
        err = np.max(np.abs(d.sum(axis=(1, 2)) - 1.0))
        if err > MEASURE_ATOL:
            raise InputError(f"visitation steps do not sum to 1 (max error {err:.3g})")
        object.__setattr__(self, "d", d)


def box_bounds(H: int, r_max: float) -> np.ndarray:
    """Half-widths ``(H - h) * r_max`` of the value boxes, one per step."""
    return (H - np.arange(H)) * float(r_max)


def _check_reward(mdp: TabularMdp, reward: np.ndarray) -> np.ndarray:
    reward = np.asarray(reward, dtype=float)
    if reward.shape != mdp.shape:
        raise InputError(f"reward shape {reward.shape} does not match MDP {mdp.shape}")
    return reward


def _check_policy(mdp: TabularMdp, policy: Policy) -> None:
    if policy.shape != mdp.shape:
        raise InputError(f"policy shape {policy.shape} does not match MDP {mdp.shape}")


def bellman_backup(
    mdp: TabularMdp,
    reward: np.ndarray,
    policy: StagePolicy,
    f_next: np.ndarray | None,
    h: int,
) -> np.ndarray:
    """Apply the policy Bellman operator at step ``h`` to the step ``h+1`` table.

    Returns ``r_h(s,a) + sum_s' P_h(s'|s,a) E_{a'~pi_{h+1}} f_next(s',a')``; the
    continuation is zero at the last step regardless of ``f_next``.
    """
    _check_policy(mdp, policy)
    reward = np.asarray(reward, dtype=float)
    if reward.shape != (mdp.S, mdp.A):
        raise InputError(f"step reward must be (S, A), got {reward.shape}")
    if not 0 <= h < mdp.H:
        raise InputError(f"step {h} out of range for H={mdp.H}")
    if h == mdp.H - 1 or f_next is None:
        return reward.copy()
    f_next = np.asarray(f_next, dtype=float)
    if f_next.shape != (mdp.S, mdp.A):
        raise InputError(f"f_next must be (S, A), got {f_next.shape}")
    v_next = np.einsum("sa,sa->s", policy.probs[h + 1], f_next)
    return reward + mdp.transition[h] @ v_next


def exact_policy_q(mdp: TabularMdp, reward: np.ndarray, policy: StagePolicy) -> np.ndarray:
    """``Q^pi`` by backward induction, as a raw ``(H, S, A)`` array."""
    reward = _check_reward(mdp, reward)
    _check_policy(mdp, policy)
    Q = np.zeros(mdp.shape)
    nxt = None
    for h in range(mdp.H - 1, -1, -1):
        Q[h] = bellman_backup(mdp, reward[h], policy, nxt, h)
        nxt = Q[h]
    return Q


def policy_q_table(mdp: TabularMdp, reward: np.ndarray, policy: StagePolicy, r_max: float) -> QTable:
    return QTable(exact_policy_q(mdp, reward, policy), r_max)


def policy_value(mdp: TabularMdp, reward: np.ndarray, policy: Policy) -> float:
    """``V^pi_1(s0)``; mixtures are valued component-wise."""
    if isinstance(policy, MixturePolicy):
        return mixture_value(mdp, reward, policy)
    Q = exact_policy_q(mdp, reward, policy)
    return float(Q[0, mdp.s0] @ policy.probs[0, mdp.s0])


def greedy_actions(Q: np.ndarray) -> np.ndarray:
    """Row-wise argmax over the last axis, ties broken to the lowest index."""
    top = Q.max(axis=-1, keepdims=True)
    tol = TIE_RTOL * np.maximum(1.0, np.abs(top))
    return np.argmax(Q >= top - tol, axis=-1)


def exact_optimal(mdp: TabularMdp, reward: np.ndarray) -> tuple[np.ndarray, StagePolicy]:
    """Optimal values ``V*[h, s]`` and the deterministic lowest-index greedy policy."""
    reward = _check_reward(mdp, reward)
    H, S, A = mdp.shape
    V = np.zeros((H + 1, S))
    actions = np.zeros((H, S), dtype=int)
    for h in range(H - 1, -1, -1):
        Q = reward[h] + mdp.transition[h] @ V[h + 1]
        actions[h] = greedy_actions(Q)
        V[h] = Q[np.arange(S), actions[h]]
    return V[:H], StagePolicy.deterministic(actions, A)


def optimal_value(mdp: TabularMdp, reward: np.ndarray) -> float:
    V, _ = exact_optimal(mdp, reward)
    return float(V[0, mdp.s0])


def visitation(mdp: TabularMdp, policy: StagePolicy) -> VisitationMeasure:
    _check_policy(mdp, policy)
    H, S, A = mdp.shape
    d = np.zeros((H, S, A))
    state = np.zeros(S)
    state[mdp.s0] = 1.0
    for h in range(H):
        d[h] = state[:, None] * policy.probs[h]
        if h + 1 < H:
            state = np.einsum("sa,sat->t", d[h], mdp.transition[h])
    return VisitationMeasure(d)


def mixture_visitation(mdp: TabularMdp, mixture: MixturePolicy) -> VisitationMeasure:
    """Visitation of an episode-level mixture (average of component measures)."""
    return VisitationMeasure(np.mean([visitation(mdp, c).d for c in mixture.components], axis=0))


def mixture_value(mdp: TabularMdp, reward: np.ndarray, mixture: MixturePolicy) -> float:
    if not isinstance(mixture, MixturePolicy) or len(mixture) == 0:
        raise InputError("mixture_value needs a nonempty MixturePolicy")
    return float(np.mean([policy_value(mdp, reward, c) for c in mixture.components]))


def simulate_returns(
    mdp: TabularMdp,
    reward: np.ndarray,
    policy: StagePolicy,
    episodes: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Monte-Carlo episode returns, vectorised over episodes."""
    reward = _check_reward(mdp, reward)
    H, S, A = mdp.shape
    states = np.full(episodes, mdp.s0)
    returns = np.zeros(episodes)
    for h in range(H):
        cdf = np.cumsum(policy.probs[h, states], axis=1)
        actions = np.minimum((rng.random((episodes, 1)) > cdf).sum(axis=1), A - 1)
        returns += reward[h, states, actions]
        cdf = np.cumsum(mdp.transition[h, states, actions], axis=1)
        states = np.minimum((rng.random((episodes, 1)) > cdf).sum(axis=1), S - 1)
    return returns


# ---------------------------------------------------------------------------
# Instances


def random_instance(
    rng: np.random.Generator,
    S: int,
    A: int,
    H: int,
    n: int,
    r_max: float | None = None,
) -> tuple[TabularMdp, RewardProfile]:
    """Random dense MDP with Dirichlet transitions and a valid reward profile."""
    r_max = float(max(n, 1) if r_max is None else r_max)
    P = rng.dirichlet(np.ones(S), size=(H, S, A))
    agents = rng.random((n, H, S, A))
    lo, hi = -r_max, r_max - n
    seller = lo + (hi - lo) * rng.random((H, S, A))
    return TabularMdp(P, 0), RewardProfile(seller, agents, r_max)


def m2_mdp(H: int = 2) -> TabularMdp:
    """Two states, two actions: a0 stays, a1 swaps; deterministic, s0 = 0."""
    step = np.zeros((2, 2, 2))
    step[0, 0, 0] = step[1, 0, 1] = 1.0
    step[0, 1, 1] = step[1, 1, 0] = 1.0
    return TabularMdp(np.repeat(step[None], H, axis=0), 0)


def m2_profile(n: int, H: int = 2) -> RewardProfile:
    """The M2 reward profiles: n=1 pays 1[s=s1]; n=2 adds agent 2 paid 1[s=s0]."""
    in_s1 = np.zeros((H, 2, 2))
    in_s1[:, 1, :] = 1.0
    if n == 1:
        agents = in_s1[None]
    elif n == 2:
        agents = np.stack([in_s1, 1.0 - in_s1])
    else:
        raise InputError("M2 profiles are defined for n in {1, 2}")
    return RewardProfile(np.zeros((H, 2, 2)), agents, r_max=float(n))


# ---------------------------------------------------------------------------
# Persistence


def _nested(arr: np.ndarray) -> list:
    return np.asarray(arr, dtype=float).tolist()


def mdp_to_dict(mdp: TabularMdp, profile: RewardProfile | None = None) -> dict:
    out = {
        "schema": MDP_SCHEMA,
        "S": mdp.S,
        "A": mdp.A,
        "H": mdp.H,
        "s0": mdp.s0,
        "transition": _nested(mdp.transition),
    }
    if profile is not None:
        out["rewards"] = {
            "n": profile.n,
            "r_max": profile.r_max,
            "role": profile.role,
            "seller": _nested(profile.seller),
            "agents": _nested(profile.agents),
        }
    return out


def mdp_from_dict(doc: dict) -> tuple[TabularMdp, RewardProfile | None]:
    for key in ("S", "A", "H", "transition"):
        if key not in doc:
            raise InputError(f"instance is missing field {key!r}")
    S, A, H = int(doc["S"]), int(doc["A"]), int(doc["H"])
    P = np.asarray(doc["transition"], dtype=float)
    if P.shape != (H, S, A, S):
        raise InputError(f"transition has shape {P.shape}, expected {(H, S, A, S)}")
    mdp = TabularMdp(P, int(doc.get("s0", 0)))
    profile = None
    if "rewards" in doc:
        rw = doc["rewards"]
        for key in ("n", "r_max", "seller", "agents"):
            if key not in rw:
                raise InputError(f"rewards is missing field {key!r}")
        profile = RewardProfile(
            np.asarray(rw["seller"], dtype=float),
            np.asarray(rw["agents"], dtype=float),
            float(rw["r_max"]),
            rw.get("role", "actual"),
        )
        if profile.n != int(rw["n"]) or profile.shape != mdp.shape:
            raise InputError("reward arrays disagree with the declared dimensions")
    return mdp, profile


def save_instance(path: str | Path, mdp: TabularMdp, profile: RewardProfile | None = None) -> None:
    Path(path).write_text(json.dumps(mdp_to_dict(mdp, profile)))


def load_instance(path: str | Path) -> tuple[TabularMdp, RewardProfile | None]:
    return mdp_from_dict(json.loads(Path(path).read_text()))


__all__: Sequence[str] = [
    "InputError",
    "TabularMdp",
    "RewardProfile",
    "StagePolicy",
    "MixturePolicy",
    "QTable",
    "VisitationMeasure",
    "box_bounds",
    "bellman_backup",
    "exact_policy_q",
    "policy_q_table",
    "policy_value",
    "greedy_actions",
    "exact_optimal",
    "optimal_value",
    "visitation",
    "mixture_visitation",
    "mixture_value",
    "simulate_returns",
    "random_instance",
    "m2_mdp",
    "m2_profile",
    "save_instance",
    "load_instance",
    "mdp_to_dict",
    "mdp_from_dict",
]
