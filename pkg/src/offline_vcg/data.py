"""Offline datasets under the i.i.d. per-step collection regime.

Every step ``h`` holds ``K`` independent tuples ``(s, a, reported rewards, s')``
with ``(s, a) ~ mu_h`` and ``s' ~ P_h(.|s, a)``. Tuples are not linked across
steps. Randomness comes from one stream per ``(seed, h, block)`` so any block
of tuples can be generated independently of the others.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .mdp import InputError, RewardProfile, StagePolicy, TabularMdp, VisitationMeasure, visitation

DATASET_SCHEMA = "offline-vcg/dataset-v1"
BLOCK = 4096


class EmptyDatasetError(InputError):
    pass


class DatasetParseError(ValueError):
    """Malformed dataset file; ``line`` is 1-based."""

    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class DataDistribution:
    mu: np.ndarray

    def __post_init__(self):
        VisitationMeasure(self.mu)  # validates the per-step simplex
        mu = np.array(self.mu, dtype=float)
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)

    @classmethod
    def uniform(cls, H: int, S: int, A: int) -> "DataDistribution":
        return cls(np.full((H, S, A), 1.0 / (S * A)))

    @classmethod
    def from_policy(cls, mdp: TabularMdp, behavior: StagePolicy) -> "DataDistribution":
        return cls(visitation(mdp, behavior).d)

    @classmethod
    def point_mass(cls, H: int, S: int, A: int, s: int, a: int) -> "DataDistribution":
        mu = np.zeros((H, S, A))
        mu[:, s, a] = 1.0
        return cls(mu)


@dataclass(frozen=True)
class OfflineDataset:
    """Per-step tuple arrays, each with leading shape ``(H, K)``.

    ``rewards`` has shape ``(H, K, n)`` and holds the agents' reported values.
    """

    S: int
    A: int
    r_max: float
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    seed: int = 0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64)
        actions = np.asarray(self.actions, dtype=np.int64)
        nxt = np.asarray(self.next_states, dtype=np.int64)
        rewards = np.asarray(self.rewards, dtype=float)
        if states.ndim != 2 or actions.shape != states.shape or nxt.shape != states.shape:
            raise InputError("states, actions and next_states must share shape (H, K)")
        if rewards.ndim != 3 or rewards.shape[:2] != states.shape:
            raise InputError("rewards must have shape (H, K, n)")
        if states.size and (
            states.min() < 0 or states.max() >= self.S or nxt.min() < 0 or nxt.max() >= self.S
            or actions.min() < 0 or actions.max() >= self.A
        ):
            raise InputError("state or action index out of range")
        if rewards.size and (rewards.min() < 0 or rewards.max() > 1):
            raise InputError("reported rewards must lie in [0, 1]")
        for name, arr in (("states", states), ("actions", actions), ("next_states", nxt), ("rewards", rewards)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def H(self) -> int:
        return self.states.shape[0]

    @property
    def K(self) -> int:
        return self.states.shape[1]

    @property
    def n(self) -> int:
        return self.rewards.shape[2]

    def with_rewards(self, reported: RewardProfile) -> "OfflineDataset":
        """Same transitions with reported rewards re-evaluated from ``reported``."""
        h_idx = np.arange(self.H)[:, None]
        vals = np.moveaxis(reported.agents[:, h_idx, self.states, self.actions], 0, -1)
        return OfflineDataset(self.S, self.A, self.r_max, self.states, self.actions, vals,
                              self.next_states, self.seed, dict(self.provenance))


# ---------------------------------------------------------------------------
# Reward selectors


@dataclass(frozen=True)
class Total:
    """All reported rewards plus the seller's."""


@dataclass(frozen=True)
class Exclude:
    """Everything except agent ``i``."""

    i: int


@dataclass(frozen=True)
class SinglePlus:
    """Agent ``i``'s actual reward plus everyone else's reported one."""

    i: int
    actual: np.ndarray = field(compare=False)


RewardSelector = Total | Exclude | SinglePlus


def selector_table(reported: RewardProfile, selector: RewardSelector) -> np.ndarray:
    """Dense ``(H, S, A)`` reward the selector picks out of a profile."""
    if isinstance(selector, Total):
        return reported.total()
    if isinstance(selector, Exclude):
        return reported.exclude(selector.i)
    if isinstance(selector, SinglePlus):
        return reported.exclude(selector.i) + np.asarray(selector.actual, dtype=float)
    raise InputError(f"unknown selector {selector!r}")


def selector_name(selector: RewardSelector) -> str:
    if isinstance(selector, Total):
        return "total"
    return f"{type(selector).__name__.lower()}({selector.i})"


# ---------------------------------------------------------------------------
# Sampling


def _block_uniforms(seed: int, h: int, block: int, count: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, h, block])))
    return rng.random((count, 2))


def _inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, cdf.shape[-1] - 1)


def sample_dataset(
    mdp: TabularMdp,
    reported: RewardProfile,
    dist: DataDistribution,
    K: int,
    seed: int,
    noise: Callable[[np.random.Generator, tuple], np.ndarray] | None = None,
) -> OfflineDataset:
    """Draw ``K`` tuples per step.

    ``noise`` (off by default) receives a generator and the reward array shape
    and returns an additive perturbation; results are clipped to [0, 1].
    """
    if dist.mu.shape != mdp.shape or reported.shape != mdp.shape:
        raise InputError("distribution, profile and MDP shapes disagree")
    if K < 0:
        raise InputError("K must be nonnegative")
    H, S, A = mdp.shape
    states = np.zeros((H, K), dtype=np.int64)
    actions = np.zeros((H, K), dtype=np.int64)
    nxt = np.zeros((H, K), dtype=np.int64)
    for h in range(H):
        cdf_sa = np.cumsum(dist.mu[h].ravel())
        cdf_sa /= cdf_sa[-1]
        for block, start in enumerate(range(0, K, BLOCK)):
            stop = min(start + BLOCK, K)
            u = _block_uniforms(seed, h, block, stop - start)
            cell = _inverse_cdf(cdf_sa, u[:, 0])
            s, a = np.divmod(cell, A)
            row_cdf = np.cumsum(mdp.transition[h, s, a], axis=1)
            s_next = np.minimum((u[:, 1:2] >= row_cdf).sum(axis=1), S - 1)
            states[h, start:stop] = s
            actions[h, start:stop] = a
            nxt[h, start:stop] = s_next
    h_idx = np.arange(H)[:, None]
    rewards = np.moveaxis(reported.agents[:, h_idx, states, actions], 0, -1)
    if noise is not None:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, H, 2**31 - 1])))
        rewards = np.clip(rewards + noise(rng, rewards.shape), 0.0, 1.0)
    provenance = {"generator": "iid-per-step", "K": K, "seed": seed, "block": BLOCK}
    return OfflineDataset(S, A, reported.r_max, states, actions, rewards, nxt, seed, provenance)


def aggregate_rewards(
    dataset: OfflineDataset, reported: RewardProfile, selector: RewardSelector
) -> np.ndarray:
    """Per-tuple scalar reward ``r_h^tau`` for the selector, shape ``(H, K)``."""
    if reported.n != dataset.n:
        raise InputError("profile and dataset disagree on n")
    h_idx = np.arange(dataset.H)[:, None]
    seller = reported.seller[h_idx, dataset.states, dataset.actions]
    if isinstance(selector, Total):
        return seller + dataset.rewards.sum(axis=2)
    reported._check_agent(selector.i)
    others = dataset.rewards.sum(axis=2) - dataset.rewards[:, :, selector.i]
    if isinstance(selector, Exclude):
        return seller + others
    if isinstance(selector, SinglePlus):
        actual = np.asarray(selector.actual, dtype=float)
        return seller + others + actual[h_idx, dataset.states, dataset.actions]
    raise InputError(f"unknown selector {selector!r}")


def cell_counts(dataset: OfflineDataset) -> np.ndarray:
    counts = np.zeros((dataset.H, dataset.S * dataset.A))
    for h in range(dataset.H):
        counts[h] = np.bincount(dataset.states[h] * dataset.A + dataset.actions[h],
                                minlength=dataset.S * dataset.A)
    return counts.reshape(dataset.H, dataset.S, dataset.A)


def empirical_visitation(dataset: OfflineDataset) -> VisitationMeasure:
    if dataset.K == 0:
        raise EmptyDatasetError("empirical visitation of an empty dataset")
    return VisitationMeasure(cell_counts(dataset) / dataset.K)


# ---------------------------------------------------------------------------
# Persistence (JSON lines: one header, then one record per (h, tau))


def save_dataset(path: str | Path, dataset: OfflineDataset) -> None:
    header = {
        "schema": DATASET_SCHEMA,
        "S": dataset.S,
        "A": dataset.A,
        "H": dataset.H,
        "n": dataset.n,
        "K": dataset.K,
        "seed": dataset.seed,
        "r_max": dataset.r_max,
        "provenance": dataset.provenance,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for h in range(dataset.H):
        for tau in range(dataset.K):
            lines.append(json.dumps({
                "h": h,
                "tau": tau,
                "s": int(dataset.states[h, tau]),
                "a": int(dataset.actions[h, tau]),
                "r": [float(x) for x in dataset.rewards[h, tau]],
                "s_next": int(dataset.next_states[h, tau]),
            }))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> OfflineDataset:
    text = Path(path).read_text().splitlines()
    if not text:
        raise DatasetParseError("missing header record", 1)
    try:
        header = json.loads(text[0])
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"header is not JSON ({exc.msg}, offset {exc.pos})", 1) from exc
    for key in ("S", "A", "H", "n", "K", "seed", "r_max"):
        if key not in header:
            raise DatasetParseError(f"header is missing {key!r}", 1)
    H, K, n = int(header["H"]), int(header["K"]), int(header["n"])
    states = np.zeros((H, K), dtype=np.int64)
    actions = np.zeros((H, K), dtype=np.int64)
    nxt = np.zeros((H, K), dtype=np.int64)
    rewards = np.zeros((H, K, n))
    seen = np.zeros((H, K), dtype=bool)
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            h, tau = int(rec["h"]), int(rec["tau"])
            if not (0 <= h < H and 0 <= tau < K):
                raise DatasetParseError(f"index (h={h}, tau={tau}) out of range", lineno)
            r = rec["r"]
            if len(r) != n:
                raise DatasetParseError(f"expected {n} rewards, got {len(r)}", lineno)
            states[h, tau], actions[h, tau], nxt[h, tau] = rec["s"], rec["a"], rec["s_next"]
            rewards[h, tau] = r
        except json.JSONDecodeError as exc:
            raise DatasetParseError(f"{exc.msg} at offset {exc.pos}", lineno) from exc
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DatasetParseError):
                raise
            raise DatasetParseError(f"bad record ({exc!r})", lineno) from exc
        seen[h, tau] = True
    if not seen.all():
        h, tau = np.argwhere(~seen)[0]
        raise DatasetParseError(f"missing record (h={h}, tau={tau})", len(text))
    return OfflineDataset(int(header["S"]), int(header["A"]), float(header["r_max"]), states, actions,
                          rewards, nxt, int(header["seed"]), header.get("provenance", {}))
