"""Soft policy iteration with KL mirror-descent (exponential-weights) updates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import OfflineDataset, RewardSelector
from ..mdp import InputError, MixturePolicy, QTable, RewardProfile, StagePolicy
from .evaluation import EmpiricalModel, EvalConfig, EvalResult, Mode, evaluate_on_model


def mirror_descent_update(policy: StagePolicy, q: QTable | np.ndarray, eta: float) -> StagePolicy:
    """``pi'(a|s) ∝ pi(a|s) exp(eta q(s, a))`` per (h, s)."""
    if eta < 0:
        raise InputError("eta must be nonnegative")
    values = q.values if isinstance(q, QTable) else np.asarray(q, dtype=float)
    logits = eta * values
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = policy.probs * np.exp(logits)
    return StagePolicy(w / w.sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class SpiConfig:
    T: int
    eta: float
    eval_opt: EvalConfig
    eval_pes: EvalConfig

    def __post_init__(self):
        if self.T < 1:
            raise InputError("T must be >= 1")
        if self.eta < 0:
            raise InputError("eta must be nonnegative")
        object.__setattr__(self, "eval_opt", self.eval_opt.with_mode(Mode.OPT))
        object.__setattr__(self, "eval_pes", self.eval_pes.with_mode(Mode.PES))

    @classmethod
    def make(cls, T: int, eta: float, lam: float, **optimizer) -> "SpiConfig":
        base = EvalConfig(lam, Mode.PES, **optimizer)
        return cls(T, eta, base.with_mode(Mode.OPT), base)

    def eval_for(self, mode: Mode | str) -> EvalConfig:
        return self.eval_opt if Mode(mode) is Mode.OPT else self.eval_pes


@dataclass(frozen=True)
class SpiSide:
    """One side (optimistic or pessimistic) of a soft-policy-iteration run."""

    mode: Mode
    mixture: MixturePolicy
    evaluations: tuple      # EvalResult per iterate

    @property
    def iterate_q(self) -> list[QTable]:
        return [e.q for e in self.evaluations]

    @property
    def trace(self) -> np.ndarray:
        """Per-iterate ``f_1(s0, pi^(t))``."""
        return np.array([e.value for e in self.evaluations])

    @property
    def value(self) -> float:
        """Mixture estimate: average of the per-component evaluations."""
        return float(self.trace.mean())

    @property
    def converged(self) -> bool:
        return all(e.converged for e in self.evaluations)


@dataclass(frozen=True)
class SpiOutput:
    optimistic: SpiSide
    pessimistic: SpiSide

    def side(self, mode: Mode | str) -> SpiSide:
        return self.optimistic if Mode(mode) is Mode.OPT else self.pessimistic


def _run_side(model: EmpiricalModel, cfg: SpiConfig, mode: Mode, s0: int) -> SpiSide:
    H, S, A = model.shape
    pi = StagePolicy.uniform(H, S, A)
    ecfg = cfg.eval_for(mode)
    policies: list[StagePolicy] = []
    evals: list[EvalResult] = []
    for _ in range(cfg.T):
        res = evaluate_on_model(model, pi, ecfg, s0)
        policies.append(pi)
        evals.append(res)
        pi = mirror_descent_update(pi, res.q, cfg.eta)
    return SpiSide(mode, MixturePolicy(tuple(policies)), tuple(evals))


def soft_policy_iteration_on_model(model: EmpiricalModel, cfg: SpiConfig, s0: int = 0) -> SpiOutput:
    # The output mixtures are re-evaluated component-wise with the same data,
    # config and mode as inside the loop, so the loop evaluations are reused.
    return SpiOutput(_run_side(model, cfg, Mode.OPT, s0), _run_side(model, cfg, Mode.PES, s0))


def soft_policy_iteration(
    dataset: OfflineDataset,
    reported: RewardProfile,
    selector: RewardSelector,
    cfg: SpiConfig,
    s0: int = 0,
) -> SpiOutput:
    return soft_policy_iteration_on_model(EmpiricalModel.build(dataset, reported, selector), cfg, s0)


def evaluate_mixture(model: EmpiricalModel, mixture: MixturePolicy, cfg: EvalConfig, s0: int = 0) -> tuple[float, list[EvalResult]]:
    """Run the evaluation once per component and average ``f_1(s0, pi^(t))``."""
    results = [evaluate_on_model(model, c, cfg, s0) for c in mixture.components]
    return float(np.mean([r.value for r in results])), results
