"""Regularized optimistic / pessimistic policy evaluation over the tabular class.

For tabular ``f`` the inner minimization over ``g`` has a closed form: the
minimizer is the per-cell mean of the bootstrapped targets, and the excess loss
is ``sum_{s,a} mu_hat_h(s,a) (f_h(s,a) - g*_h(s,a))^2``. The whole problem
therefore only needs the empirical cell weights, mean rewards and empirical
transitions, which ``EmpiricalModel`` caches.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .. import kernels
from ..data import (
    EmptyDatasetError,
    OfflineDataset,
    RewardSelector,
    aggregate_rewards,
    cell_counts,
)
from ..mdp import InputError, QTable, RewardProfile, StagePolicy, box_bounds


class Mode(str, Enum):
    OPT = "OPT"
    PES = "PES"

    @property
    def sign(self) -> float:
        """Coefficient of ``f_1(s0, pi)`` in the objective."""
        return -1.0 if self is Mode.OPT else 1.0


@dataclass(frozen=True)
class EvalConfig:
    lam: float
    mode: Mode = Mode.PES
    max_iterations: int = 5000
    step_size: float | None = None
    tolerance: float = 1e-9
    unseen_init: str = "edge"
    warm_start: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if not self.lam > 0:
            raise InputError(f"lambda must be positive, got {self.lam}")
        if self.max_iterations < 1:
            raise InputError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise InputError("tolerance must be positive")
        if self.unseen_init not in ("edge", "zero"):
            raise InputError(f"unseen_init must be 'edge' or 'zero', got {self.unseen_init!r}")

    def with_mode(self, mode: Mode | str) -> "EvalConfig":
        return EvalConfig(self.lam, Mode(mode), self.max_iterations, self.step_size,
                          self.tolerance, self.unseen_init, self.warm_start)


@dataclass(frozen=True)
class EmpiricalModel:
    """Sufficient statistics of a dataset for one reward selector."""

    mu_hat: np.ndarray      # (H, S, A) cell frequencies
    rbar: np.ndarray        # (H, S, A) mean reward per cell, 0 where unseen
    phat: np.ndarray        # (H, S, A, S) empirical transitions, 0 rows where unseen
    r_max: float

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.mu_hat.shape

    @property
    def seen(self) -> np.ndarray:
        return self.mu_hat > 0

    @classmethod
    def build(cls, dataset: OfflineDataset, reported: RewardProfile, selector: RewardSelector) -> "EmpiricalModel":
        if dataset.K == 0:
            raise EmptyDatasetError("cannot evaluate on an empty dataset")
        H, S, A, K = dataset.H, dataset.S, dataset.A, dataset.K
        r = aggregate_rewards(dataset, reported, selector)
        counts = cell_counts(dataset)
        rsum = np.zeros((H, S * A))
        trans = np.zeros((H, S * A * S))
        for h in range(H):
            cell = dataset.states[h] * A + dataset.actions[h]
            rsum[h] = np.bincount(cell, weights=r[h], minlength=S * A)
            trans[h] = np.bincount(cell * S + dataset.next_states[h], minlength=S * A * S)
        safe = np.maximum(counts, 1.0)
        rbar = rsum.reshape(H, S, A) / safe
        phat = trans.reshape(H, S, A, S) / safe[..., None]
        return cls(counts / K, rbar, phat, dataset.r_max)

    def targets_mean(self, f_next: np.ndarray | None, policy: StagePolicy, h: int) -> np.ndarray:
        """Unclipped ``g*_h``: mean bootstrapped target per cell (0 where unseen)."""
        g = self.rbar[h].copy()
        if f_next is not None and h + 1 < self.shape[0]:
            v_next = np.einsum("sa,sa->s", policy.probs[h + 1], f_next)
            g += self.phat[h] @ v_next
        return np.where(self.seen[h], g, 0.0)


@dataclass(frozen=True)
class EvalResult:
    q: QTable
    value: float            # f_1(s0, pi_1)
    objective: float
    iterations: int
    converged: bool
    grad_norm: float
    mode: Mode


def _per_tuple_targets(dataset, reported, selector, policy, f_next, h):
    r = aggregate_rewards(dataset, reported, selector)[h]
    if f_next is None or h + 1 >= dataset.H:
        return r
    v_next = np.einsum("sa,sa->s", policy.probs[h + 1], np.asarray(f_next, dtype=float))
    return r + v_next[dataset.next_states[h]]


def empirical_loss(
    f_h: np.ndarray,
    f_next: np.ndarray | None,
    policy: StagePolicy,
    dataset: OfflineDataset,
    selector: RewardSelector,
    reported: RewardProfile,
    h: int,
) -> float:
    """Mean squared regression loss of ``f_h`` against bootstrapped targets."""
    if dataset.K == 0:
        raise EmptyDatasetError("empirical loss of an empty dataset")
    y = _per_tuple_targets(dataset, reported, selector, policy, f_next, h)
    pred = np.asarray(f_h, dtype=float)[dataset.states[h], dataset.actions[h]]
    return float(np.mean((pred - y) ** 2))


def empirical_backup(
    f_next: np.ndarray | None,
    policy: StagePolicy,
    dataset: OfflineDataset,
    selector: RewardSelector,
    reported: RewardProfile,
    h: int,
    cfg: EvalConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Minimizer of the step-``h`` regression loss, clipped to the step box.

    Returns ``(g, unseen)``; unseen cells take the configured default.
    """
    model = EmpiricalModel.build(dataset, reported, selector)
    bound = box_bounds(dataset.H, dataset.r_max)[h]
    g = np.clip(model.targets_mean(f_next, policy, h), -bound, bound)
    unseen = ~model.seen[h]
    g[unseen] = _unseen_value(cfg, bound) if cfg is not None else 0.0
    return g, unseen


def _unseen_value(cfg: EvalConfig, bound: float) -> float:
    if cfg.unseen_init == "zero":
        return 0.0
    return -bound if cfg.mode is Mode.PES else bound


def bellman_error_on_model(model: EmpiricalModel, f: np.ndarray, policy: StagePolicy, h: int) -> float:
    f_next = f[h + 1] if h + 1 < model.shape[0] else None
    resid = f[h] - model.targets_mean(f_next, policy, h)
    return float(np.sum(model.mu_hat[h] * resid * resid))


def empirical_bellman_error(
    f: QTable | np.ndarray,
    policy: StagePolicy,
    dataset: OfflineDataset,
    selector: RewardSelector,
    reported: RewardProfile,
    h: int,
) -> float:
    """Excess loss ``L(f_h, f_{h+1}) - min_g L(g, f_{h+1})`` via the weighted residual."""
    values = f.values if isinstance(f, QTable) else np.asarray(f, dtype=float)
    model = EmpiricalModel.build(dataset, reported, selector)
    return bellman_error_on_model(model, values, policy, h)


def objective_value(model: EmpiricalModel, f: np.ndarray, policy: StagePolicy, s0: int, cfg: EvalConfig) -> float:
    return kernels.qp_objective(np.ascontiguousarray(f), model.mu_hat, model.rbar, model.phat,
                                policy.probs, s0, cfg.mode.sign, cfg.lam)


def _initial_point(model: EmpiricalModel, policy: StagePolicy, s0: int, cfg: EvalConfig) -> np.ndarray:
    """Unconstrained stationary point, clipped to the boxes.

    Setting the gradient to zero on seen cells gives residuals
    ``-sigma * rho_h / (2 lam mu_hat_h)`` where ``rho`` is the visitation of
    ``pi`` under the empirical model, started at ``s0`` and propagated only
    through seen cells. Values then follow by backward substitution.
    """
    H, S, A = model.shape
    bound = box_bounds(H, model.r_max)
    seen = model.seen
    pi = policy.probs
    fill = _unseen_value(cfg, 1.0)
    f = np.empty((H, S, A))
    if not cfg.warm_start:
        for h in range(H):
            f[h] = np.where(seen[h], 0.0, fill * bound[h])
        return f
    rho = np.zeros((H, S, A))
    rho[0, s0] = pi[0, s0] * seen[0, s0]
    for h in range(H - 1):
        w = np.einsum("sa,sat->t", rho[h], model.phat[h])
        rho[h + 1] = w[:, None] * pi[h + 1] * seen[h + 1]
    resid = np.where(seen, -cfg.mode.sign * rho / (2.0 * cfg.lam * np.where(seen, model.mu_hat, 1.0)), 0.0)
    nxt = None
    for h in range(H - 1, -1, -1):
        target = model.targets_mean(nxt, policy, h)
        f[h] = np.clip(np.where(seen[h], target + resid[h], fill * bound[h]), -bound[h], bound[h])
        nxt = f[h]
    return f


def default_step(model: EmpiricalModel, lam: float) -> float:
    H = model.shape[0]
    return 1.0 / (2.0 * lam * H * float(model.mu_hat.max()) + 1.0)


def evaluate_on_model(model: EmpiricalModel, policy: StagePolicy, cfg: EvalConfig, s0: int = 0) -> EvalResult:
    """Solve ``min_f sigma f_1(s0, pi) + lam sum_h E_h(f, pi)`` over the boxes."""
    if policy.shape != model.shape:
        raise InputError(f"policy shape {policy.shape} does not match data shape {model.shape}")
    H = model.shape[0]
    bound = box_bounds(H, model.r_max)
    f0 = _initial_point(model, policy, s0, cfg)
    step = cfg.step_size if cfg.step_size is not None else default_step(model, cfg.lam)
    free = model.seen.astype(float)
    f, iters, converged, obj, gnorm = kernels.pgd_box_qp(
        f0, model.mu_hat, model.rbar, model.phat, policy.probs, s0, cfg.mode.sign, cfg.lam,
        bound, free, step, cfg.max_iterations, cfg.tolerance,
    )
    f = np.clip(np.asarray(f), -bound[:, None, None], bound[:, None, None])
    q = QTable(f, model.r_max)
    return EvalResult(q, q.value_at(s0, policy), float(obj), int(iters), bool(converged), float(gnorm), cfg.mode)


def evaluate_policy(
    dataset: OfflineDataset,
    reported: RewardProfile,
    selector: RewardSelector,
    policy: StagePolicy,
    cfg: EvalConfig,
    s0: int = 0,
) -> EvalResult:
    if not isinstance(policy, StagePolicy):
        raise InputError("evaluate_policy takes a StagePolicy; evaluate mixtures per component")
    return evaluate_on_model(EmpiricalModel.build(dataset, reported, selector), policy, cfg, s0)
