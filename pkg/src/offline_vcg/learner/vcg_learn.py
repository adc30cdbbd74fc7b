"""Offline VCG Learn: pessimistic welfare policy plus estimated Clarke pivot prices."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data import Exclude, OfflineDataset, Total
from ..mdp import InputError, MixturePolicy, RewardProfile
from ..mechanism import MechanismOutcome
from .evaluation import EmpiricalModel, Mode
from .spi import SpiConfig, SpiSide, _run_side, evaluate_mixture


@dataclass(frozen=True)
class VcgLearnConfig:
    spi: SpiConfig
    zeta1: Mode = Mode.PES
    zeta2: Mode = Mode.OPT

    def __post_init__(self):
        object.__setattr__(self, "zeta1", Mode(self.zeta1))
        object.__setattr__(self, "zeta2", Mode(self.zeta2))


@dataclass
class LearnDiagnostics:
    welfare_estimate: float
    g1: np.ndarray
    g2: np.ndarray
    converged: bool
    flags: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    policies: dict = field(default_factory=dict)   # SPI output mixture per selector

    def to_dict(self) -> dict:
        return {
            "welfare_estimate": self.welfare_estimate,
            "g1": [float(x) for x in self.g1],
            "g2": [float(x) for x in self.g2],
            "converged": self.converged,
            "flags": self.flags,
        }


def _side_flags(side: SpiSide) -> dict:
    return {
        "converged": side.converged,
        "max_iterations": max(e.iterations for e in side.evaluations),
        "max_grad_norm": max(e.grad_norm for e in side.evaluations),
    }


def offline_vcg_learn(
    dataset: OfflineDataset,
    reported: RewardProfile,
    cfg: VcgLearnConfig,
    s0: int = 0,
) -> tuple[MechanismOutcome, LearnDiagnostics]:
    """Learn ``(pi_check, p_hat)`` from one shared dataset.

    Only the SPI sides that the prices consume are run: the pessimistic side
    for the welfare reward and the ``zeta1`` side for each ``R_-i``.
    """
    if reported.n != dataset.n or reported.shape != (dataset.H, dataset.S, dataset.A):
        raise InputError("dataset and reported profile disagree on shape")
    spi = cfg.spi
    welfare = _run_side(EmpiricalModel.build(dataset, reported, Total()), spi, Mode.PES, s0)
    policy: MixturePolicy = welfare.mixture
    flags = {"total": _side_flags(welfare)}
    traces = {"total": welfare.trace}
    policies = {"total": policy}
    g1 = np.zeros(reported.n)
    g2 = np.zeros(reported.n)
    for i in range(reported.n):
        model = EmpiricalModel.build(dataset, reported, Exclude(i))
        side = _run_side(model, spi, cfg.zeta1, s0)
        g1[i] = side.value
        g2[i], evals = evaluate_mixture(model, policy, spi.eval_for(cfg.zeta2), s0)
        flags[f"exclude({i})"] = _side_flags(side)
        flags[f"exclude({i})/eval"] = {
            "converged": all(e.converged for e in evals),
            "max_iterations": max(e.iterations for e in evals),
        }
        traces[f"exclude({i})"] = side.trace
        policies[f"exclude({i})"] = side.mixture
    converged = all(f["converged"] for f in flags.values())
    outcome = MechanismOutcome(policy, g1 - g2, "learned")
    return outcome, LearnDiagnostics(welfare.value, g1, g2, converged, flags, traces, policies)
