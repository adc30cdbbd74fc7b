"""Regularization / step-size schedules and the statistical-error level."""
from __future__ import annotations

import math

from ..mdp import InputError

EPS_S_CONSTANT = 5136.0
POLICY_DIAMETER = 2.0  # sup over (h, s) of the l1 distance between two action distributions


def compute_lambda_eta(r_max: float, H: int, A: int, T: int, eps_s: float, eps_f: float = 0.0) -> tuple[float, float]:
    """``lam = (r_max / (H^2 (eps_s + 3 eps_f)^2))^(1/3)``, ``eta = sqrt(log A / (2 H^2 r_max^2 T))``."""
    if min(r_max, H, A, T) <= 0 or eps_s < 0 or eps_f < 0:
        raise InputError("compute_lambda_eta needs positive r_max, H, A, T and nonnegative errors")
    denom = eps_s + 3.0 * eps_f
    if denom == 0:
        raise InputError("lambda is undefined when eps_s + 3 eps_f = 0")
    lam = (r_max / (H**2 * denom**2)) ** (1.0 / 3.0)
    eta = math.sqrt(math.log(A) / (2.0 * H**2 * r_max**2 * T))
    return lam, eta


def compute_eta(r_max: float, H: int, A: int, T: int) -> float:
    return compute_lambda_eta(r_max, H, A, T, 1.0)[1]


def covering_radii(K: int, H: int, r_max: float) -> tuple[float, float]:
    """Radii at which the value class and the policy class are covered."""
    return 19.0 * H**3 * r_max**3 / K, 19.0 * H**4 * r_max**4 / K


def _grid_log(H: int, r_max: float, radius: float) -> float:
    total = 0.0
    for h in range(1, H + 1):
        width = (H - h + 1) * r_max
        if radius < width:
            total += math.log(math.floor(width / radius) + 1)
    return total


def covering_log_bounds(
    S: int, A: int, H: int, T: int, eta: float, r_max: float, radius: float
) -> tuple[float, float]:
    """Log covering numbers of the boxed tabular class and of the SPI policy class.

    The value class is covered by a uniform grid of spacing ``2 * radius`` per
    coordinate. Softmax policies move by at most ``2 eta T`` times the sup-norm
    change of their accumulated scores, so the policy class is covered by
    covering every score table at ``radius / (2 eta T)``.
    """
    if radius <= 0:
        raise InputError("radius must be positive")
    log_f = S * A * _grid_log(H, r_max, radius)
    if radius >= POLICY_DIAMETER or eta * T == 0:
        return log_f, 0.0
    radius_pi = radius / (2.0 * eta * T)
    log_pi = T * H * S * A * _grid_log(H, r_max, radius_pi)
    return log_f, log_pi


def epsilon_s(
    K: int, delta: float, n: int, H: int, r_max: float, log_cov_f: float, log_cov_pi: float
) -> float:
    """Statistical error level of the good event."""
    if K < 1:
        raise InputError("K must be >= 1")
    if not 0 < delta < 1:
        raise InputError(f"delta must lie in (0, 1), got {delta}")
    log_term = math.log(56.0 * n * H / delta) + log_cov_f + log_cov_pi
    return EPS_S_CONSTANT / K * H**4 * r_max**4 * log_term


def theory_epsilon_s(K: int, delta: float, n: int, S: int, A: int, H: int, T: int, eta: float, r_max: float) -> dict:
    """``eps_s`` with covering numbers of the tabular class at the prescribed radii."""
    rad_f, rad_pi = covering_radii(K, H, r_max)
    log_f, _ = covering_log_bounds(S, A, H, T, eta, r_max, rad_f)
    _, log_pi = covering_log_bounds(S, A, H, T, eta, r_max, rad_pi)
    eps = epsilon_s(K, delta, n, H, r_max, log_f, log_pi)
    return {
        "eps_s": eps,
        "radius_f": rad_f,
        "radius_pi": rad_pi,
        "log_cov_f": log_f,
        "log_cov_pi": log_pi,
    }
