"""Distribution-shift coefficients, error-term calculators and bound comparisons."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .learner.evaluation import Mode
from .mdp import InputError, StagePolicy, TabularMdp, VisitationMeasure, bellman_backup, box_bounds

Measure = VisitationMeasure | np.ndarray


def _density(m: Measure) -> np.ndarray:
    return m.d if isinstance(m, VisitationMeasure) else np.asarray(m, dtype=float)


def shift_coefficient(nu: Measure, mu: Measure) -> float:
    """Worst ratio of nu- to mu-weighted squared Bellman residuals over the tabular class.

    Residuals can be concentrated on any single cell, so the supremum is the
    largest density ratio ``nu_h(s, a) / mu_h(s, a)`` over nu-supported cells,
    and ``inf`` when nu charges a cell that mu never visits.
    """
    d_nu, d_mu = _density(nu), _density(mu)
    if d_nu.shape != d_mu.shape:
        raise InputError(f"measure shapes differ: {d_nu.shape} vs {d_mu.shape}")
    support = d_nu > 0
    if not support.any():
        return 0.0
    if np.any(d_mu[support] <= 0):
        return math.inf
    return float(np.max(d_nu[support] / d_mu[support]))


def residual_ratio(nu: Measure, mu: Measure, residual: np.ndarray, h: int) -> float:
    """``E_nu_h[e^2] / E_mu_h[e^2]`` for one residual table ``e`` of shape (S, A)."""
    d_nu, d_mu = _density(nu)[h], _density(mu)[h]
    e2 = np.asarray(residual, dtype=float) ** 2
    num, den = float(np.sum(d_nu * e2)), float(np.sum(d_mu * e2))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def shift_ratio_search(
    mdp: TabularMdp,
    policy: StagePolicy,
    nu: Measure,
    mu: Measure,
    r_max: float,
    draws: int,
    rng: np.random.Generator,
) -> float:
    """Largest residual ratio found over random boxed ``(f1, f2, h, r)`` draws.

    Residuals use the exact policy Bellman operator of ``mdp``. Half of the
    draws perturb a single random cell to probe the concentrated case.
    """
    H, S, A = mdp.shape
    bound = box_bounds(H, r_max)
    best = 0.0
    for k in range(draws):
        h = int(rng.integers(H))
        reward = rng.uniform(-r_max, r_max, size=(S, A))
        f2_next = rng.uniform(-bound[h + 1], bound[h + 1], size=(S, A)) if h + 1 < H else None
        target = bellman_backup(mdp, reward, policy, f2_next, h)
        if k % 2:
            f1 = target.copy()
            s, a = rng.integers(S), rng.integers(A)
            f1[s, a] = rng.uniform(-bound[h], bound[h])
        else:
            f1 = rng.uniform(-bound[h], bound[h], size=(S, A))
        best = max(best, residual_ratio(nu, mu, f1 - target, h))
    return best


def err_opt(H: int, r_max: float, A: int, T: int) -> float:
    """Optimization error ``2 H^2 R sqrt(2 log A / T)`` of soft policy iteration."""
    if T < 1:
        raise InputError("T must be >= 1")
    if H < 1 or A < 1 or r_max < 0:
        raise InputError("err_opt needs H >= 1, A >= 1, r_max >= 0")
    return 2.0 * H**2 * r_max * math.sqrt(2.0 * math.log(A) / T)


def _check_eps(**eps: float) -> None:
    for name, v in eps.items():
        if v < 0 or not math.isfinite(v):
            raise InputError(f"{name} must be finite and nonnegative, got {v}")


def _cube_term(H: int, r_max: float, eps_s: float, eps_f: float) -> float:
    return 2.0 * (H * r_max) ** (1.0 / 3.0) * (eps_s + 3.0 * eps_f) ** (1.0 / 3.0)


def err_stat_unit(H: int, r_max: float, eps_s: float, eps_f: float = 0.0, eps_ff: float = 0.0) -> float:
    """Per-evaluation statistical unit that shift factors multiply in the bounds."""
    _check_eps(eps_s=eps_s, eps_f=eps_f, eps_ff=eps_ff)
    return _cube_term(H, r_max, eps_s, eps_f) + math.sqrt(8.0 * eps_s + 12.0 * eps_f + 3.0 * eps_ff)


@dataclass(frozen=True)
class ErrorBudget:
    H: int
    r_max: float
    err_opt: float
    err_stat: float
    eps_s: float
    eps_f: float = 0.0
    eps_ff: float = 0.0
    shift_coefficients: Mapping = field(default_factory=dict)

    def __post_init__(self):
        _check_eps(err_opt=self.err_opt, err_stat=self.err_stat, eps_s=self.eps_s,
                   eps_f=self.eps_f, eps_ff=self.eps_ff)
        for name, v in self.shift_coefficients.items():
            if np.any(np.asarray(v, dtype=float) < 0):
                raise InputError(f"shift coefficient {name!r} is negative")

    @classmethod
    def make(cls, H: int, r_max: float, A: int, T: int, eps_s: float, eps_f: float = 0.0,
             eps_ff: float = 0.0, shift_coefficients: Mapping | None = None) -> "ErrorBudget":
        return cls(H, r_max, err_opt(H, r_max, A, T), err_stat_unit(H, r_max, eps_s, eps_f, eps_ff),
                   eps_s, eps_f, eps_ff, dict(shift_coefficients or {}))

    @property
    def cube(self) -> float:
        return _cube_term(self.H, self.r_max, self.eps_s, self.eps_f)

    def to_dict(self) -> dict:
        return {
            "H": self.H, "r_max": self.r_max, "err_opt": self.err_opt, "err_stat": self.err_stat,
            "eps_s": self.eps_s, "eps_f": self.eps_f, "eps_ff": self.eps_ff,
            "shift_coefficients": {k: _jsonable(v) for k, v in self.shift_coefficients.items()},
        }


def _jsonable(v):
    arr = np.asarray(v, dtype=float)
    return float(arr) if arr.ndim == 0 else arr.tolist()


# Each entry: (err_opt multiplier, sqrt(eps_f) multiplier, cube-term multiplier,
# shift terms). Shift terms marked "avg" are sequences over SPI iterates whose
# square roots are averaged; "one" terms are single coefficients. Seller terms
# are summed over agents, so they take one entry per agent.
_BOUNDS = {
    ("welfare", None): (1, 1, 1, [("avg", "check_iter_vs_opt")]),
    ("agent", (Mode.PES, Mode.OPT)): (1, 3, 3, [("avg", "check_iter_vs_opt")]),
    ("agent", (Mode.OPT, Mode.PES)): (1, 1, 1, [("avg", "check_iter_vs_opt"), ("one", "hat_minus_i_self"),
                                                ("one", "check_self")]),
    ("seller", (Mode.PES, Mode.OPT)): ("n", "n", "n", [("per_agent_one", "check_minus_i_self"),
                                                       ("per_agent_avg", "check_minus_i_iter_vs_opt"),
                                                       ("n_one", "check_self")]),
    ("seller", (Mode.OPT, Mode.PES)): ("n", "2n", "2n", [("per_agent_avg", "hat_minus_i_iter_vs_opt"),
                                                         ("per_agent_avg", "hat_minus_i_iter_self")]),
    ("ir", (Mode.PES, Mode.OPT)): (2, 3, 3, [("avg", "tilde_iter_vs_opt"), ("avg", "check_minus_i_iter_vs_opt"),
                                             ("one", "check_minus_i_out_self")]),
    ("ir", (Mode.OPT, Mode.PES)): (2, 2, 2, [("avg", "tilde_iter_vs_opt"), ("avg", "hat_minus_i_iter_vs_opt"),
                                             ("avg", "hat_minus_i_iter_self"), ("one", "tilde_self")]),
    ("truthfulness", Mode.OPT): (1, 2, 2, [("avg", "tilde_iter_vs_opt"), ("one", "check_reported_self")]),
    ("truthfulness", Mode.PES): (1, 2, 2, [("avg", "tilde_iter_vs_opt"), ("one", "tilde_self")]),
}

BOUND_KINDS = ("welfare", "agent", "seller", "ir", "truthfulness")


def required_shift_terms(which: str, zetas=(Mode.PES, Mode.OPT)) -> list[str]:
    return [name for _, name in _BOUNDS[_bound_key(which, zetas)][3]]


def _bound_key(which: str, zetas):
    if which not in BOUND_KINDS:
        raise InputError(f"unknown bound {which!r}; expected one of {BOUND_KINDS}")
    if which == "welfare":
        return ("welfare", None)
    if which == "truthfulness":
        z2 = Mode(zetas[1]) if isinstance(zetas, (tuple, list)) else Mode(zetas)
        return ("truthfulness", z2)
    key = (which, (Mode(zetas[0]), Mode(zetas[1])))
    if key not in _BOUNDS:
        raise InputError(f"no {which} bound for zetas {zetas}; use (PES, OPT) or (OPT, PES)")
    return key


def _sqrt_avg(v) -> float:
    return float(np.mean(np.sqrt(np.atleast_1d(np.asarray(v, dtype=float)))))


def theorem_bound(
    budget: ErrorBudget,
    which: str,
    zetas=(Mode.PES, Mode.OPT),
    shift: Mapping | None = None,
    n: int | None = None,
) -> float:
    """Right-hand side of the finite-sample guarantee named by ``which``.

    ``which`` is one of ``welfare``, ``agent``, ``seller``, ``ir`` or
    ``truthfulness``. For ``ir`` the returned number is the (negative) lower
    bound on a truthful agent's utility; every other kind is an upper bound.
    ``shift`` overrides ``budget.shift_coefficients``. The seller bound needs
    ``n`` and takes per-agent lists for its summed terms.

    The seller bound for (OPT, PES) joins its error terms with a sum.
    """
    key = _bound_key(which, zetas)
    c_opt, c_f, c_cube, terms = _BOUNDS[key]
    coeffs = dict(budget.shift_coefficients)
    coeffs.update(shift or {})
    missing = [name for _, name in terms if name not in coeffs]
    if missing:
        raise InputError(f"{which} bound is missing shift terms: {', '.join(missing)}")
    if which == "seller":
        if n is None or n < 1:
            raise InputError("the seller bound needs the number of agents n")
        scale = {"n": n, "2n": 2 * n}
        c_opt, c_f, c_cube = scale[c_opt], scale[c_f], scale[c_cube]
    total_shift = 0.0
    for kind, name in terms:
        v = coeffs[name]
        if kind == "avg":
            total_shift += _sqrt_avg(v)
        elif kind == "one":
            total_shift += math.sqrt(float(v))
        elif kind == "n_one":
            total_shift += n * math.sqrt(float(v))
        else:
            per = list(v)
            if len(per) != n:
                raise InputError(f"shift term {name!r} needs {n} per-agent entries, got {len(per)}")
            total_shift += sum(_sqrt_avg(x) if kind == "per_agent_avg" else math.sqrt(float(x)) for x in per)
    value = (c_opt * budget.err_opt + c_f * math.sqrt(budget.eps_f) + c_cube * budget.cube
             + budget.H * total_shift * budget.err_stat)
    return -value if which == "ir" else value


@dataclass
class BoundComparison:
    rows: list
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"rows": self.rows, "violations": self.violations, "ok": self.ok}


# measured key -> (bound kind, direction); "le" means measured <= bound.
_METRICS = {
    "subopt_welfare": ("welfare", "le"),
    "subopt_agent": ("agent", "le"),
    "subopt_seller": ("seller", "le"),
    "ir_min": ("ir", "ge"),
    "truthfulness_gain": ("truthfulness", "le"),
}


def empirical_vs_bound(
    results: Sequence[Mapping],
    budget: ErrorBudget,
    zetas=(Mode.PES, Mode.OPT),
    shift: Mapping | None = None,
    n: int | None = None,
) -> BoundComparison:
    """Tabulate measured metrics against their bounds and list violations.

    Each result maps metric names (``subopt_welfare``, ``subopt_agent``,
    ``subopt_seller``, ``ir_min``, ``truthfulness_gain``) to a number or a
    per-agent list. Metrics that are absent or ``None`` are skipped.
    """
    rows, violations = [], []
    cache: dict = {}
    for idx, res in enumerate(results):
        for metric, (kind, direction) in _METRICS.items():
            measured = res.get(metric)
            if measured is None:
                continue
            if kind not in cache:
                cache[kind] = theorem_bound(budget, kind, zetas, shift, n)
            bound = cache[kind]
            arr = np.atleast_1d(np.asarray(measured, dtype=float))
            if arr.ndim != 1:
                raise InputError(f"result {idx} metric {metric!r} must be a number or a flat list")
            for j, m in enumerate(arr):
                ok = m <= bound if direction == "le" else m >= bound
                row = {"result": idx, "metric": metric, "index": j, "measured": float(m),
                       "bound": bound, "ok": bool(ok)}
                rows.append(row)
                if not ok:
                    violations.append(row)
    return BoundComparison(rows, violations)
