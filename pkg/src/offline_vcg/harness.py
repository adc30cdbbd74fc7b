"""Config-driven experiment runner behind the ``offline-vcg`` command."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DataDistribution, sample_dataset
from .diagnostics import ErrorBudget, empirical_vs_bound, shift_coefficient
from .learner import (
    Mode,
    SpiConfig,
    VcgLearnConfig,
    compute_lambda_eta,
    offline_vcg_learn,
    theory_epsilon_s,
)
from .mdp import (
    InputError,
    RewardProfile,
    StagePolicy,
    TabularMdp,
    exact_optimal,
    load_instance,
    m2_mdp,
    m2_profile,
    mixture_visitation,
    random_instance,
    visitation,
)
from .mechanism import (
    MechanismOutcome,
    agent_utility,
    check_desiderata,
    exact_vcg,
    family_from_spec,
    subopt_agent,
    subopt_seller,
    subopt_welfare,
    vcg_price,
)

CONFIG_SCHEMA = "offline-vcg/run-v1"
REPORT_SCHEMA = "offline-vcg/report-v1"
NOT_COMPUTED = "nc"
ALL_METRICS = ("subopt_welfare", "subopt_agent", "subopt_seller", "ir_min", "truthfulness_gain",
               "prices", "price_error", "policy_price_error", "converged")


class ConfigError(InputError):
    """Invalid run configuration; ``path`` names the offending field."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


# ---------------------------------------------------------------------------
# Config parsing


_MISSING = object()


def _get(doc: dict, key: str, path: str, default=_MISSING):
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected an object")
    if key not in doc:
        if default is _MISSING:
            raise ConfigError(f"{path}.{key}" if path else key, "required field missing")
        return default
    return doc[key]


def _int(v, path: str, lo: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(path, f"expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(path, f"must be >= {lo}, got {v}")
    return v


def _num(v, path: str, positive: bool = False) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(path, f"expected a finite number, got {v!r}")
    if positive and v <= 0:
        raise ConfigError(path, f"must be positive, got {v}")
    return float(v)


def _check_keys(doc: dict, allowed: set, path: str) -> None:
    extra = sorted(set(doc) - allowed)
    if extra:
        raise ConfigError(f"{path}.{extra[0]}" if path else extra[0], "unknown field")


@dataclass(frozen=True)
class InstanceSpec:
    kind: str                # "m2" | "random" | "file"
    params: dict

    @classmethod
    def parse(cls, doc, path="instance") -> "InstanceSpec":
        kind = _get(doc, "kind", path)
        if kind == "m2":
            _check_keys(doc, {"kind", "n", "H"}, path)
            n = _int(_get(doc, "n", path, 1), f"{path}.n", 1)
            if n not in (1, 2):
                raise ConfigError(f"{path}.n", "M2 instances exist for n in {1, 2}")
            return cls(kind, {"n": n, "H": _int(_get(doc, "H", path, 2), f"{path}.H", 1)})
        if kind == "random":
            _check_keys(doc, {"kind", "S", "A", "H", "n", "r_max"}, path)
            params = {k: _int(_get(doc, k, path), f"{path}.{k}", 1) for k in ("S", "A", "H", "n")}
            r = _get(doc, "r_max", path, None)
            params["r_max"] = None if r is None else _num(r, f"{path}.r_max", positive=True)
            return cls(kind, params)
        if kind == "file":
            _check_keys(doc, {"kind", "path"}, path)
            p = _get(doc, "path", path)
            if not isinstance(p, str):
                raise ConfigError(f"{path}.path", "expected a string")
            return cls(kind, {"path": p})
        raise ConfigError(f"{path}.kind", f"unknown instance kind {kind!r}")

    def build(self, seed: int) -> tuple[TabularMdp, RewardProfile]:
        p = self.params
        if self.kind == "m2":
            return m2_mdp(p["H"]), m2_profile(p["n"], p["H"])
        if self.kind == "random":
            rng = np.random.default_rng(seed)
            return random_instance(rng, p["S"], p["A"], p["H"], p["n"], p["r_max"])
        try:
            mdp, prof = load_instance(p["path"])
        except (OSError, ValueError) as exc:
            raise ConfigError("instance.path", str(exc)) from exc
        if prof is None:
            raise ConfigError("instance.path", "instance file carries no reward profile")
        return mdp, prof

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}


@dataclass(frozen=True)
class DataSpec:
    mu: object               # "uniform" | {"kind": "behavior", ...} | {"kind": "explicit", ...}
    K: tuple
    seeds: tuple

    @classmethod
    def parse(cls, doc, path="data") -> "DataSpec":
        _check_keys(doc, {"mu", "K", "seeds"}, path)
        mu = _get(doc, "mu", path, "uniform")
        if mu != "uniform":
            kind = _get(mu, "kind", f"{path}.mu")
            if kind == "behavior":
                pol = _get(mu, "policy", f"{path}.mu", "uniform")
                if pol != "uniform" and not isinstance(pol, list):
                    raise ConfigError(f"{path}.mu.policy", "expected 'uniform' or a nested probability list")
            elif kind == "explicit":
                if not isinstance(_get(mu, "mu", f"{path}.mu"), list):
                    raise ConfigError(f"{path}.mu.mu", "expected a nested list of shape (H, S, A)")
            else:
                raise ConfigError(f"{path}.mu.kind", f"unknown data distribution {kind!r}")
        Ks = _get(doc, "K", path)
        if not isinstance(Ks, list) or not Ks:
            raise ConfigError(f"{path}.K", "expected a nonempty list")
        Ks = tuple(_int(k, f"{path}.K[{j}]", 1) for j, k in enumerate(Ks))
        seeds = _get(doc, "seeds", path, [0])
        if isinstance(seeds, int) and not isinstance(seeds, bool):
            seeds = list(range(_int(seeds, f"{path}.seeds", 1)))
        if not isinstance(seeds, list) or not seeds:
            raise ConfigError(f"{path}.seeds", "expected a nonempty list or a count")
        seeds = tuple(_int(s, f"{path}.seeds[{j}]", 0) for j, s in enumerate(seeds))
        if len(set(seeds)) != len(seeds):
            raise ConfigError(f"{path}.seeds", "seeds must be distinct")
        return cls(mu, Ks, seeds)

    def distribution(self, mdp: TabularMdp) -> DataDistribution:
        H, S, A = mdp.shape
        if self.mu == "uniform":
            return DataDistribution.uniform(H, S, A)
        if self.mu["kind"] == "behavior":
            pol = self.mu.get("policy", "uniform")
            policy = StagePolicy.uniform(H, S, A) if pol == "uniform" else StagePolicy(np.array(pol, dtype=float))
            return DataDistribution.from_policy(mdp, policy)
        return DataDistribution(np.array(self.mu["mu"], dtype=float))

    def to_dict(self) -> dict:
        return {"mu": self.mu, "K": list(self.K), "seeds": list(self.seeds)}


@dataclass(frozen=True)
class LearnerSpec:
    T: int = 256
    zeta1: str = "PES"
    zeta2: str = "OPT"
    lam: dict = field(default_factory=lambda: {"mode": "scaled", "c": 20.0})
    eta: dict = field(default_factory=lambda: {"mode": "fixed", "value": 1.0})
    optimizer: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, doc, path="learner") -> "LearnerSpec":
        doc = {} if doc is None else doc
        _check_keys(doc, {"T", "zeta1", "zeta2", "lambda", "eta", "max_iterations", "tolerance",
                          "unseen_init", "step_size", "warm_start"}, path)
        T = _int(_get(doc, "T", path, 256), f"{path}.T", 1)
        zetas = []
        for z in ("zeta1", "zeta2"):
            v = _get(doc, z, path, "PES" if z == "zeta1" else "OPT")
            if v not in ("PES", "OPT"):
                raise ConfigError(f"{path}.{z}", f"expected 'PES' or 'OPT', got {v!r}")
            zetas.append(v)
        lam = dict(_get(doc, "lambda", path, {"mode": "scaled", "c": 20.0}))
        mode = _get(lam, "mode", f"{path}.lambda")
        if mode == "fixed":
            lam["value"] = _num(_get(lam, "value", f"{path}.lambda"), f"{path}.lambda.value", True)
        elif mode == "scaled":
            lam["c"] = _num(_get(lam, "c", f"{path}.lambda", 20.0), f"{path}.lambda.c", True)
        elif mode == "theory":
            d = _num(_get(lam, "delta", f"{path}.lambda", 0.1), f"{path}.lambda.delta", True)
            if d >= 1:
                raise ConfigError(f"{path}.lambda.delta", "must lie in (0, 1)")
            lam["delta"] = d
        else:
            raise ConfigError(f"{path}.lambda.mode", f"expected fixed, scaled or theory, got {mode!r}")
        eta = dict(_get(doc, "eta", path, {"mode": "fixed", "value": 1.0}))
        emode = _get(eta, "mode", f"{path}.eta")
        if emode == "fixed":
            v = _num(_get(eta, "value", f"{path}.eta"), f"{path}.eta.value")
            if v < 0:
                raise ConfigError(f"{path}.eta.value", "must be nonnegative")
            eta["value"] = v
        elif emode != "theory":
            raise ConfigError(f"{path}.eta.mode", f"expected fixed or theory, got {emode!r}")
        opt = {}
        if "max_iterations" in doc:
            opt["max_iterations"] = _int(doc["max_iterations"], f"{path}.max_iterations", 1)
        if "tolerance" in doc:
            opt["tolerance"] = _num(doc["tolerance"], f"{path}.tolerance", True)
        if "step_size" in doc:
            opt["step_size"] = _num(doc["step_size"], f"{path}.step_size", True)
        if "unseen_init" in doc:
            if doc["unseen_init"] not in ("edge", "zero"):
                raise ConfigError(f"{path}.unseen_init", "expected 'edge' or 'zero'")
            opt["unseen_init"] = doc["unseen_init"]
        if "warm_start" in doc:
            if not isinstance(doc["warm_start"], bool):
                raise ConfigError(f"{path}.warm_start", "expected a boolean")
            opt["warm_start"] = doc["warm_start"]
        return cls(T, zetas[0], zetas[1], lam, eta, opt)

    def hyper(self, K: int, H: int, S: int, A: int, n: int, r_max: float) -> dict:
        """Resolve ``lambda`` and ``eta`` for one K; the theory lambda is always logged."""
        _, eta_theory = compute_lambda_eta(r_max, H, A, self.T, 1.0)
        eta = eta_theory if self.eta["mode"] == "theory" else self.eta["value"]
        delta = self.lam.get("delta", 0.1)
        th = theory_epsilon_s(K, delta, n, S, A, H, self.T, eta, r_max)
        lam_theory = compute_lambda_eta(r_max, H, A, self.T, th["eps_s"])[0]
        mode = self.lam["mode"]
        if mode == "fixed":
            lam = self.lam["value"]
        elif mode == "scaled":
            lam = compute_lambda_eta(r_max, H, A, self.T, self.lam["c"] / K)[0]
        else:
            lam = lam_theory
        return {"lam": lam, "eta": eta, "lam_theory": lam_theory, "eta_theory": eta_theory,
                "eps_s_theory": th["eps_s"], "delta": delta}

    def config(self, lam: float, eta: float) -> VcgLearnConfig:
        return VcgLearnConfig(SpiConfig.make(self.T, eta, lam, **self.optimizer), Mode(self.zeta1), Mode(self.zeta2))

    def to_dict(self) -> dict:
        return {"T": self.T, "zeta1": self.zeta1, "zeta2": self.zeta2, "lambda": self.lam,
                "eta": self.eta, **self.optimizer}


@dataclass(frozen=True)
class EvaluationSpec:
    family: dict = field(default_factory=lambda: {"kind": "grid", "levels": [0.0, 0.5, 1.0], "max_cells": 2})
    metrics: tuple = ALL_METRICS
    desiderata_at: object = "max"     # "max" | "all" | "none" | list of K
    bounds: bool = True

    @classmethod
    def parse(cls, doc, path="evaluation") -> "EvaluationSpec":
        doc = {} if doc is None else doc
        _check_keys(doc, {"family", "metrics", "desiderata_at", "bounds"}, path)
        fam = _get(doc, "family", path, {"kind": "grid", "levels": [0.0, 0.5, 1.0], "max_cells": 2})
        try:
            family_from_spec(fam)
        except (InputError, TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"{path}.family", str(exc)) from exc
        metrics = _get(doc, "metrics", path, list(ALL_METRICS))
        if not isinstance(metrics, list):
            raise ConfigError(f"{path}.metrics", "expected a list")
        for j, m in enumerate(metrics):
            if m not in ALL_METRICS:
                raise ConfigError(f"{path}.metrics[{j}]", f"unknown metric {m!r}")
        at = _get(doc, "desiderata_at", path, "max")
        if not (at in ("max", "all", "none") or (isinstance(at, list) and all(isinstance(k, int) for k in at))):
            raise ConfigError(f"{path}.desiderata_at", "expected 'max', 'all', 'none' or a list of K")
        b = _get(doc, "bounds", path, True)
        if not isinstance(b, bool):
            raise ConfigError(f"{path}.bounds", "expected a boolean")
        return cls(fam, tuple(m for m in ALL_METRICS if m in metrics), at, b)

    def desiderata_for(self, K: int, Ks) -> bool:
        if self.desiderata_at == "all":
            return True
        if self.desiderata_at == "none":
            return False
        if self.desiderata_at == "max":
            return K == max(Ks)
        return K in self.desiderata_at

    def to_dict(self) -> dict:
        return {"family": self.family, "metrics": list(self.metrics),
                "desiderata_at": self.desiderata_at, "bounds": self.bounds}


@dataclass(frozen=True)
class RunConfig:
    instance: InstanceSpec
    data: DataSpec
    learner: LearnerSpec
    evaluation: EvaluationSpec
    seed: int = 0
    out: str | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("$", "config must be a JSON object")
        _check_keys(doc, {"schema", "seed", "instance", "data", "learner", "evaluation", "output"}, "")
        schema = _get(doc, "schema", "")
        if schema != CONFIG_SCHEMA:
            raise ConfigError("schema", f"expected {CONFIG_SCHEMA!r}, got {schema!r}")
        out = _get(doc, "output", "", {}) or {}
        out_dir = _get(out, "dir", "output", None)
        if out_dir is not None and not isinstance(out_dir, str):
            raise ConfigError("output.dir", "expected a string")
        return cls(
            InstanceSpec.parse(_get(doc, "instance", "")),
            DataSpec.parse(_get(doc, "data", "", {"K": [1000]})),
            LearnerSpec.parse(_get(doc, "learner", "", None)),
            EvaluationSpec.parse(_get(doc, "evaluation", "", None)),
            _int(_get(doc, "seed", "", 0), "seed", 0),
            out_dir,
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(doc)

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "RunConfig":
        return RunConfig(self.instance, self.data, self.learner, self.evaluation,
                         self.seed if seed is None else seed, self.out if out is None else out)

    def to_dict(self) -> dict:
        return {"schema": CONFIG_SCHEMA, "seed": self.seed, "instance": self.instance.to_dict(),
                "data": self.data.to_dict(), "learner": self.learner.to_dict(),
                "evaluation": self.evaluation.to_dict()}


# ---------------------------------------------------------------------------
# Seeds


def sub_seed(master: int, *path: int) -> int:
    """Deterministic 63-bit seed for a named branch of the master seed.

    Branches: 0 = instance, 1 = dataset (per data seed and K), 2 = learner
    side streams (per data seed). Changing the K list leaves the instance
    branch untouched.
    """
    return int(np.random.SeedSequence([master, *path]).generate_state(2, np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------------------
# Learn rows


def _learn(mdp, profile, dataset, cfg):
    return offline_vcg_learn(dataset, profile, cfg, mdp.s0)


def _learned_desiderata(mdp, actual, dataset, cfg, family, truthful: MechanismOutcome):
    """IR minima and truthfulness gains of the learned mechanism over ``family``.

    One learn per (deviating agent, report) serves both checks: it is a
    misreport for the deviator and an IR profile for everyone else.
    """
    n = actual.n
    u_truth = np.array([agent_utility(mdp, actual.agent(i), truthful.policy, truthful.prices[i]) for i in range(n)])
    ir = u_truth.copy()
    gain = np.full(n, -np.inf)
    for j in range(n):
        for rep in family.generate(actual.agent(j)):
            prof = actual.with_agent(j, rep)
            out, _ = _learn(mdp, prof, dataset.with_rewards(prof), cfg)
            u = np.array([agent_utility(mdp, actual.agent(i), out.policy, out.prices[i]) for i in range(n)])
            gain[j] = max(gain[j], u[j] - u_truth[j])
            others = np.arange(n) != j
            ir[others] = np.minimum(ir[others], u[others])
    return ir, gain


def _run_cell(job) -> tuple[dict, float]:
    cfg_doc, K, seed = job
    cfg = RunConfig.from_dict(cfg_doc)
    t0 = time.perf_counter()
    mdp, actual = cfg.instance.build(sub_seed(cfg.seed, 0))
    H, S, A = mdp.shape
    hyper = cfg.learner.hyper(K, H, S, A, actual.n, actual.r_max)
    lcfg = cfg.learner.config(hyper["lam"], hyper["eta"])
    dist = cfg.data.distribution(mdp)
    dataset = sample_dataset(mdp, actual, dist, K, sub_seed(cfg.seed, 1, seed, K))
    out, diag = _learn(mdp, actual, dataset, lcfg)
    bench = exact_vcg(mdp, actual)
    n = actual.n
    row = {"zeta1": cfg.learner.zeta1, "zeta2": cfg.learner.zeta2, "K": K, "seed": seed,
           "lam": hyper["lam"], "eta": hyper["eta"]}
    m = cfg.evaluation.metrics
    row["subopt_welfare"] = subopt_welfare(mdp, actual, out.policy) if "subopt_welfare" in m else NOT_COMPUTED
    for i in range(n):
        row[f"subopt_agent_{i}"] = subopt_agent(mdp, actual, i, out) if "subopt_agent" in m else NOT_COMPUTED
    row["subopt_seller"] = subopt_seller(mdp, actual, out) if "subopt_seller" in m else NOT_COMPUTED
    want_des = cfg.evaluation.desiderata_for(K, cfg.data.K) and ({"ir_min", "truthfulness_gain"} & set(m))
    if want_des:
        family = family_from_spec(_family_with_seed(cfg.evaluation.family, sub_seed(cfg.seed, 2, seed)))
        ir, gain = _learned_desiderata(mdp, actual, dataset, lcfg, family, out)
    for i in range(n):
        row[f"ir_min_{i}"] = float(ir[i]) if want_des and "ir_min" in m else NOT_COMPUTED
    for i in range(n):
        row[f"truthfulness_gain_{i}"] = float(gain[i]) if want_des and "truthfulness_gain" in m else NOT_COMPUTED
    for i in range(n):
        row[f"price_{i}"] = float(out.prices[i]) if "prices" in m else NOT_COMPUTED
        row[f"price_star_{i}"] = float(bench.prices[i]) if "prices" in m else NOT_COMPUTED
    for i in range(n):
        row[f"price_error_{i}"] = abs(float(out.prices[i] - bench.prices[i])) if "price_error" in m else NOT_COMPUTED
    for i in range(n):
        row[f"policy_price_error_{i}"] = (abs(float(out.prices[i]) - vcg_price(mdp, actual, out.policy, i))
                                          if "policy_price_error" in m else NOT_COMPUTED)
    row["welfare_estimate"] = diag.welfare_estimate
    row["converged"] = int(diag.converged) if "converged" in m else NOT_COMPUTED
    # Shift coefficients for the bound comparison; tabular coefficients depend
    # only on the target visitation.
    shifts = _shift_terms(mdp, actual, dist, out, diag) if cfg.evaluation.bounds else None
    return {"row": row, "hyper": hyper, "shifts": shifts}, time.perf_counter() - t0


def _family_with_seed(fam: dict, seed: int) -> dict:
    if fam.get("kind") == "random" and "seed" not in fam:
        return {**fam, "seed": seed % (2**31)}
    return fam


def _shift_terms(mdp, actual, dist, out, diag) -> dict:
    """Shift coefficients against the data distribution for the bound terms.

    Tabular coefficients depend only on the target visitation, so iterate
    terms reduce to one value. Terms indexed by an agent are per-agent lists.
    """
    mu = dist.mu
    C = lambda nu: shift_coefficient(nu, mu)  # noqa: E731
    c_opt = C(visitation(mdp, exact_optimal(mdp, actual.total())[1]))
    c_self = C(mixture_visitation(mdp, out.policy))
    n = actual.n
    return {
        "check_iter_vs_opt": c_opt,
        "check_self": c_self,
        "tilde_iter_vs_opt": c_opt,
        "tilde_self": c_self,
        "check_reported_self": c_self,
        "check_minus_i_iter_vs_opt": [C(visitation(mdp, exact_optimal(mdp, actual.exclude(i))[1])) for i in range(n)],
        "check_minus_i_self": [C(mixture_visitation(mdp, diag.policies[f"exclude({i})"])) for i in range(n)],
    }


# ---------------------------------------------------------------------------
# Reports


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    header = list(rows[0].keys())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) for h in header])
    return buf.getvalue()


def read_report_csv(path: str | Path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [dict(zip(header, rec)) for rec in reader]
    return header, rows


def _numeric(v) -> float | None:
    if isinstance(v, str):
        if v == NOT_COMPUTED:
            return None
        return float(v)
    return float(v)


def quantiles(values) -> dict:
    arr = np.asarray([v for v in values if v is not None], dtype=float)
    if arr.size == 0:
        return {"median": None, "q25": None, "q75": None, "count": 0}
    q25, med, q75 = np.quantile(arr, [0.25, 0.5, 0.75])
    return {"median": float(med), "q25": float(q25), "q75": float(q75), "count": int(arr.size)}


def loglog_slope(Ks, medians) -> float | None:
    """Least-squares slope of log(median) on log(K); ``None`` if undefined."""
    pts = [(k, m) for k, m in zip(Ks, medians) if m is not None]
    if len(pts) < 2 or any(m <= 0 for _, m in pts):
        return None
    x = np.log([k for k, _ in pts])
    y = np.log([m for _, m in pts])
    return float(np.polyfit(x, y, 1)[0])


def metric_columns(header: list[str]) -> list[str]:
    skip = {"zeta1", "zeta2", "K", "seed"}
    return [h for h in header if h not in skip]


def aggregate(header: list[str], rows: list[dict]) -> dict:
    """Per-(zeta pair, K) medians and IQRs plus the SubOpt rate slope per pair."""
    out = {}
    pairs = sorted({(r["zeta1"], r["zeta2"]) for r in rows})
    for z1, z2 in pairs:
        sub = [r for r in rows if (r["zeta1"], r["zeta2"]) == (z1, z2)]
        Ks = sorted({int(r["K"]) for r in sub})
        per_k = {}
        for K in Ks:
            rk = [r for r in sub if int(r["K"]) == K]
            per_k[str(K)] = {c: quantiles([_numeric(r[c]) for r in rk]) for c in metric_columns(header)}
        meds = [per_k[str(K)]["subopt_welfare"]["median"] for K in Ks]
        out[f"{z1},{z2}"] = {
            "K": Ks,
            "per_K": per_k,
            "subopt_slope": loglog_slope(Ks, meds),
        }
    return out


def aggregate_csv(agg: dict, header: list[str]) -> str:
    cols = metric_columns(header)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["zeta1", "zeta2", "K", "count", "subopt_slope"]
               + [f"{c}_{q}" for c in cols for q in ("median", "q25", "q75")])
    for pair, block in agg.items():
        z1, z2 = pair.split(",")
        slope = block["subopt_slope"]
        for K in block["K"]:
            stats = block["per_K"][str(K)]
            count = stats["subopt_welfare"]["count"]
            vals = []
            for c in cols:
                for q in ("median", "q25", "q75"):
                    v = stats[c][q]
                    vals.append(NOT_COMPUTED if v is None else _fmt(v))
            w.writerow([z1, z2, K, count, "nan" if slope is None else _fmt(slope)] + vals)
    return buf.getvalue()


def plot_data(agg: dict, metric: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "K", "median", "q25", "q75"])
    for pair, block in agg.items():
        for K in block["K"]:
            st = block["per_K"][str(K)].get(metric)
            if st is None or st["median"] is None:
                continue
            w.writerow([pair.replace(",", "/"), K, _fmt(st["median"]), _fmt(st["q25"]), _fmt(st["q75"])])
    return buf.getvalue()


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else "-inf"
    if isinstance(x, list):
        return [_finite(v) for v in x]
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    return x


@dataclass
class RunReport:
    rows: list
    sidecar: dict
    timing: dict

    @property
    def header(self) -> list[str]:
        return list(self.rows[0].keys())

    def csv_text(self) -> str:
        return rows_to_csv(self.rows)

    def json_text(self) -> str:
        return _dump_json(_finite(self.sidecar))

    def write(self, out_dir: str | Path) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / "report.csv", "json": out / "report.json", "timing": out / "timing.json"}
        paths["csv"].write_text(self.csv_text())
        paths["json"].write_text(self.json_text())
        paths["timing"].write_text(_dump_json(self.timing))
        return {k: str(v) for k, v in paths.items()}


def _cell_comparison(cfg: RunConfig, cell: dict, n: int, shape):
    H, S, A = shape
    r, shifts = cell["row"], cell["shifts"]
    budget = ErrorBudget.make(H, cell["r_max"], A, cfg.learner.T, cell["hyper"]["eps_s_theory"],
                              shift_coefficients=shifts)
    zetas = (Mode.PES, Mode.OPT)
    rows, violations = [], []
    whole = empirical_vs_bound([{"subopt_welfare": _num_or_none(r["subopt_welfare"]),
                                 "subopt_seller": _num_or_none(r["subopt_seller"])}], budget, zetas, n=n)
    rows += whole.rows
    violations += whole.violations
    for i in range(n):
        # Agent-indexed bounds read the minus-i terms of agent i.
        own = {"check_minus_i_iter_vs_opt": shifts["check_minus_i_iter_vs_opt"][i],
               "check_minus_i_out_self": shifts["check_minus_i_self"][i]}
        cmp = empirical_vs_bound([{"subopt_agent": _num_or_none(r[f"subopt_agent_{i}"]),
                                   "ir_min": _num_or_none(r[f"ir_min_{i}"]),
                                   "truthfulness_gain": _num_or_none(r[f"truthfulness_gain_{i}"])}],
                                 budget, zetas, shift=own, n=n)
        for row in cmp.rows:
            row["index"] = i
        rows += cmp.rows
        violations += [row for row in cmp.rows if not row["ok"]]
    for row in rows:
        row["K"], row["seed"] = r["K"], r["seed"]
        del row["result"]
    return budget, rows, violations


def _bound_comparisons(cfg: RunConfig, cells: list[dict], n: int, shape) -> tuple[dict, bool]:
    """Theory-mode budgets against every measured row, summarised per K."""
    if (Mode(cfg.learner.zeta1), Mode(cfg.learner.zeta2)) != (Mode.PES, Mode.OPT):
        return {"skipped": "bound comparison is instantiated for (PES, OPT) only"}, True
    out, ok = {}, True
    for K in cfg.data.K:
        ks = [c for c in cells if c["row"]["K"] == K]
        summary: dict = {}
        violations = []
        budget = None
        for c in ks:
            budget, rows, bad = _cell_comparison(cfg, c, n, shape)
            violations += bad
            for row in rows:
                m = row["metric"]
                tight = summary.setdefault(m, {"min_bound": row["bound"], "max_bound": row["bound"]})
                tight["min_bound"] = min(tight["min_bound"], row["bound"])
                tight["max_bound"] = max(tight["max_bound"], row["bound"])
        ok &= not violations
        out[str(K)] = {
            "eps_s": budget.eps_s, "err_opt": budget.err_opt, "err_stat": budget.err_stat,
            "bounds": summary, "violations": violations, "ok": not violations,
            "instantiation": "misreport-dependent shift terms use the truthful profile",
        }
    return out, ok


def _num_or_none(v):
    return None if v == NOT_COMPUTED else v


def _list_or_none(vs):
    return None if any(v == NOT_COMPUTED for v in vs) else vs


def cmd_learn(cfg: RunConfig, jobs: int = 1) -> tuple[RunReport, bool]:
    """Sweep (K, seed) cells; rows are reduced in (K, seed) order whatever ``jobs`` is."""
    mdp, actual = cfg.instance.build(sub_seed(cfg.seed, 0))
    doc = cfg.to_dict()
    keys = [(K, s) for K in cfg.data.K for s in cfg.data.seeds]
    jobs_list = [(doc, K, s) for K, s in keys]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_cell, jobs_list))
    else:
        results = [_run_cell(j) for j in jobs_list]
    cells = []
    timing = {"cells": []}
    for (K, s), (cell, wall) in zip(keys, results):
        cell["r_max"] = actual.r_max
        cells.append(cell)
        timing["cells"].append({"K": K, "seed": s, "wall_time_s": wall})
    rows = [c["row"] for c in cells]
    header = list(rows[0].keys())
    str_rows = [{k: _fmt(v) for k, v in r.items()} for r in rows]
    sidecar = {
        "schema": REPORT_SCHEMA,
        "command": "learn",
        "config": doc,
        "instance": {"H": mdp.H, "S": mdp.S, "A": mdp.A, "n": actual.n, "r_max": actual.r_max},
        "hyperparameters": {str(K): next(c["hyper"] for c in cells if c["row"]["K"] == K) for K in cfg.data.K},
        "aggregates": aggregate(header, str_rows),
        "columns": header,
        "not_computed_marker": NOT_COMPUTED,
    }
    ok = True
    if cfg.evaluation.bounds:
        sidecar["bound_comparison"], ok = _bound_comparisons(cfg, cells, actual.n, mdp.shape)
    return RunReport(rows, sidecar, timing), ok


def cmd_exact(cfg: RunConfig, tol: float = 1e-9) -> tuple[RunReport, bool]:
    t0 = time.perf_counter()
    mdp, actual = cfg.instance.build(sub_seed(cfg.seed, 0))
    family = family_from_spec(_family_with_seed(cfg.evaluation.family, sub_seed(cfg.seed, 2, 0)))
    rep = check_desiderata(mdp, actual, family)
    outcome = exact_vcg(mdp, actual)
    row = {"welfare_gap": rep.welfare_gap, "min_agent_utility": rep.min_agent_utility,
           "max_truthfulness_gain": rep.max_truthfulness_gain}
    for r in rep.per_agent:
        i = r["agent"]
        row[f"truthful_utility_{i}"] = r["truthful_utility"]
        row[f"ir_min_{i}"] = r["ir_min"]
        row[f"truthfulness_gain_{i}"] = r["truthfulness_gain"]
        row[f"price_{i}"] = float(outcome.prices[i])
    ok = rep.welfare_gap <= tol and rep.min_agent_utility >= -tol and rep.max_truthfulness_gain <= tol
    sidecar = {"schema": REPORT_SCHEMA, "command": "exact", "config": cfg.to_dict(),
               "desiderata": rep.to_dict(), "ok": bool(ok), "tolerance": tol}
    return RunReport([row], sidecar, {"wall_time_s": time.perf_counter() - t0}), ok


class ReportMergeError(InputError):
    pass


def sweep_report(paths: list[str | Path]) -> tuple[list[str], list[dict], dict]:
    """Merge learn reports and recompute aggregates; rows are keyed by (zetas, K, seed)."""
    if not paths:
        raise ReportMergeError("no reports given")
    header, merged, seen = None, [], set()
    for p in paths:
        p = Path(p)
        csv_path = p / "report.csv" if p.is_dir() else p
        side = csv_path.with_suffix(".json")
        if side.exists():
            meta = json.loads(side.read_text())
            if meta.get("schema") != REPORT_SCHEMA or meta.get("command") != "learn":
                raise ReportMergeError(f"{side}: not a learn report with schema {REPORT_SCHEMA}")
        h, rows = read_report_csv(csv_path)
        if "zeta1" not in h or "K" not in h:
            raise ReportMergeError(f"{csv_path}: missing learn-report columns")
        if header is None:
            header = h
        elif h != header:
            raise ReportMergeError(f"{csv_path}: columns differ from {paths[0]}")
        for r in rows:
            key = (r["zeta1"], r["zeta2"], int(r["K"]), int(r["seed"]))
            if key in seen:
                raise ReportMergeError(f"{csv_path}: duplicate row for {key}")
            seen.add(key)
            merged.append(r)
    merged.sort(key=lambda r: (r["zeta1"], r["zeta2"], int(r["K"]), int(r["seed"])))
    return header, merged, aggregate(header, merged)


def write_sweep(out_dir: str | Path, header, rows, agg) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"rows": out / "merged.csv", "aggregate": out / "aggregate.csv", "json": out / "aggregate.json"}
    files["rows"].write_text(rows_to_csv(rows))
    files["aggregate"].write_text(aggregate_csv(agg, header))
    files["json"].write_text(_dump_json({"schema": REPORT_SCHEMA, "command": "sweep-report", "aggregates": agg}))
    for metric in metric_columns(header):
        files[f"plot_{metric}"] = out / f"plot_{metric}.csv"
        files[f"plot_{metric}"].write_text(plot_data(agg, metric))
    return {k: str(v) for k, v in files.items()}


def check_writable(out_dir: str | Path) -> None:
    p = Path(out_dir)
    probe = p
    while not probe.exists():
        probe = probe.parent
    if not os.access(probe, os.W_OK) or (probe == p and not p.is_dir()):
        raise ConfigError("output.dir", f"{out_dir} is not a writable directory")


def default_config(n: int = 1, Ks=(200, 2000, 20000), seeds: int = 20) -> dict:
    """The consistency sweep on M2 used by the acceptance suite."""
    return {
        "schema": CONFIG_SCHEMA,
        "seed": 0,
        "instance": {"kind": "m2", "n": n},
        "data": {"mu": "uniform", "K": list(Ks), "seeds": list(range(seeds))},
        "learner": {"T": 256, "zeta1": "PES", "zeta2": "OPT",
                    "lambda": {"mode": "scaled", "c": 20.0}, "eta": {"mode": "fixed", "value": 1.0}},
        "evaluation": {"family": {"kind": "grid", "levels": [0.0, 0.5, 1.0], "max_cells": 2},
                       "desiderata_at": "max", "bounds": True},
    }
