"""Compare the compiled kernels with the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N] [--json PATH]``.
Each case checks that both backends agree before timing them.
"""
from __future__ import annotations

import argparse
import json
import timeit
from contextlib import contextmanager

import numpy as np

from offline_vcg import _kernels_py, kernels
from offline_vcg.data import DataDistribution, Total, sample_dataset
from offline_vcg.learner import EmpiricalModel, EvalConfig, SpiConfig, VcgLearnConfig, offline_vcg_learn
from offline_vcg.learner.evaluation import _initial_point, default_step
from offline_vcg.mdp import StagePolicy, box_bounds, m2_mdp, m2_profile, random_instance

try:
    from offline_vcg import _native
except ImportError:
    _native = None


def _qp_case(S, A, H, K, seed=0):
    rng = np.random.default_rng(seed)
    mdp, prof = random_instance(rng, S, A, H, 1)
    data = sample_dataset(mdp, prof, DataDistribution.uniform(H, S, A), K, seed)
    model = EmpiricalModel.build(data, prof, Total())
    pi = StagePolicy(rng.dirichlet(np.ones(A), size=(H, S)))
    cfg = EvalConfig(10.0, warm_start=False)
    f0 = _initial_point(model, pi, 0, cfg)
    args = (f0, model.mu_hat, model.rbar, model.phat, pi.probs, 0, 1.0, cfg.lam,
            box_bounds(H, prof.r_max), model.seen.astype(float), default_step(model, cfg.lam), 5000, 1e-12)
    return args


def _batch_case(S, A, H, B, seed=0):
    rng = np.random.default_rng(seed)
    mdp, _ = random_instance(rng, S, A, H, 1)
    R = rng.uniform(-1, 1, size=(B, H, S, A))
    return mdp.transition, R, 0


@contextmanager
def backend(impl):
    saved = {name: getattr(kernels, name) for name in ("pgd_box_qp", "qp_objective", "qp_gradient",
                                                        "batch_optimal", "batch_policy_value")}
    for name in saved:
        setattr(kernels, name, getattr(impl, name))
    try:
        yield
    finally:
        for name, fn in saved.items():
            setattr(kernels, name, fn)


def _learn_once():
    mdp, prof = m2_mdp(), m2_profile(2)
    data = sample_dataset(mdp, prof, DataDistribution.uniform(2, 2, 2), 2000, 0)
    cfg = VcgLearnConfig(SpiConfig.make(64, 1.0, 10.0))
    return offline_vcg_learn(data, prof, cfg)[0].prices


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)
    if _native is None:
        print("compiled extension not built; run `python3 setup.py build_ext --inplace`")
        return 1
    rows = []

    for S, A, H, K in ((2, 2, 2, 20000), (4, 3, 3, 20000), (8, 4, 4, 50000)):
        a = _qp_case(S, A, H, K)
        f_py = _kernels_py.pgd_box_qp(*a)[0]
        f_nat = _native.pgd_box_qp(*a)[0]
        assert np.allclose(f_py, f_nat, atol=1e-8), "backends disagree on pgd_box_qp"
        rows.append({"case": f"pgd_box_qp S={S} A={A} H={H}",
                     "python_s": _time(lambda: _kernels_py.pgd_box_qp(*a), args.repeat),
                     "native_s": _time(lambda: _native.pgd_box_qp(*a), args.repeat)})

    for S, A, H, B in ((2, 2, 2, 6561), (4, 4, 3, 6561)):
        a = _batch_case(S, A, H, B)
        assert np.array_equal(_kernels_py.batch_optimal(*a)[1], _native.batch_optimal(*a)[1])
        rows.append({"case": f"batch_optimal S={S} A={A} H={H} B={B}",
                     "python_s": _time(lambda: _kernels_py.batch_optimal(*a), args.repeat),
                     "native_s": _time(lambda: _native.batch_optimal(*a), args.repeat)})

    with backend(_kernels_py):
        p_py = _learn_once()
        t_py = _time(_learn_once, 1)
    with backend(_native):
        p_nat = _learn_once()
        t_nat = _time(_learn_once, 1)
    assert np.allclose(p_py, p_nat, atol=1e-6), "backends disagree on learned prices"
    rows.append({"case": "offline_vcg_learn M2 n=2 T=64", "python_s": t_py, "native_s": t_nat})

    width = max(len(r["case"]) for r in rows)
    print(f"{'case':<{width}}  {'python [s]':>11}  {'native [s]':>11}  {'speedup':>8}")
    for r in rows:
        r["speedup"] = r["python_s"] / r["native_s"]
        print(f"{r['case']:<{width}}  {r['python_s']:11.4f}  {r['native_s']:11.4f}  {r['speedup']:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
